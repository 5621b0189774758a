import json
import logging
from typing import Optional, Sequence, Tuple

import torch
from torch import nn
from torch.utils.data import TensorDataset

from .checkpoint import METHOD1_RECIPE_ASSUMPTION, load_state, read_checkpoint, save_checkpoint
from .config import config
from .dataset import MultiViewClip
from .exceptions import CorruptContainerError, InvalidInputError, ViewCountError
from .features import EncoderFactory, encode_frames, init_linear_head, prepare_stream, temporal_mean_pool
from .models import (
    NUM_PROFICIENCY_LEVELS,
    NUM_SCENARIOS,
    VIEWS,
    EncoderConfig,
    LossCurves,
    PredictionRecord,
    Proficiency,
    Scenario,
    TrainConfig,
    ViewFusion,
)
from .training import StepLoss, train_model
from .utils import argmax_lowest, softmax

logger = logging.getLogger(__name__)

METHOD_NAME = "multitask"


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """
    -log softmax(logits)[label] with max subtraction.

    `logits` is K or B x K; a batch returns the mean over its rows.
    """
    if logits.ndim not in (1, 2):
        raise InvalidInputError(f"logits must be K or B x K, got shape {tuple(logits.shape)}")

    num_classes = logits.shape[-1]
    if num_classes < 2:
        raise InvalidInputError(f"cross entropy needs at least 2 classes, got {num_classes}")

    if not torch.isfinite(logits).all():
        raise InvalidInputError("logits contain non-finite values")

    labels = torch.as_tensor(labels, dtype=torch.long)
    batched = logits.reshape(-1, num_classes)
    labels = labels.reshape(-1)

    if labels.shape[0] != batched.shape[0]:
        raise InvalidInputError(f"{labels.shape[0]} labels for {batched.shape[0]} rows of logits")

    if ((labels < 0) | (labels >= num_classes)).any():
        raise InvalidInputError(f"label out of range [0, {num_classes}): {labels.tolist()}")

    shift = batched.max(dim=-1, keepdim=True).values.detach()
    shifted = batched - shift
    log_normalizer = torch.log(torch.exp(shifted).sum(dim=-1))
    losses = log_normalizer - shifted.gather(1, labels[:, None]).squeeze(1)

    return losses.mean() if logits.ndim == 2 else losses[0]


class MultiTaskLossParts(StepLoss):
    def __init__(self, l_prof: torch.Tensor, l_scen: torch.Tensor, alpha: float):
        if not 0.0 <= alpha <= 1.0:
            raise InvalidInputError(f"alpha must be in [0, 1], got {alpha}")

        super().__init__(alpha * l_prof + (1.0 - alpha) * l_scen, l_prof, l_scen)
        self.alpha = alpha

    def as_floats(self) -> Tuple[float, float, float]:
        return self.total.item(), self.l_prof.item(), self.l_scen.item()


def multitask_loss(logits_prof, y_prof, logits_scen, y_scen, alpha: float = 0.5) -> MultiTaskLossParts:
    return MultiTaskLossParts(cross_entropy(logits_prof, y_prof), cross_entropy(logits_scen, y_scen), alpha)


class MultiTaskModel(nn.Module):
    """Shared stand-in encoder over all five views with proficiency (4) and scenario (6) linear heads."""

    def __init__(self, encoder_config: EncoderConfig, view_fusion: ViewFusion = ViewFusion.MeanOfPooledViews):
        super().__init__()
        self.encoder_config = encoder_config
        self.view_fusion = ViewFusion(view_fusion)
        self.encoder = EncoderFactory.get(encoder_config)
        self.prof_head = nn.Linear(encoder_config.feature_dim, NUM_PROFICIENCY_LEVELS)
        self.scen_head = nn.Linear(encoder_config.feature_dim, NUM_SCENARIOS)

        generator = torch.Generator().manual_seed(encoder_config.seed)
        init_linear_head(self.prof_head, generator)
        init_linear_head(self.scen_head, generator)

    def pooled_views(self, views: torch.Tensor) -> torch.Tensor:
        """B x V x T x H x W x 3 -> B x V x D"""
        return temporal_mean_pool(encode_frames(views, self.encoder))

    def forward(self, views: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Logits for a batch of clips, B x V x T x H x W x 3.

        mean-of-pooled-views averages the per-view pooled features before the heads; views-as-samples applies the
        heads per view and averages logits.
        """
        pooled = self.pooled_views(views)

        if self.view_fusion == ViewFusion.MeanOfPooledViews:
            fused = pooled.mean(dim=-2)
            return self.prof_head(fused), self.scen_head(fused)

        return self.prof_head(pooled).mean(dim=-2), self.scen_head(pooled).mean(dim=-2)

    def per_view_logits(self, views: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        pooled = self.pooled_views(views)
        return self.prof_head(pooled), self.scen_head(pooled)


def prepare_clip_views(clip: MultiViewClip, encoder_config: EncoderConfig, T: Optional[int] = None) -> torch.Tensor:
    """V x T x crop x crop x 3, views in canonical order, frames sampled by linear interpolation."""
    missing = [v for v in VIEWS if v not in clip.streams]
    if missing:
        raise ViewCountError(len(VIEWS) - len(missing), len(VIEWS))

    T = T or config.method1_frames
    return torch.stack([prepare_stream(clip.streams[v], T, encoder_config, interpolate=True) for v in VIEWS])


def multitask_forward(model: MultiTaskModel, clip: MultiViewClip) -> Tuple[torch.Tensor, torch.Tensor]:
    views = prepare_clip_views(clip, model.encoder_config)
    logits_prof, logits_scen = model(views[None])

    return logits_prof[0], logits_scen[0]


def predict_multitask(model: MultiTaskModel, clip: MultiViewClip) -> Tuple[Proficiency, Scenario]:
    with torch.no_grad():
        logits_prof, logits_scen = multitask_forward(model, clip)

    return Proficiency(argmax_lowest(logits_prof.tolist())), Scenario(argmax_lowest(logits_scen.tolist()))


def predict_multitask_record(model: MultiTaskModel, clip: MultiViewClip) -> PredictionRecord:
    with torch.no_grad():
        views = prepare_clip_views(clip, model.encoder_config)
        logits_prof, logits_scen = model(views[None])
        per_view_prof, _ = model.per_view_logits(views[None])

    label = Proficiency(argmax_lowest(logits_prof[0].tolist()))
    view_probabilities = {}
    if model.view_fusion == ViewFusion.ViewsAsSamples:
        view_probabilities = {v: softmax(per_view_prof[0, i]).tolist() for i, v in enumerate(VIEWS)}

    return PredictionRecord(
        sample_id=clip.sample_id,
        method=METHOD_NAME,
        true_scenario=clip.scenario,
        true_proficiency=clip.proficiency,
        predicted_scenario=Scenario(argmax_lowest(logits_scen[0].tolist())),
        view_probabilities=view_probabilities,
        fused={METHOD_NAME: softmax(logits_prof[0]).tolist()},
        labels={METHOD_NAME: label},
    )


def build_multitask_dataset(clips: Sequence[MultiViewClip], encoder_config: EncoderConfig) -> TensorDataset:
    if not clips:
        return TensorDataset(torch.empty(0), torch.empty(0, dtype=torch.long), torch.empty(0, dtype=torch.long))

    views = torch.stack([prepare_clip_views(c, encoder_config) for c in clips])
    y_prof = torch.tensor([int(c.proficiency) for c in clips], dtype=torch.long)
    y_scen = torch.tensor([int(c.scenario) for c in clips], dtype=torch.long)

    return TensorDataset(views, y_prof, y_scen)


def make_multitask_loss_fn(alpha: float):
    def _loss_fn(model: MultiTaskModel, batch) -> MultiTaskLossParts:
        views, y_prof, y_scen = batch

        if model.view_fusion == ViewFusion.ViewsAsSamples and model.training:
            # Each view is its own sample carrying the clip's labels
            logits_prof, logits_scen = model.per_view_logits(views)
            num_views = views.shape[1]
            return multitask_loss(
                logits_prof.reshape(-1, NUM_PROFICIENCY_LEVELS),
                y_prof.repeat_interleave(num_views),
                logits_scen.reshape(-1, NUM_SCENARIOS),
                y_scen.repeat_interleave(num_views),
                alpha,
            )

        logits_prof, logits_scen = model(views)
        return multitask_loss(logits_prof, y_prof, logits_scen, y_scen, alpha)

    return _loss_fn


def save_multitask(model: MultiTaskModel, path: str, train_config: TrainConfig):
    metadata = {
        "kind": "multitask",
        "encoder": json.loads(model.encoder_config.json()),
        "view_fusion": model.view_fusion.value,
        "alpha": train_config.alpha,
        "seed": train_config.seed,
        "train": json.loads(train_config.json()),
        "assumptions": [METHOD1_RECIPE_ASSUMPTION],
    }
    save_checkpoint(path, model, metadata)

    logger.info("Saved multi-task model to %s", path)


def load_multitask(path: str) -> Tuple[MultiTaskModel, TrainConfig]:
    metadata, state = read_checkpoint(path)
    if metadata.get("kind") != "multitask":
        raise CorruptContainerError(path, f"expected a multi-task checkpoint, found {metadata.get('kind')!r}")

    model = MultiTaskModel(EncoderConfig.parse_obj(metadata["encoder"]), ViewFusion(metadata["view_fusion"]))

    return load_state(path, model, state), TrainConfig.parse_obj(metadata["train"])


def train_multitask(
    train_clips: Sequence[MultiViewClip],
    val_clips: Sequence[MultiViewClip],
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    view_fusion: ViewFusion = ViewFusion.MeanOfPooledViews,
    curves_path: Optional[str] = None,
) -> Tuple[MultiTaskModel, LossCurves]:
    model = MultiTaskModel(encoder_config, view_fusion)

    return train_model(
        model,
        build_multitask_dataset(train_clips, encoder_config),
        build_multitask_dataset(val_clips, encoder_config),
        train_config,
        make_multitask_loss_fn(train_config.alpha),
        name=f"multi-task model ({model.view_fusion.value})",
        curves_path=curves_path,
    )
