"""Small single-view classifiers: dataset checks, the trained-probe recognizer and bank cells share this recipe."""
import logging
from enum import Enum
from typing import Optional, Sequence, Tuple

import torch
from torch.utils.data import TensorDataset

from .config import config
from .dataset import MultiViewClip
from .features import ClipClassifier, prepare_stream
from .models import NUM_PROFICIENCY_LEVELS, NUM_SCENARIOS, EncoderConfig, LossCurves, TrainConfig, View
from .multitask import cross_entropy
from .training import StepLoss, train_model

logger = logging.getLogger(__name__)


class ProbeTarget(str, Enum):
    Proficiency = "proficiency"
    Scenario = "scenario"

    @property
    def num_classes(self) -> int:
        return NUM_PROFICIENCY_LEVELS if self is ProbeTarget.Proficiency else NUM_SCENARIOS

    def label_of(self, clip: MultiViewClip) -> int:
        return int(clip.proficiency if self is ProbeTarget.Proficiency else clip.scenario)


def prepare_view_frames(clip: MultiViewClip, view: View, encoder_config: EncoderConfig) -> torch.Tensor:
    return prepare_stream(clip.streams[view], config.method2_frames, encoder_config, interpolate=False)


def build_view_dataset(
    clips: Sequence[MultiViewClip], views: Sequence[View], target: ProbeTarget, encoder_config: EncoderConfig
) -> TensorDataset:
    """One example per (clip, view); frames uniformly sampled and preprocessed."""
    frames, labels = [], []

    for clip in clips:
        for view in views:
            frames.append(prepare_view_frames(clip, view, encoder_config))
            labels.append(target.label_of(clip))

    if not frames:
        crop = encoder_config.crop_size
        empty = torch.empty(0, config.method2_frames, crop, crop, 3)
        return TensorDataset(empty, torch.empty(0, dtype=torch.long))

    return TensorDataset(torch.stack(frames), torch.tensor(labels, dtype=torch.long))


def classifier_loss(model: ClipClassifier, batch) -> StepLoss:
    frames, labels = batch
    return StepLoss(cross_entropy(model(frames), labels))


def predict_labels(model: ClipClassifier, dataset: TensorDataset, batch_size: int = 32) -> torch.Tensor:
    model.eval()
    frames = dataset.tensors[0]
    outputs = []

    with torch.no_grad():
        for start in range(0, frames.shape[0], batch_size):
            outputs.append(model(frames[start : start + batch_size]))

    if not outputs:
        return torch.empty(0, dtype=torch.long)

    # argmax returns the first maximal index, i.e. the lowest class id on ties
    return torch.cat(outputs).argmax(dim=-1)


def dataset_accuracy(model: ClipClassifier, dataset: TensorDataset) -> float:
    labels = dataset.tensors[1]
    if labels.shape[0] == 0:
        raise ValueError("Cannot compute accuracy on an empty dataset")

    return (predict_labels(model, dataset) == labels).double().mean().item()


def train_probe(
    train_clips: Sequence[MultiViewClip],
    val_clips: Sequence[MultiViewClip],
    views: Sequence[View],
    target: ProbeTarget,
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    name: Optional[str] = None,
) -> Tuple[ClipClassifier, Optional[float], LossCurves]:
    """Trains a classifier on `views` of `train_clips`; returns it with its accuracy on `val_clips` (if any)."""
    name = name or f"probe[{target.value}:{'+'.join(v.value for v in views)}]"

    train_data = build_view_dataset(train_clips, views, target, encoder_config)
    val_data = build_view_dataset(val_clips, views, target, encoder_config)

    model = ClipClassifier(encoder_config, target.num_classes)
    model, curves = train_model(model, train_data, val_data, train_config, classifier_loss, name=name)

    accuracy = dataset_accuracy(model, val_data) if len(val_data) else None
    if accuracy is not None:
        logger.info("%s validation accuracy: %.3f", name, accuracy)

    return model, accuracy, curves
