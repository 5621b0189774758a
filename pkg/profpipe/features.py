import logging
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import InvalidInputError, ShapeMismatchError
from .models import EncoderArchitecture, EncoderConfig, View

logger = logging.getLogger(__name__)

StreamLike = Union[np.ndarray, torch.Tensor]


class FrameStack:
    def __init__(self, frames: torch.Tensor, source_view: Optional[View] = None):
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ShapeMismatchError(f"frames must be T x H x W x 3, got {tuple(frames.shape)}")

        self.frames = frames
        self.source_view = source_view

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_size(self):
        return tuple(self.frames.shape[1:3])

    def __repr__(self):
        view = self.source_view.value if self.source_view else None
        return f"FrameStack(T={self.num_frames}, size={self.frame_size}, view={view})"


class ClipFeatures:
    def __init__(self, F: torch.Tensor, pooled: torch.Tensor):  # noqa: N803
        self.F = F
        self.pooled = pooled


def _as_tensor(stream: StreamLike) -> torch.Tensor:
    if isinstance(stream, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(stream))

    return stream


def sample_frames_interpolated(stream: StreamLike, T: int, source_view: Optional[View] = None) -> FrameStack:
    """
    Samples T frames at positions i*(T_src-1)/(T-1) by linear interpolation between the bracketing source frames.

    Integral positions copy the source frame exactly. T == 1 samples the midpoint (T_src-1)/2.
    """
    frames = _as_tensor(stream)
    t_src = frames.shape[0]

    if t_src < 1:
        raise InvalidInputError("Cannot sample frames from an empty stream")
    if T < 1:
        raise InvalidInputError(f"Frame count must be >= 1, got {T}")

    numerator_step, denominator = (t_src - 1, T - 1) if T > 1 else (t_src - 1, 2)

    sampled = []
    for i in range(T):
        numerator = (i if T > 1 else 1) * numerator_step
        lower, remainder = divmod(numerator, denominator)

        if remainder == 0:
            sampled.append(frames[lower].clone())
        else:
            weight = remainder / denominator
            sampled.append((1.0 - weight) * frames[lower] + weight * frames[lower + 1])

    return FrameStack(torch.stack(sampled), source_view)


def uniform_indices(t_src: int, T: int) -> list:
    return [(i * t_src) // T for i in range(T)]


def sample_frames_uniform(stream: StreamLike, T: int, source_view: Optional[View] = None) -> FrameStack:
    frames = _as_tensor(stream)
    t_src = frames.shape[0]

    if T < 1:
        raise InvalidInputError(f"Frame count must be >= 1, got {T}")
    if t_src < T:
        raise InvalidInputError(f"Stream has {t_src} frames, cannot uniformly sample {T}")

    return FrameStack(frames[uniform_indices(t_src, T)].clone(), source_view)


def resized_shape(height: int, width: int, crop_size: int):
    if height <= width:
        return crop_size, int(round(width * crop_size / height))

    return int(round(height * crop_size / width)), crop_size


def preprocess_frames(
    stack: FrameStack, crop_size: int, mean: Sequence[float], std: Sequence[float]
) -> FrameStack:
    """
    Shorter-side bilinear resize to crop_size, centre crop to crop_size x crop_size, per-channel (x - mean) / std.
    """
    frames = stack.frames
    height, width = frames.shape[1:3]

    if min(height, width) < 1:
        raise InvalidInputError(f"Frames must be non-empty, got {height}x{width}")

    new_height, new_width = resized_shape(height, width, crop_size)
    assert min(new_height, new_width) == crop_size and max(new_height, new_width) >= crop_size

    if (new_height, new_width) != (height, width):
        dtype = frames.dtype if frames.is_floating_point() else torch.float32
        channels_first = frames.permute(0, 3, 1, 2).to(dtype)
        resized = F.interpolate(channels_first, size=(new_height, new_width), mode="bilinear", align_corners=False)
        frames = resized.permute(0, 2, 3, 1)

    top = (new_height - crop_size) // 2
    left = (new_width - crop_size) // 2
    frames = frames[:, top : top + crop_size, left : left + crop_size, :]

    mean_t = torch.as_tensor(mean, dtype=frames.dtype)
    std_t = torch.as_tensor(std, dtype=frames.dtype)

    return FrameStack(((frames - mean_t) / std_t).contiguous(), stack.source_view)


def prepare_stream(stream: StreamLike, T: int, encoder_config: EncoderConfig, interpolate: bool) -> torch.Tensor:
    sampler = sample_frames_interpolated if interpolate else sample_frames_uniform
    stack = sampler(stream, T)

    return preprocess_frames(stack, encoder_config.crop_size, encoder_config.norm_mean, encoder_config.norm_std).frames


def temporal_mean_pool(F: torch.Tensor) -> torch.Tensor:  # noqa: N803
    if F.shape[-2] == 0:
        raise InvalidInputError("Cannot pool zero frames")

    return F.mean(dim=-2)


class FrameMlpEncoder(nn.Module):
    """Shared per-frame 2-layer perceptron over flattened pixels."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        in_features = 3 * config.crop_size * config.crop_size
        self.net = nn.Sequential(
            nn.Linear(in_features, config.hidden_dim),
            nn.ReLU(),
            nn.Linear(config.hidden_dim, config.feature_dim),
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.net(frames.flatten(start_dim=-3))


class TinyTemporalTransformerEncoder(nn.Module):
    """Per-frame projection, learned positions, one self-attention layer with two heads."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        in_features = 3 * config.crop_size * config.crop_size
        self.project = nn.Linear(in_features, config.feature_dim)
        self.positions = nn.Parameter(torch.zeros(config.max_frames, config.feature_dim))
        self.mixer = nn.TransformerEncoderLayer(
            d_model=config.feature_dim,
            nhead=2,
            dim_feedforward=2 * config.feature_dim,
            dropout=0.0,
            batch_first=True,
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        leading = frames.shape[:-4]
        T = frames.shape[-4]
        if T > self.config.max_frames:
            raise ShapeMismatchError(f"{T} frames exceed max_frames={self.config.max_frames}")

        x = self.project(frames.flatten(start_dim=-3)) + self.positions[:T]
        x = self.mixer(x.reshape(-1, T, x.shape[-1]))

        return x.reshape(*leading, T, x.shape[-1])


def _uniform_(tensor: torch.Tensor, bound: float, generator: torch.Generator):
    tensor.copy_(torch.empty_like(tensor).uniform_(-bound, bound, generator=generator))


def init_encoder_parameters(encoder: nn.Module, seed: int) -> nn.Module:
    """
    Re-initialises every parameter from a private generator seeded with `seed`.

    The global torch RNG is never read, so encoders built concurrently in several threads get the same weights
    as when built one after another.
    """
    generator = torch.Generator().manual_seed(seed)

    with torch.no_grad():
        for module in encoder.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / module.in_features**0.5
                _uniform_(module.weight, bound, generator)
                if module.bias is not None:
                    _uniform_(module.bias, bound, generator)
            elif isinstance(module, nn.MultiheadAttention) and module.in_proj_weight is not None:
                fan_out, fan_in = module.in_proj_weight.shape
                _uniform_(module.in_proj_weight, (6.0 / (fan_in + fan_out)) ** 0.5, generator)
                if module.in_proj_bias is not None:
                    module.in_proj_bias.zero_()
            elif isinstance(module, nn.LayerNorm):
                module.reset_parameters()

    return encoder


class EncoderFactory:
    @staticmethod
    def get(config: EncoderConfig) -> nn.Module:
        # Construction draws default weights from the global RNG; they are all overwritten below
        with torch.random.fork_rng(devices=[]):
            if config.architecture == EncoderArchitecture.FrameMlp:
                encoder = FrameMlpEncoder(config)
            elif config.architecture == EncoderArchitecture.TinyTemporalTransformer:
                encoder = TinyTemporalTransformerEncoder(config)
            else:
                raise ValueError(f"Unknown encoder architecture: {config.architecture}")

        return init_encoder_parameters(encoder, config.seed)


def _check_stack_shape(frames: torch.Tensor, config: EncoderConfig):
    if frames.ndim < 4 or tuple(frames.shape[-3:]) != (config.crop_size, config.crop_size, 3):
        raise ShapeMismatchError(
            f"Encoder expects ... x T x {config.crop_size} x {config.crop_size} x 3, got {tuple(frames.shape)}"
        )


def encode_frames(frames: torch.Tensor, encoder: nn.Module) -> torch.Tensor:
    _check_stack_shape(frames, encoder.config)
    parameter = next(encoder.parameters())

    return encoder(frames.to(parameter.dtype))


def encode_clip(stack: FrameStack, encoder: nn.Module) -> ClipFeatures:
    F_ = encode_frames(stack.frames, encoder)

    return ClipFeatures(F_, temporal_mean_pool(F_))


def init_linear_head(head: nn.Linear, generator: torch.Generator):
    bound = 1.0 / head.in_features**0.5
    with torch.no_grad():
        head.weight.copy_(torch.empty_like(head.weight).uniform_(-bound, bound, generator=generator))
        head.bias.zero_()


class ClipClassifier(nn.Module):
    """Stand-in encoder, temporal mean pooling and one linear head."""

    def __init__(self, encoder_config: EncoderConfig, num_classes: int, head_seed: Optional[int] = None):
        super().__init__()
        self.encoder_config = encoder_config
        self.num_classes = num_classes
        self.encoder = EncoderFactory.get(encoder_config)
        self.head = nn.Linear(encoder_config.feature_dim, num_classes)

        generator = torch.Generator().manual_seed(encoder_config.seed if head_seed is None else head_seed)
        init_linear_head(self.head, generator)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.head(temporal_mean_pool(encode_frames(frames, self.encoder)))
