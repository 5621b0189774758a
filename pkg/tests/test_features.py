from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from profpipe.exceptions import InvalidInputError, ShapeMismatchError
from profpipe.features import (
    ClipClassifier,
    EncoderFactory,
    FrameStack,
    encode_clip,
    preprocess_frames,
    resized_shape,
    sample_frames_interpolated,
    sample_frames_uniform,
    temporal_mean_pool,
    uniform_indices,
)
from profpipe.models import EncoderArchitecture, EncoderConfig


def _ramp(t_src: int, size: int = 2) -> torch.Tensor:
    # frame i is filled with the value i
    return torch.arange(t_src, dtype=torch.float32).reshape(t_src, 1, 1, 1).expand(t_src, size, size, 3).clone()


def _values(stack: FrameStack):
    return stack.frames[:, 0, 0, 0].tolist()


def test_interpolated_sampling_hits_integral_positions_exactly():
    assert _values(sample_frames_interpolated(_ramp(5), 3)) == [0.0, 2.0, 4.0]
    assert _values(sample_frames_interpolated(_ramp(5), 5)) == [0.0, 1.0, 2.0, 3.0, 4.0]


def test_interpolated_sampling_blends_neighbouring_frames():
    assert _values(sample_frames_interpolated(_ramp(5), 9)) == [i * 0.5 for i in range(9)]
    assert _values(sample_frames_interpolated(_ramp(3), 2)) == [0.0, 2.0]


def test_interpolated_sampling_of_a_single_frame_takes_the_midpoint():
    assert _values(sample_frames_interpolated(_ramp(5), 1)) == [2.0]
    assert _values(sample_frames_interpolated(_ramp(4), 1)) == [1.5]


def test_interpolated_sampling_accepts_numpy_streams():
    stack = sample_frames_interpolated(_ramp(4).numpy(), 8)

    assert stack.num_frames == 8
    assert stack.frames.dtype == torch.float32


def test_interpolated_sampling_rejects_empty_stream():
    with pytest.raises(InvalidInputError):
        sample_frames_interpolated(torch.zeros(0, 2, 2, 3), 4)


def test_uniform_indices():
    assert uniform_indices(10, 4) == [0, 2, 5, 7]
    assert uniform_indices(16, 16) == list(range(16))


def test_uniform_sampling_needs_enough_frames():
    assert _values(sample_frames_uniform(_ramp(32), 4)) == [0.0, 8.0, 16.0, 24.0]

    with pytest.raises(InvalidInputError):
        sample_frames_uniform(_ramp(3), 4)


def test_resized_shape_keeps_aspect_ratio_on_shorter_side():
    assert resized_shape(16, 20, 12) == (12, 15)
    assert resized_shape(20, 16, 12) == (15, 12)
    assert resized_shape(12, 12, 12) == (12, 12)


def test_preprocess_crops_and_normalizes():
    stack = FrameStack(torch.full((3, 16, 20, 3), 0.5))

    out = preprocess_frames(stack, 12, mean=(0.5, 0.25, 0.0), std=(1.0, 0.25, 0.5))

    assert out.frames.shape == (3, 12, 12, 3)
    torch.testing.assert_close(out.frames[..., 0], torch.zeros(3, 12, 12))
    torch.testing.assert_close(out.frames[..., 1], torch.ones(3, 12, 12))
    torch.testing.assert_close(out.frames[..., 2], torch.ones(3, 12, 12))


def test_preprocess_takes_the_centre_crop_without_resizing():
    frames = torch.zeros(1, 12, 16, 3)
    frames[0, :, 2:14, :] = 1.0

    out = preprocess_frames(FrameStack(frames), 12, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))

    torch.testing.assert_close(out.frames, torch.ones(1, 12, 12, 3))


def test_frame_stack_requires_rgb_frames():
    with pytest.raises(ShapeMismatchError):
        FrameStack(torch.zeros(4, 8, 8))


def test_temporal_mean_pool():
    rows = torch.tensor([[1.0, 2.0], [3.0, 6.0]])

    torch.testing.assert_close(temporal_mean_pool(rows), torch.tensor([2.0, 4.0]))

    with pytest.raises(InvalidInputError):
        temporal_mean_pool(torch.zeros(0, 4))


def test_temporal_mean_pool_ignores_row_order():
    generator = torch.Generator().manual_seed(0)
    for _ in range(20):
        rows = torch.randn(7, 5, generator=generator, dtype=torch.float64)
        permuted = rows[torch.randperm(7, generator=generator)]

        torch.testing.assert_close(temporal_mean_pool(permuted), temporal_mean_pool(rows), rtol=0, atol=1e-12)


def test_frame_mlp_pooled_features_ignore_frame_order():
    config = EncoderConfig(feature_dim=8, hidden_dim=16, crop_size=4, architecture=EncoderArchitecture.FrameMlp)
    encoder = EncoderFactory.get(config)
    generator = torch.Generator().manual_seed(1)
    frames = torch.rand(6, 4, 4, 3, generator=generator)
    shuffled = frames[torch.randperm(6, generator=generator)]

    pooled = encode_clip(FrameStack(frames), encoder).pooled

    torch.testing.assert_close(encode_clip(FrameStack(shuffled), encoder).pooled, pooled, rtol=0, atol=1e-6)


@pytest.mark.parametrize("height,width", [(20, 30), (30, 20), (12, 12), (17, 40)])
def test_resize_and_crop_is_idempotent(height, width):
    identity = dict(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
    stack = FrameStack(torch.rand(3, height, width, 3, generator=torch.Generator().manual_seed(height * width)))

    once = preprocess_frames(stack, 12, **identity)
    twice = preprocess_frames(once, 12, **identity)

    assert once.frames.shape == (3, 12, 12, 3)
    torch.testing.assert_close(twice.frames, once.frames, rtol=0, atol=0)


@pytest.mark.parametrize("architecture", list(EncoderArchitecture))
def test_encoder_factory_is_seeded(architecture):
    config = EncoderConfig(feature_dim=8, hidden_dim=16, crop_size=4, max_frames=8, architecture=architecture, seed=3)

    first, second = EncoderFactory.get(config), EncoderFactory.get(config)

    for a, b in zip(first.parameters(), second.parameters()):
        torch.testing.assert_close(a, b)


@pytest.mark.parametrize("architecture", list(EncoderArchitecture))
def test_encode_clip_returns_per_frame_and_pooled_features(architecture):
    config = EncoderConfig(feature_dim=8, hidden_dim=16, crop_size=4, max_frames=8, architecture=architecture)
    encoder = EncoderFactory.get(config)

    features = encode_clip(FrameStack(torch.rand(6, 4, 4, 3)), encoder)

    assert features.F.shape == (6, 8)
    assert features.pooled.shape == (8,)
    torch.testing.assert_close(features.pooled, features.F.mean(dim=0))


def test_transformer_rejects_more_frames_than_positions():
    config = EncoderConfig(
        feature_dim=8, crop_size=4, max_frames=4, architecture=EncoderArchitecture.TinyTemporalTransformer
    )

    with pytest.raises(ShapeMismatchError):
        EncoderFactory.get(config)(torch.rand(5, 4, 4, 3))


def test_encoder_rejects_wrong_crop_size():
    encoder = EncoderFactory.get(EncoderConfig(feature_dim=8, crop_size=4))

    with pytest.raises(ShapeMismatchError):
        encode_clip(FrameStack(torch.rand(2, 6, 6, 3)), encoder)


def test_clip_classifier_outputs_one_logit_per_class():
    model = ClipClassifier(EncoderConfig(feature_dim=8, hidden_dim=16, crop_size=4), num_classes=4)

    logits = model(torch.rand(3, 5, 4, 4, 3))

    assert logits.shape == (3, 4)
    assert np.isfinite(logits.detach().numpy()).all()
    torch.testing.assert_close(model.head.bias.detach(), torch.zeros(4))


def test_interpolated_midpoint_is_the_mean_of_its_sources():
    stream = torch.stack([torch.zeros(2, 2, 3), torch.full((2, 2, 3), 0.5)])

    assert _values(sample_frames_interpolated(stream, 3)) == [0.0, 0.25, 0.5]


def test_interpolated_sampling_matches_a_scalar_reference():
    rng = np.random.default_rng(0)
    stream = rng.random((5, 3, 3, 3))

    stack = sample_frames_interpolated(stream, 8)

    positions = [k * 4 / 7 for k in range(8)]
    expected = np.stack(
        [[np.interp(x, np.arange(5), stream[:, i, j, c]) for x in positions] for i, j, c in np.ndindex(3, 3, 3)]
    )
    np.testing.assert_allclose(stack.frames.numpy().reshape(8, -1).T, expected, rtol=0, atol=1e-12)


def test_uniform_indices_are_floor_of_scaled_positions():
    assert uniform_indices(32, 16) == list(range(0, 32, 2))
    assert uniform_indices(20, 16) == [(i * 20) // 16 for i in range(16)]


def test_preprocess_rectangular_input_crops_the_centre_columns():
    frames = torch.arange(80, dtype=torch.float32).reshape(1, 1, 80, 1).expand(1, 64, 80, 3).contiguous()

    out = preprocess_frames(FrameStack(frames), 56, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))

    resized = F.interpolate(frames.permute(0, 3, 1, 2), size=(56, 70), mode="bilinear", align_corners=False)
    torch.testing.assert_close(out.frames, resized.permute(0, 2, 3, 1)[:, :, 7:63, :])


def test_identical_frames_give_identical_feature_rows():
    encoder = EncoderFactory.get(EncoderConfig(feature_dim=8, hidden_dim=16, crop_size=4))
    frames = torch.rand(1, 4, 4, 3).expand(5, 4, 4, 3)

    per_frame = encode_clip(FrameStack(frames), encoder).F

    torch.testing.assert_close(per_frame, per_frame[:1].expand(5, 8))


def test_different_encoder_seeds_give_different_features():
    frames = FrameStack(torch.rand(3, 4, 4, 3))
    first = EncoderFactory.get(EncoderConfig(feature_dim=8, crop_size=4, seed=1))
    second = EncoderFactory.get(EncoderConfig(feature_dim=8, crop_size=4, seed=2))

    assert not torch.equal(encode_clip(frames, first).F, encode_clip(frames, second).F)


@pytest.mark.parametrize("architecture", list(EncoderArchitecture))
def test_encoders_built_in_threads_match_serial_construction(architecture):
    configs = [
        EncoderConfig(feature_dim=8, hidden_dim=16, crop_size=4, max_frames=8, architecture=architecture, seed=s)
        for s in range(20)
    ]
    serial = [EncoderFactory.get(c) for c in configs]

    with ThreadPoolExecutor(max_workers=8) as executor:
        threaded = list(executor.map(EncoderFactory.get, configs * 3))

    for index, encoder in enumerate(threaded):
        for a, b in zip(encoder.parameters(), serial[index % len(configs)].parameters()):
            torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_encoder_construction_leaves_the_global_rng_alone():
    state = torch.random.get_rng_state()

    EncoderFactory.get(EncoderConfig(feature_dim=8, hidden_dim=16, crop_size=4, seed=9))

    assert torch.equal(torch.random.get_rng_state(), state)
