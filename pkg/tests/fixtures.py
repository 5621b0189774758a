import os.path

import numpy as np
import pytest

from profpipe.dataset import MultiViewClip, generate_dataset, split_dataset, write_split
from profpipe.models import VIEWS, DatasetSpec, EncoderConfig, Proficiency, Scenario, TrainConfig


@pytest.fixture(autouse=True)
def user_data_directory(tmp_path, mocker):
    data_dir = os.path.join(tmp_path, "data")

    m = mocker.patch("profpipe.utils.get_data_directory")
    m.return_value = data_dir

    yield data_dir


@pytest.fixture(autouse=True)
def no_env_output_root(monkeypatch):
    monkeypatch.delenv("PROFPIPE_OUT", raising=False)


@pytest.fixture
def tiny_encoder_config() -> EncoderConfig:
    return EncoderConfig(feature_dim=8, hidden_dim=16, crop_size=12, seed=5)


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    return TrainConfig(learning_rate=1e-3, epochs=2, batch_size=4, seed=7)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """48 clips of 16 frames at 16 x 16, split 36 / 12; shared read-only by the whole session."""
    directory = str(tmp_path_factory.mktemp("tiny-dataset"))
    spec = DatasetSpec(clips_per_scenario=8, frames_per_stream=16, frame_size=(16, 16), seed=3)

    manifest = generate_dataset(spec, directory)
    train, val = split_dataset(manifest, 0.25, seed=3)
    write_split(train, val, directory)

    return directory, manifest, train, val


def make_clip(
    sample_id: str = "clip-0000",
    scenario: Scenario = Scenario.Dance,
    proficiency: Proficiency = Proficiency.Novice,
    frames: int = 16,
    size=(16, 16),
    seed: int = 0,
) -> MultiViewClip:
    rng = np.random.default_rng(seed)
    streams = {v: rng.random((frames, size[0], size[1], 3), dtype=np.float32) for v in VIEWS}

    return MultiViewClip(sample_id, scenario, proficiency, streams)


@pytest.fixture
def clip_factory():
    return make_clip
