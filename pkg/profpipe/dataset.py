import json
import logging
import math
import os
from collections import Counter, OrderedDict
from concurrent.futures import ThreadPoolExecutor
from time import time as ts
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from sklearn.utils import resample

from . import utils
from .config import config
from .container import read_container, write_container
from .exceptions import CorruptContainerError, MissingFileError, StratumTooSmallError, ViewCountError
from .models import (
    NUM_PROFICIENCY_LEVELS,
    VIEWS,
    DatasetManifest,
    DatasetSpec,
    ManifestEntry,
    Proficiency,
    ProficiencyCoding,
    Scenario,
    Split,
    View,
)

logger = logging.getLogger(__name__)

# Per-scenario RGB bias directions, shared by every view of a clip
SCENARIO_PALETTE: Dict[Scenario, Tuple[float, float, float]] = {
    Scenario.Dance: (1.0, -0.5, -0.5),
    Scenario.RockClimbing: (-0.5, 1.0, -0.5),
    Scenario.Basketball: (-0.5, -0.5, 1.0),
    Scenario.Music: (0.7, 0.7, -1.0),
    Scenario.Cooking: (-1.0, 0.7, 0.7),
    Scenario.Soccer: (0.7, -1.0, 0.7),
}

PROFICIENCY_GAINS = (0.25, 0.5, 0.75, 1.0)

_BASE_LEVEL = 0.5
_SCENARIO_BIAS_SCALE = 0.15
_SCENARIO_TEXTURE_SCALE = 0.08
_PATTERN_SCALE = 0.3
_PATTERN_CYCLES = 2.0


class MultiViewClip:
    def __init__(
        self, sample_id: str, scenario: Scenario, proficiency: Proficiency, streams: Mapping[View, np.ndarray]
    ):
        if len(streams) != len(VIEWS):
            raise ViewCountError(len(streams), len(VIEWS))

        missing = [v.value for v in VIEWS if v not in streams]
        if missing:
            raise ViewCountError(len(VIEWS) - len(missing), len(VIEWS))

        lengths = {streams[v].shape[0] for v in VIEWS}
        if len(lengths) != 1:
            raise ValueError(f"Clip {sample_id}: views disagree on frame count: {sorted(lengths)}")

        for v in VIEWS:
            if streams[v].ndim != 4 or streams[v].shape[-1] != 3:
                raise ValueError(f"Clip {sample_id}: view {v.value} must be T x H x W x 3, got {streams[v].shape}")

        self.sample_id = sample_id
        self.scenario = Scenario(scenario)
        self.proficiency = Proficiency(proficiency)
        self.streams: "OrderedDict[View, np.ndarray]" = OrderedDict((v, streams[v]) for v in VIEWS)

    @property
    def num_frames(self) -> int:
        return self.streams[View.Ego].shape[0]

    @property
    def frame_size(self) -> Tuple[int, int]:
        return self.streams[View.Ego].shape[1:3]

    def __eq__(self, other):
        if not isinstance(other, MultiViewClip):
            return NotImplemented

        return (
            self.sample_id == other.sample_id
            and self.scenario == other.scenario
            and self.proficiency == other.proficiency
            and all(np.array_equal(self.streams[v], other.streams[v]) for v in VIEWS)
        )

    def __repr__(self):
        return (
            f"MultiViewClip(sample_id={self.sample_id!r}, scenario={self.scenario.name}, "
            f"proficiency={self.proficiency.name}, frames={self.num_frames}, size={self.frame_size})"
        )


class ClipSynthesizer:
    """
    Renders the five streams of one clip from a DatasetSpec.

    Scenario is a global colour bias plus an oriented stripe texture shared by all views. Proficiency is the
    amplitude of a pulsing central blob, scaled per view by its visibility, plus a level-independent distractor
    amplitude and Gaussian pixel noise. All randomness is drawn from (spec.seed, sample_id).
    """

    def __init__(self, spec: DatasetSpec):
        self._spec = spec

        height, width = spec.frame_size
        yy, xx = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
        self._yy = yy / max(height - 1, 1)
        self._xx = xx / max(width - 1, 1)

        sigma = min(height, width) / 6.0
        cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
        self._blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))

        self._t = np.arange(spec.frames_per_stream, dtype=np.float64) / spec.frames_per_stream

    def scenario_background(self, scenario: Scenario) -> np.ndarray:
        strength = self._spec.scenario_strength
        palette = np.asarray(SCENARIO_PALETTE[scenario], dtype=np.float64)

        frequency = 2.0 + int(scenario)
        coordinate = self._xx if int(scenario) % 2 == 0 else self._yy
        texture = np.sin(2.0 * np.pi * frequency * coordinate)

        background = _BASE_LEVEL + _SCENARIO_BIAS_SCALE * strength * palette[None, None, :]
        return background + (_SCENARIO_TEXTURE_SCALE * strength * texture)[:, :, None]

    def proficiency_gain(self, scenario: Scenario, proficiency: Proficiency) -> float:
        level = int(proficiency)
        if self._spec.proficiency_coding == ProficiencyCoding.ScenarioSpecific:
            level = (level + int(scenario)) % NUM_PROFICIENCY_LEVELS

        return PROFICIENCY_GAINS[level]

    def render(self, sample_id: str, scenario: Scenario, proficiency: Proficiency) -> MultiViewClip:
        spec = self._spec
        rng = utils.rng_for(spec.seed, sample_id)

        background = self.scenario_background(scenario)
        gain = self.proficiency_gain(scenario, proficiency)

        streams = OrderedDict()
        for view in VIEWS:
            phase = rng.uniform(0.0, 2.0 * np.pi)
            distractor = rng.uniform(0.0, 1.0)
            amplitude = _PATTERN_SCALE * (
                spec.signal_strength * spec.visibility(scenario, view) * gain + spec.pattern_jitter * distractor
            )

            envelope = 0.5 + 0.5 * np.sin(2.0 * np.pi * _PATTERN_CYCLES * self._t + phase)
            pattern = amplitude * envelope[:, None, None] * self._blob[None, :, :]

            frames = background[None, :, :, :] + pattern[:, :, :, None]
            if spec.noise_std > 0:
                frames = frames + rng.normal(0.0, spec.noise_std, size=frames.shape)

            streams[view] = np.clip(frames, 0.0, 1.0).astype(np.float32)

        return MultiViewClip(sample_id, scenario, proficiency, streams)


def _clip_relative_path(sample_id: str) -> str:
    return os.path.join("clips", f"{sample_id}.clip")


def plan_entries(spec: DatasetSpec) -> List[ManifestEntry]:
    entries = []

    for scenario in Scenario:
        for index in range(spec.clips_per_scenario):
            sample_id = utils.make_sample_id(scenario.display_name, index)
            entries.append(
                ManifestEntry(
                    sample_id=sample_id,
                    scenario=scenario,
                    proficiency=Proficiency(index % NUM_PROFICIENCY_LEVELS),
                    path=_clip_relative_path(sample_id),
                )
            )

    return entries


def generate_dataset(spec: DatasetSpec, output_directory: str) -> DatasetManifest:
    """
    Renders and persists 6 x clips_per_scenario clips and writes `manifest.jsonl`.

    Proficiency classes are balanced within every scenario. The result is a pure function of `spec`.
    """
    logger.info("Generating %d clips into %s", spec.total_clips, output_directory)

    s = ts()

    utils.ensure_directory(output_directory)
    synthesizer = ClipSynthesizer(spec)
    entries = plan_entries(spec)

    def _render_and_save(entry: ManifestEntry):
        clip = synthesizer.render(entry.sample_id, entry.scenario, entry.proficiency)
        save_clip(clip, os.path.join(output_directory, entry.path))

    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as executor:
            list(executor.map(_render_and_save, entries))
    else:
        for entry in entries:
            _render_and_save(entry)

    manifest = DatasetManifest(entries=entries, root=output_directory)
    write_manifest(manifest, os.path.join(output_directory, config.manifest_file_name))

    logger.info("Generated %d clips in %.3fs", len(entries), ts() - s)

    return manifest


def split_dataset(
    manifest: DatasetManifest, val_fraction: float, seed: int
) -> Tuple[DatasetManifest, DatasetManifest]:
    """
    Stratified split by (scenario, proficiency).

    The validation size is round(n * val_fraction). It is drawn with scikit-learn's stratified resampling, which
    gives every stratum the floor or ceiling of its exact share, ties broken by the seeded generator. Unlike
    `train_test_split`, this also works when there are more strata than validation clips.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")

    if not manifest.entries:
        raise ValueError("Cannot split an empty manifest")

    strata = Counter((entry.scenario, entry.proficiency) for entry in manifest.entries)
    for (scenario, proficiency), size in sorted(strata.items()):
        if size < 2:
            raise StratumTooSmallError(scenario.name, proficiency.name, size)

    labels = [int(entry.scenario) * NUM_PROFICIENCY_LEVELS + int(entry.proficiency) for entry in manifest.entries]
    num_val = int(math.floor(len(manifest.entries) * val_fraction + 0.5))

    val_indices = set(
        resample(
            list(range(len(manifest.entries))),
            replace=False,
            n_samples=num_val,
            stratify=labels,
            random_state=utils.derive_seed(seed, "split") % 2**32,
        )
    )

    train_entries, val_entries = [], []
    for index, entry in enumerate(manifest.entries):
        if index in val_indices:
            val_entries.append(entry.copy(update={"split": Split.Val}))
        else:
            train_entries.append(entry.copy(update={"split": Split.Train}))

    logger.info("Split %d clips into %d train / %d val", len(manifest), len(train_entries), len(val_entries))

    return (
        DatasetManifest(entries=train_entries, split=Split.Train, root=manifest.root),
        DatasetManifest(entries=val_entries, split=Split.Val, root=manifest.root),
    )


def save_clip(clip: MultiViewClip, path: str):
    metadata = {
        "sample_id": clip.sample_id,
        "scenario": int(clip.scenario),
        "proficiency": int(clip.proficiency),
        "views": [v.value for v in clip.streams],
    }
    write_container(path, OrderedDict((v.value, s) for v, s in clip.streams.items()), metadata)


def load_clip(entry: ManifestEntry, root: str = ".") -> MultiViewClip:
    path = os.path.join(root, entry.path)
    metadata, arrays = read_container(path)

    if len(arrays) != len(VIEWS):
        raise ViewCountError(len(arrays), len(VIEWS))

    try:
        streams = {View(name): array for name, array in arrays.items()}
    except ValueError as e:
        raise CorruptContainerError(path, f"unknown view: {e}")

    if metadata.get("sample_id") != entry.sample_id:
        raise CorruptContainerError(path, f"holds {metadata.get('sample_id')!r}, manifest expects {entry.sample_id!r}")

    return MultiViewClip(entry.sample_id, entry.scenario, entry.proficiency, streams)


def write_manifest(manifest: DatasetManifest, path: str):
    lines = [entry.json() for entry in manifest.entries]
    utils.write_text(path, "".join(f"{line}\n" for line in lines))

    logger.debug("Wrote manifest with %d entries to %s", len(lines), path)


def read_manifest(path: str) -> DatasetManifest:
    if not os.path.isfile(path):
        raise MissingFileError(path, what="Manifest")

    entries = []
    with open(path) as f:
        for line in f:
            if line.strip():
                entries.append(ManifestEntry.parse_obj(json.loads(line)))

    splits = {e.split for e in entries}
    split = splits.pop() if len(splits) == 1 else None

    return DatasetManifest(entries=entries, split=split, root=os.path.dirname(os.path.abspath(path)))


def write_split(train: DatasetManifest, val: DatasetManifest, output_directory: str):
    write_manifest(train, os.path.join(output_directory, config.train_manifest_file_name))
    write_manifest(val, os.path.join(output_directory, config.val_manifest_file_name))


def load_split(data_directory: str) -> Tuple[DatasetManifest, DatasetManifest]:
    train = read_manifest(os.path.join(data_directory, config.train_manifest_file_name))
    val = read_manifest(os.path.join(data_directory, config.val_manifest_file_name))

    return train, val


def load_clips(manifest: DatasetManifest, entries: Optional[List[ManifestEntry]] = None) -> List[MultiViewClip]:
    return [load_clip(e, manifest.root) for e in (manifest.entries if entries is None else entries)]
