import json
import logging
import os
from collections import Counter, OrderedDict
from concurrent.futures import ThreadPoolExecutor
from time import time as ts
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import torch

from . import utils
from .checkpoint import load_state, read_checkpoint, save_checkpoint
from .config import config
from .dataset import MultiViewClip, load_clips
from .exceptions import EmptyCellError, MissingCheckpointError
from .features import ClipClassifier, StreamLike, prepare_stream
from .models import (
    NUM_PROFICIENCY_LEVELS,
    VIEWS,
    DatasetManifest,
    EncoderConfig,
    LossCurves,
    Proficiency,
    Scenario,
    TrainConfig,
    View,
)
from .probe import ProbeTarget, build_view_dataset, classifier_loss
from .training import average_curves, train_model, write_loss_curves_csv

logger = logging.getLogger(__name__)

CellKey = Tuple[Scenario, View]

ALL_CELLS: Tuple[CellKey, ...] = tuple((s, v) for s in Scenario for v in VIEWS)


def cell_name(scenario: Scenario, view: View) -> str:
    return f"s{int(scenario)}_v{view.value}"


def cell_file_name(scenario: Scenario, view: View) -> str:
    return f"{cell_name(scenario, view)}.ckpt"


class ViewClassifier(ClipClassifier):
    """Proficiency classifier specialised to one (scenario, view) cell, with its own encoder."""

    def __init__(self, encoder_config: EncoderConfig, scenario: Scenario, view: View):
        super().__init__(encoder_config, NUM_PROFICIENCY_LEVELS)
        self.scenario = Scenario(scenario)
        self.view = View(view)


class ClassifierBank:
    def __init__(self, registry: Optional[Dict[CellKey, ClipClassifier]] = None):
        self._registry: "OrderedDict[CellKey, ClipClassifier]" = OrderedDict()
        self.curves: Dict[CellKey, LossCurves] = {}

        for key, classifier in (registry or {}).items():
            self.register(key[0], key[1], classifier)

    def register(self, scenario: Scenario, view: View, classifier: ClipClassifier):
        if classifier.num_classes != NUM_PROFICIENCY_LEVELS:
            raise ValueError(f"Cell classifiers must output {NUM_PROFICIENCY_LEVELS} logits")

        self._registry[(Scenario(scenario), View(view))] = classifier

    def __getitem__(self, key: CellKey) -> ClipClassifier:
        return self._registry[key]

    def __contains__(self, key: CellKey) -> bool:
        return key in self._registry

    def __len__(self):
        return len(self._registry)

    def __iter__(self) -> Iterator[CellKey]:
        return iter(self._registry)

    def items(self):
        return self._registry.items()

    @property
    def is_complete(self) -> bool:
        return len(self._registry) == len(ALL_CELLS) and all(k in self._registry for k in ALL_CELLS)

    def missing_cells(self) -> List[CellKey]:
        return [k for k in ALL_CELLS if k not in self._registry]

    def mean_curves(self) -> LossCurves:
        return average_curves([self.curves[k] for k in ALL_CELLS if k in self.curves])


def cell_encoder_config(encoder_config: EncoderConfig, seed: int, scenario: Scenario, view: View) -> EncoderConfig:
    return encoder_config.copy(update={"seed": utils.derive_seed(seed, "cell", cell_name(scenario, view))})


def cell_train_config(train_config: TrainConfig, scenario: Scenario, view: View) -> TrainConfig:
    return train_config.copy(update={"seed": utils.derive_seed(train_config.seed, "cell", cell_name(scenario, view))})


def _warn_missing_classes(scenario: Scenario, view: View, clips: Sequence[MultiViewClip]):
    counts = Counter(c.proficiency for c in clips)
    missing = [p.name for p in Proficiency if not counts.get(p)]
    if missing:
        logger.warning("Cell %s has no training clips for: %s", cell_name(scenario, view), ", ".join(missing))


def train_bank_cell(
    scenario: Scenario,
    view: View,
    train_clips: Sequence[MultiViewClip],
    val_clips: Sequence[MultiViewClip],
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
) -> Tuple[ViewClassifier, LossCurves]:
    """Trains the (scenario, view) classifier on view `view` of clips whose ground-truth scenario is `scenario`."""
    train_clips = [c for c in train_clips if c.scenario == scenario]
    val_clips = [c for c in val_clips if c.scenario == scenario]

    if not train_clips:
        raise EmptyCellError(scenario.name, view.value)

    if len(train_clips) < NUM_PROFICIENCY_LEVELS:
        logger.warning("Cell %s has only %d training clips", cell_name(scenario, view), len(train_clips))
    _warn_missing_classes(scenario, view, train_clips)

    cell_config = cell_encoder_config(encoder_config, train_config.seed, scenario, view)
    model = ViewClassifier(cell_config, scenario, view)

    train_data = build_view_dataset(train_clips, [view], ProbeTarget.Proficiency, encoder_config)
    val_data = build_view_dataset(val_clips, [view], ProbeTarget.Proficiency, encoder_config)

    model, curves = train_model(
        model,
        train_data,
        val_data,
        cell_train_config(train_config, scenario, view),
        classifier_loss,
        name=f"cell {cell_name(scenario, view)}",
    )

    return model, curves


def train_classifier_bank(
    train_manifest: DatasetManifest,
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    val_manifest: Optional[DatasetManifest] = None,
    workers: int = 1,
) -> ClassifierBank:
    """
    Trains the complete 6 x 5 bank. Clips are loaded one scenario at a time; cells never share parameters.
    """
    for scenario in Scenario:
        if not train_manifest.by_scenario(scenario):
            raise EmptyCellError(scenario.name, VIEWS[0].value)

    logger.info("Training classifier bank: %d cells on %d clips", len(ALL_CELLS), len(train_manifest))

    s = ts()
    bank = ClassifierBank()

    for scenario in Scenario:
        train_clips = load_clips(train_manifest, train_manifest.by_scenario(scenario))
        val_clips = load_clips(val_manifest, val_manifest.by_scenario(scenario)) if val_manifest else []

        def _train(view: View):
            return train_bank_cell(scenario, view, train_clips, val_clips, encoder_config, train_config)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                results = list(executor.map(_train, VIEWS))
        else:
            results = [_train(v) for v in VIEWS]

        for view, (model, curves) in zip(VIEWS, results):
            bank.register(scenario, view, model)
            bank.curves[(scenario, view)] = curves

    logger.info("Trained classifier bank in %.3fs", ts() - s)

    return bank


def retrain_cell(
    bank: ClassifierBank,
    scenario: Scenario,
    view: View,
    train_clips: Sequence[MultiViewClip],
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    val_clips: Sequence[MultiViewClip] = (),
) -> ViewClassifier:
    model, curves = train_bank_cell(scenario, view, train_clips, val_clips, encoder_config, train_config)
    bank.register(scenario, view, model)
    bank.curves[(scenario, view)] = curves

    return model


def classify_frames(classifier: ClipClassifier, frames: torch.Tensor) -> torch.Tensor:
    classifier.eval()
    with torch.no_grad():
        return classifier(frames[None])[0]


def classify_view(bank: ClassifierBank, scenario: Scenario, view: View, stream: StreamLike) -> torch.Tensor:
    """Routes `stream` to exactly bank[(scenario, view)] and returns its 4 logits."""
    key = (Scenario(scenario), View(view))
    assert key in bank, f"bank has no cell {cell_name(*key)}"

    classifier = bank[key]
    frames = prepare_stream(stream, config.method2_frames, classifier.encoder_config, interpolate=False)

    return classify_frames(classifier, frames)


def train_pooled_classifier(
    train_manifest: DatasetManifest,
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    val_manifest: Optional[DatasetManifest] = None,
) -> ClassifierBank:
    """
    Baseline: one proficiency classifier trained on every view of every scenario, registered under all 30 keys.
    """
    train_clips = load_clips(train_manifest)
    val_clips = load_clips(val_manifest) if val_manifest else []

    pooled_config = encoder_config.copy(update={"seed": utils.derive_seed(train_config.seed, "pooled")})
    model = ClipClassifier(pooled_config, NUM_PROFICIENCY_LEVELS)

    train_data = build_view_dataset(train_clips, VIEWS, ProbeTarget.Proficiency, encoder_config)
    val_data = build_view_dataset(val_clips, VIEWS, ProbeTarget.Proficiency, encoder_config)
    model, curves = train_model(model, train_data, val_data, train_config, classifier_loss, name="pooled classifier")

    bank = ClassifierBank({key: model for key in ALL_CELLS})
    bank.curves = {key: curves for key in ALL_CELLS}

    return bank


def _cell_metadata(classifier: ClipClassifier, scenario: Scenario, view: View) -> dict:
    return {
        "kind": "view-classifier",
        "scenario": int(scenario),
        "view": view.value,
        "encoder": json.loads(classifier.encoder_config.json()),
    }


def save_cell(bank: ClassifierBank, scenario: Scenario, view: View, directory: str) -> str:
    file_name = cell_file_name(scenario, view)
    classifier = bank[(scenario, view)]
    save_checkpoint(os.path.join(directory, file_name), classifier, _cell_metadata(classifier, scenario, view))

    curves = bank.curves.get((scenario, view))
    if curves is not None:
        write_loss_curves_csv(curves, os.path.join(directory, "curves", f"{cell_name(scenario, view)}.csv"))

    return file_name


def save_bank(bank: ClassifierBank, directory: str):
    """One `s{scenario}_v{view}.ckpt` per cell plus `index.json`."""
    if not bank.is_complete:
        missing = ", ".join(cell_name(*k) for k in bank.missing_cells())
        raise ValueError(f"Refusing to save an incomplete bank; missing cells: {missing}")

    utils.ensure_directory(directory)

    cells = []
    for scenario, view in ALL_CELLS:
        file_name = save_cell(bank, scenario, view, directory)
        cells.append({"scenario": int(scenario), "view": view.value, "file": file_name})

    utils.write_text(os.path.join(directory, config.bank_index_file_name), utils.dump_json({"cells": cells}))

    logger.info("Saved classifier bank to %s", directory)


def load_bank(directory: str) -> ClassifierBank:
    index_path = os.path.join(directory, config.bank_index_file_name)
    if not os.path.isfile(index_path):
        raise MissingCheckpointError(index_path)

    with open(index_path) as f:
        index = json.load(f)

    bank = ClassifierBank()
    for cell in index["cells"]:
        path = os.path.join(directory, cell["file"])
        metadata, state = read_checkpoint(path)

        scenario, view = Scenario(cell["scenario"]), View(cell["view"])
        classifier = ViewClassifier(EncoderConfig.parse_obj(metadata["encoder"]), scenario, view)
        bank.register(scenario, view, load_state(path, classifier, state))

    if not bank.is_complete:
        missing = ", ".join(cell_name(*k) for k in bank.missing_cells())
        raise MissingCheckpointError(f"{index_path} (missing cells: {missing})")

    logger.info("Loaded classifier bank from %s", directory)

    return bank
