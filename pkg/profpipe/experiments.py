"""
Designed synthetic experiments: each generates its own dataset, trains, evaluates and returns a result model.
"""
import logging
import math
import os
from time import time as ts
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field
from scipy.stats import spearmanr

from .bank import ClassifierBank, train_classifier_bank, train_pooled_classifier
from .dataset import generate_dataset, load_clips, split_dataset
from .evaluation import EvalReport, per_scenario_report
from .fusion import predict_two_stage_records
from .models import (
    AggregationStrategy,
    BaseModel,
    DatasetManifest,
    DatasetSpec,
    EncoderConfig,
    ProficiencyCoding,
    RecognizerConfig,
    RecognizerMode,
    Scenario,
    TrainConfig,
    View,
    default_confusion,
)
from .multitask import MultiTaskModel, build_multitask_dataset, make_multitask_loss_fn
from .recognizer import ScenarioRecognizerFactory
from .training import evaluate_loss, train_model

logger = logging.getLogger(__name__)

COMBINED = AggregationStrategy.Combined.short_name


class ExperimentSettings(BaseModel):
    """Desk-scale defaults shared by every experiment."""

    clips_per_scenario: int = 40
    frames_per_stream: int = 16
    frame_size: Tuple[int, int] = (32, 32)
    crop_size: int = 28
    feature_dim: int = 32
    hidden_dim: int = 64
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 8
    val_fraction: float = 0.25
    seed: int = 0

    def dataset_spec(self, **overrides) -> DatasetSpec:
        values = dict(
            clips_per_scenario=self.clips_per_scenario,
            frames_per_stream=self.frames_per_stream,
            frame_size=self.frame_size,
            seed=self.seed,
        )
        values.update(overrides)
        return DatasetSpec(**values)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            feature_dim=self.feature_dim, hidden_dim=self.hidden_dim, crop_size=self.crop_size, seed=self.seed
        )

    def train_config(self, **overrides) -> TrainConfig:
        values = dict(
            learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed
        )
        values.update(overrides)
        return TrainConfig(**values)


def binomial_interval(p: float, n: int, z: float = 1.96) -> Tuple[float, float]:
    half_width = z * math.sqrt(p * (1.0 - p) / n)
    return p - half_width, p + half_width


def spearman_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y) or len(x) < 2:
        raise ValueError(f"Spearman correlation needs two equal-length sequences of >= 2 values: {len(x)}, {len(y)}")

    # A constant sequence has no ranking to correlate with
    if np.ptp(np.asarray(x, dtype=np.float64)) == 0.0 or np.ptp(np.asarray(y, dtype=np.float64)) == 0.0:
        return 0.0

    correlation, _ = spearmanr(x, y)
    return float(correlation)


def _prepare_data(spec: DatasetSpec, settings: ExperimentSettings, directory: str):
    manifest = generate_dataset(spec, directory)
    return split_dataset(manifest, settings.val_fraction, settings.seed)


def _evaluate_bank(
    bank: ClassifierBank, val: DatasetManifest, recognizer_config: Optional[RecognizerConfig] = None
) -> EvalReport:
    recognizer = ScenarioRecognizerFactory.get(recognizer_config or RecognizerConfig(seed=0))
    return per_scenario_report(predict_two_stage_records(bank, recognizer, load_clips(val)))


def _train_and_evaluate_bank(
    spec: DatasetSpec, settings: ExperimentSettings, directory: str
) -> Tuple[ClassifierBank, DatasetManifest, EvalReport]:
    train, val = _prepare_data(spec, settings, directory)
    bank = train_classifier_bank(train, settings.encoder_config(), settings.train_config(), val)

    return bank, val, _evaluate_bank(bank, val)


class LearnabilityResult(BaseModel):
    signal_accuracy: float
    null_accuracy: float
    null_interval: Tuple[float, float]
    num_val: int

    @property
    def null_within_chance(self) -> bool:
        return self.null_interval[0] <= self.null_accuracy <= self.null_interval[1]


def run_learnability(settings: ExperimentSettings, output_directory: str) -> LearnabilityResult:
    """Method 2, oracle routing, combined strategy: full signal against no proficiency signal."""
    _, _, signal_report = _train_and_evaluate_bank(
        settings.dataset_spec(signal_strength=1.0), settings, os.path.join(output_directory, "signal")
    )
    _, _, null_report = _train_and_evaluate_bank(
        settings.dataset_spec(signal_strength=0.0), settings, os.path.join(output_directory, "null")
    )

    result = LearnabilityResult(
        signal_accuracy=signal_report.overall(COMBINED),
        null_accuracy=null_report.overall(COMBINED),
        null_interval=binomial_interval(0.25, null_report.total),
        num_val=null_report.total,
    )
    logger.info(
        "Learnability: signal=%.3f, null=%.3f (chance interval %.3f-%.3f)",
        result.signal_accuracy,
        result.null_accuracy,
        *result.null_interval,
    )

    return result


EGO_DOMINANT = Scenario.Cooking
EXO_DOMINANT = Scenario.Basketball


def view_pattern_visibility(weak: float = 0.05) -> Dict[str, Dict[str, float]]:
    exo_weak = {v.value: weak for v in View if not v.is_ego}
    exo_strong = {v.value: 1.0 for v in View if not v.is_ego}

    return {
        EGO_DOMINANT.name: {View.Ego.value: 1.0, **exo_weak},
        EXO_DOMINANT.name: {View.Ego.value: weak, **exo_strong},
    }


class ViewPatternResult(BaseModel):
    ego_dominant: Scenario
    exo_dominant: Scenario
    accuracy: Dict[str, Dict[Scenario, Optional[float]]]

    def margin(self, scenario: Scenario) -> float:
        """ego-only minus exo-average accuracy for `scenario`."""
        return self.accuracy["ego"][scenario] - self.accuracy["exo"][scenario]


def run_view_pattern(settings: ExperimentSettings, output_directory: str) -> ViewPatternResult:
    spec = settings.dataset_spec(view_visibility=view_pattern_visibility())
    _, _, report = _train_and_evaluate_bank(spec, settings, os.path.join(output_directory, "data"))

    result = ViewPatternResult(
        ego_dominant=EGO_DOMINANT,
        exo_dominant=EXO_DOMINANT,
        accuracy={c: dict(report.per_column[c].per_scenario) for c in report.columns},
    )
    logger.info(
        "View pattern: ego - exo margin %+.3f on %s, %+.3f on %s",
        result.margin(EGO_DOMINANT),
        EGO_DOMINANT.name,
        result.margin(EXO_DOMINANT),
        EXO_DOMINANT.name,
    )

    return result


DEFAULT_DIAGONALS = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)


class ConditioningResult(BaseModel):
    bank_accuracy: float
    pooled_accuracy: float
    diagonals: List[float]
    sweep_accuracy: List[float]
    spearman: float

    @property
    def advantage(self) -> float:
        return self.bank_accuracy - self.pooled_accuracy


def run_conditioning(
    settings: ExperimentSettings, output_directory: str, diagonals: Sequence[float] = DEFAULT_DIAGONALS
) -> ConditioningResult:
    """
    30-cell bank against one pooled classifier on scenario-specific proficiency coding, then a noisy-oracle sweep.
    """
    spec = settings.dataset_spec(proficiency_coding=ProficiencyCoding.ScenarioSpecific)
    train, val = _prepare_data(spec, settings, os.path.join(output_directory, "data"))

    bank = train_classifier_bank(train, settings.encoder_config(), settings.train_config(), val)
    pooled = train_pooled_classifier(train, settings.encoder_config(), settings.train_config(), val)

    bank_accuracy = _evaluate_bank(bank, val).overall(COMBINED)
    pooled_accuracy = _evaluate_bank(pooled, val).overall(COMBINED)

    sweep = []
    for diagonal in diagonals:
        recognizer_config = RecognizerConfig(
            mode=RecognizerMode.NoisyOracle, confusion=default_confusion(diagonal), seed=settings.seed
        )
        sweep.append(_evaluate_bank(bank, val, recognizer_config).overall(COMBINED))
        logger.info("Noisy recognizer diagonal %.2f: combined accuracy %.3f", diagonal, sweep[-1])

    return ConditioningResult(
        bank_accuracy=bank_accuracy,
        pooled_accuracy=pooled_accuracy,
        diagonals=list(diagonals),
        sweep_accuracy=sweep,
        spearman=spearman_correlation(diagonals, sweep),
    )


class ConvergenceResult(BaseModel):
    initial_prof: float
    initial_scen: float
    prof_epoch: Optional[int] = None
    scen_epoch: Optional[int] = None
    train_prof: List[float] = Field(default_factory=list)
    train_scen: List[float] = Field(default_factory=list)

    @property
    def scenario_converges_first(self) -> bool:
        return self.scen_epoch is not None and (self.prof_epoch is None or self.scen_epoch < self.prof_epoch)


def first_epoch_below(values: Sequence[float], threshold: float) -> Optional[int]:
    return next((epoch for epoch, value in enumerate(values, start=1) if value < threshold), None)


def run_convergence(
    settings: ExperimentSettings, output_directory: str, scenario_strength: float = 3.0
) -> ConvergenceResult:
    """Method 1 with a scenario signal stronger than the proficiency signal; compares sub-loss half-life epochs."""
    spec = settings.dataset_spec(scenario_strength=scenario_strength, signal_strength=1.0)
    train, val = _prepare_data(spec, settings, os.path.join(output_directory, "data"))

    encoder_config = settings.encoder_config()
    train_config = settings.train_config()
    train_data = build_multitask_dataset(load_clips(train), encoder_config)
    val_data = build_multitask_dataset(load_clips(val), encoder_config)
    loss_fn = make_multitask_loss_fn(train_config.alpha)

    model = MultiTaskModel(encoder_config)
    _, initial_prof, initial_scen = evaluate_loss(model, train_data, loss_fn, train_config.batch_size).means()

    _, curves = train_model(model, train_data, val_data, train_config, loss_fn, name="convergence multi-task model")
    train_prof, train_scen = curves.column("train_prof"), curves.column("train_scen")

    result = ConvergenceResult(
        initial_prof=initial_prof,
        initial_scen=initial_scen,
        prof_epoch=first_epoch_below(train_prof, initial_prof / 2.0),
        scen_epoch=first_epoch_below(train_scen, initial_scen / 2.0),
        train_prof=train_prof,
        train_scen=train_scen,
    )
    logger.info("Half-loss epoch: scenario=%s, proficiency=%s", result.scen_epoch, result.prof_epoch)

    return result


EXPERIMENTS = {
    "learnability": run_learnability,
    "view-pattern": run_view_pattern,
    "conditioning": run_conditioning,
    "convergence": run_convergence,
}


def run_experiment(name: str, settings: ExperimentSettings, output_directory: str) -> BaseModel:
    if name not in EXPERIMENTS:
        raise ValueError(f"Unknown experiment: {name}. Available: {', '.join(EXPERIMENTS)}")

    logger.info("Running experiment %s", name)

    s = ts()
    result = EXPERIMENTS[name](settings, os.path.join(output_directory, name))
    logger.info("Experiment %s finished in %.3fs", name, ts() - s)

    return result
