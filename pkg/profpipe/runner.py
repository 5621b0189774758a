import logging
import os
from time import time as ts
from typing import List, Optional, Sequence

from . import utils
from .bank import ClassifierBank, load_bank, save_bank, train_classifier_bank, train_pooled_classifier
from .config import config
from .context import RunContext
from .dataset import generate_dataset, load_clips, load_split, split_dataset, write_split
from .evaluation import compare_methods, emit_loss_curves, per_scenario_report, write_report
from .fusion import predict_two_stage_records, read_records, write_records
from .models import AggregationStrategy, DatasetManifest, PredictionRecord, RunConfig
from .multitask import METHOD_NAME, load_multitask, predict_multitask_record, save_multitask, train_multitask
from .recognizer import ProbeRecognizer, ScenarioRecognizer, ScenarioRecognizerFactory
from .training import read_loss_curves_csv

logger = logging.getLogger(__name__)


def predictions_file_name(method: str) -> str:
    return f"predictions-{method}.jsonl"


class Runner:
    """Runs one subcommand inside its RunContext."""

    def __init__(self, command: str, run_config: RunConfig):
        self._ctx = RunContext(command, run_config)
        self._config = run_config

    @property
    def context(self) -> RunContext:
        return self._ctx

    def _timed(self, fn, *args, **kwargs):
        with self._ctx:
            logger.info("Running %s in %s", self._ctx.command, self._ctx.output_directory)

            s = ts()
            result = fn(*args, **kwargs)
            logger.info("Command '%s' executed in %.3fs.", self._ctx.command, ts() - s)

        return result

    def generate_data(self, split: bool = True) -> DatasetManifest:
        return self._timed(self._generate_data, split)

    def _generate_data(self, split: bool) -> DatasetManifest:
        manifest = generate_dataset(self._config.dataset, self._ctx.output_directory)

        if split:
            train, val = split_dataset(manifest, self._config.val_fraction, self._config.dataset.seed)
            write_split(train, val, self._ctx.output_directory)

        return manifest

    def _load_split(self):
        return load_split(self._ctx.data_directory)

    def train_multitask(self):
        return self._timed(self._train_multitask)

    def _train_multitask(self):
        train, val = self._load_split()
        model, curves = train_multitask(
            load_clips(train),
            load_clips(val),
            self._config.encoder,
            self._config.train,
            self._config.view_fusion,
            curves_path=self._ctx.path("loss_curves.csv"),
        )

        save_multitask(model, self._ctx.get_multitask_checkpoint_path(), self._config.train)
        emit_loss_curves(curves, self._ctx.output_directory)

        return model

    def train_bank(self, pooled: bool = False) -> ClassifierBank:
        return self._timed(self._train_bank, pooled)

    def _train_bank(self, pooled: bool) -> ClassifierBank:
        train, val = self._load_split()

        if pooled:
            bank = train_pooled_classifier(train, self._config.encoder, self._config.train, val)
        else:
            bank = train_classifier_bank(
                train, self._config.encoder, self._config.train, val, workers=self._config.dataset.workers
            )

        save_bank(bank, self._ctx.get_bank_directory())
        emit_loss_curves(bank.mean_curves(), self._ctx.output_directory)

        return bank

    def evaluate(self, method: str = "m2", strategies: Optional[Sequence[AggregationStrategy]] = None):
        return self._timed(self._evaluate, method, strategies)

    def _build_recognizer(self, train: DatasetManifest, val: DatasetManifest) -> ScenarioRecognizer:
        recognizer = ScenarioRecognizerFactory.get(self._config.recognizer)

        if isinstance(recognizer, ProbeRecognizer):
            recognizer.fit(load_clips(train), self._config.encoder, self._config.train, load_clips(val))

        return recognizer

    def _predict(self, method: str, train: DatasetManifest, val: DatasetManifest) -> List[PredictionRecord]:
        if method == "m1":
            model, _ = load_multitask(self._ctx.get_multitask_checkpoint_path())
            return [predict_multitask_record(model, clip) for clip in load_clips(val)]

        bank = load_bank(self._ctx.get_bank_directory())
        recognizer = self._build_recognizer(train, val)
        logger.info("Scenario recognizer: %s", self._config.recognizer.mode.value)

        return predict_two_stage_records(bank, recognizer, load_clips(val))

    def _evaluate(self, method: str, strategies: Optional[Sequence[AggregationStrategy]]):
        train, val = self._load_split()
        records = self._predict(method, train, val)
        write_records(records, self._ctx.path(predictions_file_name(method)))

        report = per_scenario_report(records)
        if method == "m2":
            selected = [s.short_name for s in (strategies or list(AggregationStrategy))]
            report = report.copy(update={"columns": [c for c in report.columns if c in selected]})

        write_report(report, self._ctx.output_directory)

        return report

    def compare(self, m1_path: str, m2_path: str) -> str:
        return self._timed(self._compare, m1_path, m2_path)

    def _compare(self, m1_path: str, m2_path: str) -> str:
        m1_report = per_scenario_report(read_records(m1_path, method=METHOD_NAME))
        m2_report = per_scenario_report(read_records(m2_path))

        _, document = compare_methods(m1_report, m2_report)
        path = self._ctx.path("comparison.md")
        utils.write_text(path, document)

        logger.info("Wrote comparison to %s", path)

        return document

    def plot_loss_curves(self, curves_path: str):
        return self._timed(self._plot_loss_curves, curves_path)

    def _plot_loss_curves(self, curves_path: str):
        curves = read_loss_curves_csv(curves_path)
        name = os.path.splitext(os.path.basename(curves_path))[0]

        return emit_loss_curves(curves, self._ctx.output_directory, name=name)


def default_output_directory() -> str:
    return config.output_root or utils.get_default_output_directory()
