import json
import logging
import os
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import utils
from .bank import ClassifierBank, classify_view
from .dataset import MultiViewClip
from .exceptions import InvalidInputError, MissingFileError
from .models import EXO_VIEWS, VIEWS, AggregationStrategy, PredictionRecord, Proficiency, View
from .recognizer import ScenarioRecognizer
from .utils import softmax  # noqa: F401

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-9

ProbabilityMap = Mapping[View, np.ndarray]


def _check_simplex(view: View, p: np.ndarray):
    if (p < 0).any() or abs(p.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise InvalidInputError(f"probabilities of view {view.value} are not on the simplex: {p.tolist()}")


def _strategy_views(strategy: AggregationStrategy) -> Tuple[View, ...]:
    if strategy == AggregationStrategy.EgoOnly:
        return (View.Ego,)
    elif strategy == AggregationStrategy.ExoAverage:
        return EXO_VIEWS
    elif strategy == AggregationStrategy.Combined:
        return VIEWS

    raise ValueError(f"Unknown aggregation strategy: {strategy}")


def aggregate(p_map: ProbabilityMap, strategy: AggregationStrategy) -> np.ndarray:
    """
    Fuses per-view probability vectors.

    ego-only returns p[ego]; exo-average the unweighted mean of the four exo views; combined the unweighted mean
    of all five (ego weighted 1/5).
    """
    views = _strategy_views(AggregationStrategy(strategy))

    missing = [v.value for v in views if v not in p_map]
    if missing:
        raise InvalidInputError(f"{strategy.value} needs views {', '.join(missing)}")

    vectors = []
    for view in views:
        p = np.asarray(p_map[view], dtype=np.float64)
        _check_simplex(view, p)
        vectors.append(p)

    return np.mean(np.stack(vectors), axis=0)


def view_probabilities(bank: ClassifierBank, scenario, clip: MultiViewClip) -> Dict[View, np.ndarray]:
    return {v: utils.softmax(classify_view(bank, scenario, v, clip.streams[v])) for v in VIEWS}


def predict_two_stage(
    bank: ClassifierBank,
    recognizer: ScenarioRecognizer,
    clip: MultiViewClip,
    strategy: AggregationStrategy = AggregationStrategy.Combined,
) -> Tuple[Proficiency, PredictionRecord]:
    """
    Recognizes the scenario, routes every view to its cell of the bank and fuses.

    Returns the label for `strategy` and a record carrying the fused vector and label of every strategy.
    """
    scenario = recognizer.recognize(clip)
    p_map = view_probabilities(bank, scenario, clip)

    fused, labels = {}, {}
    for s in AggregationStrategy:
        p = aggregate(p_map, s)
        fused[s.short_name] = p.tolist()
        labels[s.short_name] = Proficiency(utils.argmax_lowest(p))

    record = PredictionRecord(
        sample_id=clip.sample_id,
        method="two-stage",
        true_scenario=clip.scenario,
        true_proficiency=clip.proficiency,
        predicted_scenario=scenario,
        view_probabilities={v: p.tolist() for v, p in p_map.items()},
        fused=fused,
        labels=labels,
    )

    return labels[AggregationStrategy(strategy).short_name], record


def predict_two_stage_records(
    bank: ClassifierBank, recognizer: ScenarioRecognizer, clips: Sequence[MultiViewClip]
) -> List[PredictionRecord]:
    return [predict_two_stage(bank, recognizer, clip)[1] for clip in clips]


def write_records(records: Sequence[PredictionRecord], path: str):
    utils.write_text(path, "".join(f"{r.json(sort_keys=True)}\n" for r in records))

    logger.debug("Wrote %d prediction records to %s", len(records), path)


def read_records(path: str, method: Optional[str] = None) -> List[PredictionRecord]:
    if not os.path.isfile(path):
        raise MissingFileError(path, what="Prediction records")

    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                records.append(PredictionRecord.parse_obj(json.loads(line)))

    if method is not None:
        records = [r for r in records if r.method == method]

    return records
