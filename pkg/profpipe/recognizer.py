import logging
from typing import Optional, Sequence

import numpy as np
import torch

from . import utils
from .dataset import MultiViewClip
from .exceptions import UnfitModelError
from .features import ClipClassifier
from .models import EncoderConfig, RecognizerConfig, RecognizerMode, Scenario, TrainConfig, View
from .probe import ProbeTarget, prepare_view_frames, train_probe

logger = logging.getLogger(__name__)


class ScenarioRecognizer:
    """Stage 1: assigns a scenario to a clip, standing in for a zero-shot vision-language model."""

    def __init__(self, config: RecognizerConfig):
        self._config = config

    @property
    def config(self) -> RecognizerConfig:
        return self._config

    def recognize(self, clip: MultiViewClip) -> Scenario:
        raise NotImplementedError


class OracleRecognizer(ScenarioRecognizer):
    def recognize(self, clip: MultiViewClip) -> Scenario:
        return clip.scenario


class NoisyOracleRecognizer(ScenarioRecognizer):
    """Samples from the confusion row of the true scenario, seeded by (seed, sample_id)."""

    def __init__(self, config: RecognizerConfig):
        super().__init__(config)
        self._cumulative = np.cumsum(np.asarray(config.confusion, dtype=np.float64), axis=1)

    def recognize(self, clip: MultiViewClip) -> Scenario:
        rng = utils.rng_for(self._config.seed, "recognizer", clip.sample_id)
        row = self._cumulative[int(clip.scenario)]
        draw = rng.random() * row[-1]

        return Scenario(int(min(np.searchsorted(row, draw, side="right"), len(row) - 1)))


class ProbeRecognizer(ScenarioRecognizer):
    """6-way classifier over the ego stream only."""

    def __init__(self, config: RecognizerConfig, probe: Optional[ClipClassifier] = None):
        super().__init__(config)
        self._probe = probe

    @property
    def probe(self) -> Optional[ClipClassifier]:
        return self._probe

    @property
    def is_fit(self) -> bool:
        return self._probe is not None

    def fit(
        self,
        train_clips: Sequence[MultiViewClip],
        encoder_config: EncoderConfig,
        train_config: TrainConfig,
        val_clips: Sequence[MultiViewClip] = (),
    ) -> "ProbeRecognizer":
        encoder_config = encoder_config.copy(update={"seed": utils.derive_seed(self._config.seed, "scenario-probe")})
        self._probe, _, _ = train_probe(
            train_clips,
            val_clips,
            [View.Ego],
            ProbeTarget.Scenario,
            encoder_config,
            train_config,
            name="scenario-probe",
        )
        return self

    def recognize(self, clip: MultiViewClip) -> Scenario:
        if self._probe is None:
            raise UnfitModelError("trained-probe recognizer used before it was trained")

        frames = prepare_view_frames(clip, View.Ego, self._probe.encoder_config)
        self._probe.eval()
        with torch.no_grad():
            logits = self._probe(frames[None])[0]

        return Scenario(utils.argmax_lowest(logits.tolist()))


class ScenarioRecognizerFactory:
    @staticmethod
    def get(config: RecognizerConfig, probe: Optional[ClipClassifier] = None) -> ScenarioRecognizer:
        if config.mode == RecognizerMode.Oracle:
            return OracleRecognizer(config)
        elif config.mode == RecognizerMode.NoisyOracle:
            return NoisyOracleRecognizer(config)
        elif config.mode == RecognizerMode.TrainedProbe:
            return ProbeRecognizer(config, probe)

        raise ValueError(f"Unknown recognizer mode: {config.mode}")


def recognize_scenario(
    clip: MultiViewClip, config: RecognizerConfig, probe: Optional[ClipClassifier] = None
) -> Scenario:
    return ScenarioRecognizerFactory.get(config, probe).recognize(clip)
