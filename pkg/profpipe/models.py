from enum import Enum, IntEnum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel as PydanticBaseModel
from pydantic import Extra, Field, root_validator, validator

from .config import config


class BaseModel(PydanticBaseModel):
    class Config:
        extra = Extra.forbid
        allow_population_by_field_name = True


class Scenario(IntEnum):
    Dance = 0
    RockClimbing = 1
    Basketball = 2
    Music = 3
    Cooking = 4
    Soccer = 5

    @property
    def display_name(self) -> str:
        return {Scenario.RockClimbing: "Rock Climbing"}.get(self, self.name)

    @classmethod
    def parse(cls, value) -> "Scenario":
        if isinstance(value, str) and not value.isdigit():
            key = value.replace(" ", "").replace("-", "").lower()
            for s in cls:
                if s.name.lower() == key:
                    return s
            raise ValueError(f"Unknown scenario: {value}")

        return cls(int(value))


class Proficiency(IntEnum):
    Novice = 0
    EarlyExpert = 1
    IntermediateExpert = 2
    LateExpert = 3

    @property
    def display_name(self) -> str:
        return {
            Proficiency.EarlyExpert: "Early Expert",
            Proficiency.IntermediateExpert: "Intermediate Expert",
            Proficiency.LateExpert: "Late Expert",
        }.get(self, self.name)


class View(str, Enum):
    Ego = "ego"
    Exo1 = "exo1"
    Exo2 = "exo2"
    Exo3 = "exo3"
    Exo4 = "exo4"

    @property
    def is_ego(self) -> bool:
        return self is View.Ego


VIEWS: Tuple[View, ...] = tuple(View)
EXO_VIEWS: Tuple[View, ...] = tuple(v for v in View if not v.is_ego)

NUM_SCENARIOS = len(Scenario)
NUM_PROFICIENCY_LEVELS = len(Proficiency)

# Row order of the published per-scenario tables
REPORT_SCENARIO_ORDER: Tuple[Scenario, ...] = (
    Scenario.Basketball,
    Scenario.Cooking,
    Scenario.Dance,
    Scenario.Music,
    Scenario.RockClimbing,
    Scenario.Soccer,
)


class AggregationStrategy(str, Enum):
    EgoOnly = "ego-only"
    ExoAverage = "exo-average"
    Combined = "combined"

    @property
    def short_name(self) -> str:
        return {
            AggregationStrategy.EgoOnly: "ego",
            AggregationStrategy.ExoAverage: "exo",
            AggregationStrategy.Combined: "combined",
        }[self]

    @property
    def display_name(self) -> str:
        return {
            AggregationStrategy.EgoOnly: "Ego",
            AggregationStrategy.ExoAverage: "Exo (avg)",
            AggregationStrategy.Combined: "Combined",
        }[self]

    @classmethod
    def from_short_name(cls, value: str) -> List["AggregationStrategy"]:
        if value == "all":
            return list(cls)

        for s in cls:
            if value in (s.short_name, s.value):
                return [s]

        raise ValueError(f"Unknown aggregation strategy: {value}")


class Split(str, Enum):
    Train = "train"
    Val = "val"


class ProficiencyCoding(str, Enum):
    Shared = "shared"
    ScenarioSpecific = "scenario-specific"


class EncoderArchitecture(str, Enum):
    FrameMlp = "frame-mlp"
    TinyTemporalTransformer = "tiny-temporal-transformer"


class ViewFusion(str, Enum):
    MeanOfPooledViews = "mean-of-pooled-views"
    ViewsAsSamples = "views-as-samples"


class RecognizerMode(str, Enum):
    Oracle = "oracle"
    NoisyOracle = "noisy-oracle"
    TrainedProbe = "trained-probe"

    @classmethod
    def from_short_name(cls, value: str) -> "RecognizerMode":
        return {"oracle": cls.Oracle, "noisy": cls.NoisyOracle, "probe": cls.TrainedProbe}.get(value) or cls(value)


# noinspection PyMethodParameters
class DatasetSpec(BaseModel):
    clips_per_scenario: int = 40
    frames_per_stream: int = 32
    frame_size: Tuple[int, int] = (64, 64)
    signal_strength: float = 1.0
    scenario_strength: float = 1.0
    view_visibility: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    noise_std: float = 0.1
    pattern_jitter: float = 0.2
    proficiency_coding: ProficiencyCoding = ProficiencyCoding.Shared
    seed: int = 0
    workers: int = 1

    @validator("clips_per_scenario")
    def validate_clips_per_scenario(cls, value):
        if value <= 0 or value % NUM_PROFICIENCY_LEVELS != 0:
            raise ValueError(
                f"clips_per_scenario must be a positive multiple of {NUM_PROFICIENCY_LEVELS}, got {value}"
            )

        return value

    @validator("frames_per_stream", "workers")
    def validate_positive(cls, value, field):
        if value < 1:
            raise ValueError(f"{field.name} must be at least 1, got {value}")

        return value

    @validator("frame_size")
    def validate_frame_size(cls, value):
        if min(value) < 1:
            raise ValueError(f"frame_size must be positive, got {value}")

        return tuple(value)

    @validator("signal_strength", "scenario_strength", "noise_std", "pattern_jitter")
    def validate_non_negative(cls, value, field):
        if value < 0:
            raise ValueError(f"{field.name} must be >= 0, got {value}")

        return value

    @validator("view_visibility")
    def validate_view_visibility(cls, value):
        normalized = {}

        for scenario_name, views in value.items():
            scenario = Scenario.parse(scenario_name)
            normalized[scenario.name] = {}

            for view_tag, visibility in views.items():
                view = View(view_tag)
                if not 0.0 <= visibility <= 1.0:
                    raise ValueError(f"visibility for ({scenario.name}, {view.value}) must be in [0, 1]: {visibility}")

                normalized[scenario.name][view.value] = float(visibility)

        return normalized

    def visibility(self, scenario: Scenario, view: View) -> float:
        return self.view_visibility.get(scenario.name, {}).get(view.value, 1.0)

    @property
    def total_clips(self) -> int:
        return self.clips_per_scenario * NUM_SCENARIOS


class ManifestEntry(BaseModel):
    sample_id: str
    scenario: Scenario
    proficiency: Proficiency
    path: str
    split: Optional[Split] = None


# noinspection PyMethodParameters
class DatasetManifest(BaseModel):
    entries: List[ManifestEntry]
    split: Optional[Split] = None
    root: str = "."

    @validator("entries")
    def validate_unique_sample_ids(cls, entries):
        seen, duplicates = set(), set()
        for e in entries:
            if e.sample_id in seen:
                duplicates.add(e.sample_id)
            seen.add(e.sample_id)

        if duplicates:
            raise ValueError(f"Duplicate sample ids: {', '.join(sorted(duplicates))}")

        return entries

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def sample_ids(self) -> List[str]:
        return [e.sample_id for e in self.entries]

    def by_scenario(self, scenario: Scenario) -> List[ManifestEntry]:
        return [e for e in self.entries if e.scenario == scenario]


# noinspection PyMethodParameters
class EncoderConfig(BaseModel):
    feature_dim: int = 64
    hidden_dim: int = 128
    architecture: EncoderArchitecture = EncoderArchitecture.FrameMlp
    norm_mean: Tuple[float, float, float] = config.default_norm_mean
    norm_std: Tuple[float, float, float] = config.default_norm_std
    crop_size: int = 56
    max_frames: int = 32
    seed: int = 0

    @validator("feature_dim")
    def validate_feature_dim(cls, value):
        minimum = max(NUM_SCENARIOS, NUM_PROFICIENCY_LEVELS)
        if value < minimum:
            raise ValueError(f"feature_dim must be >= {minimum} (widest head), got {value}")

        return value

    @validator("hidden_dim", "crop_size", "max_frames")
    def validate_positive(cls, value, field):
        if value < 1:
            raise ValueError(f"{field.name} must be at least 1, got {value}")

        return value

    @validator("norm_std")
    def validate_norm_std(cls, value):
        if any(s <= 0 for s in value):
            raise ValueError(f"norm_std entries must be > 0, got {value}")

        return value


# noinspection PyMethodParameters
class TrainConfig(BaseModel):
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    epochs: int = 20
    batch_size: int = 8
    alpha: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @validator("learning_rate")
    def validate_learning_rate(cls, value):
        # lr == 0 is accepted as a degenerate no-op run
        if value < 0:
            raise ValueError(f"learning_rate must be >= 0, got {value}")

        return value

    @validator("weight_decay")
    def validate_weight_decay(cls, value):
        if value < 0:
            raise ValueError(f"weight_decay must be >= 0, got {value}")

        return value

    @validator("epochs", "batch_size")
    def validate_positive(cls, value, field):
        if value < 1:
            raise ValueError(f"{field.name} must be at least 1, got {value}")

        return value

    @validator("alpha")
    def validate_alpha(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {value}")

        return value


def default_confusion(diagonal: float = 0.8) -> List[List[float]]:
    off = (1.0 - diagonal) / (NUM_SCENARIOS - 1)
    return [[diagonal if i == j else off for j in range(NUM_SCENARIOS)] for i in range(NUM_SCENARIOS)]


# noinspection PyMethodParameters
class RecognizerConfig(BaseModel):
    mode: RecognizerMode = RecognizerMode.Oracle
    confusion: List[List[float]] = Field(default_factory=default_confusion)
    seed: int = 0

    @validator("confusion")
    def validate_confusion(cls, value):
        if len(value) != NUM_SCENARIOS or any(len(row) != NUM_SCENARIOS for row in value):
            raise ValueError(f"confusion must be a {NUM_SCENARIOS}x{NUM_SCENARIOS} matrix")

        for i, row in enumerate(value):
            if any(p < 0 for p in row):
                raise ValueError(f"confusion row {i} has negative entries")
            if abs(sum(row) - 1.0) > 1e-9:
                raise ValueError(f"confusion row {i} sums to {sum(row)}, expected 1")

        return value


# noinspection PyMethodParameters
class EpochLosses(BaseModel):
    epoch: int
    train_total: float
    train_prof: Optional[float] = None
    train_scen: Optional[float] = None
    val_total: Optional[float] = None
    val_prof: Optional[float] = None
    val_scen: Optional[float] = None

    @root_validator
    def validate_losses_are_finite_and_non_negative(cls, values):
        for name, value in values.items():
            if name == "epoch" or value is None:
                continue
            if not value >= 0 or value == float("inf"):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

        return values


# noinspection PyMethodParameters
class LossCurves(BaseModel):
    records: List[EpochLosses] = Field(default_factory=list)

    @validator("records")
    def validate_epochs_strictly_increasing(cls, records):
        for previous, current in zip(records, records[1:]):
            if current.epoch <= previous.epoch:
                raise ValueError(f"epochs must be strictly increasing: {previous.epoch} then {current.epoch}")

        return records

    def __len__(self):
        return len(self.records)

    def append(self, record: EpochLosses):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError(f"epoch {record.epoch} does not follow {self.records[-1].epoch}")

        self.records.append(record)

    @property
    def has_sub_losses(self) -> bool:
        return any(r.train_prof is not None for r in self.records)

    def column(self, name: str) -> List[Optional[float]]:
        return [getattr(r, name) for r in self.records]


# noinspection PyMethodParameters
class PredictionRecord(BaseModel):
    sample_id: str
    method: str
    true_scenario: Optional[Scenario] = None
    true_proficiency: Optional[Proficiency] = None
    predicted_scenario: Scenario
    view_probabilities: Dict[View, List[float]] = Field(default_factory=dict)
    fused: Dict[str, List[float]] = Field(default_factory=dict)
    labels: Dict[str, Proficiency] = Field(default_factory=dict)

    @validator("view_probabilities", "fused")
    def validate_simplex(cls, value):
        for key, p in value.items():
            if any(x < 0 for x in p) or abs(sum(p) - 1.0) > 1e-9:
                raise ValueError(f"probability vector {key} is not on the simplex: {p}")

        return value

    def label_for(self, column: str) -> Proficiency:
        return self.labels[column]

    @property
    def columns(self) -> List[str]:
        return list(self.labels.keys())


# noinspection PyMethodParameters
class RunConfig(BaseModel):
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    recognizer: RecognizerConfig = Field(default_factory=RecognizerConfig)
    strategies: List[AggregationStrategy] = Field(default_factory=lambda: list(AggregationStrategy))
    view_fusion: ViewFusion = ViewFusion.MeanOfPooledViews
    val_fraction: float = 0.25
    output_dir: Optional[str] = None
    data_dir: Optional[str] = None

    @validator("val_fraction")
    def validate_val_fraction(cls, value):
        if not 0.0 < value < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {value}")

        return value

    @root_validator(skip_on_failure=True)
    def validate_crop_fits_frames(cls, values):
        crop_size = values["encoder"].crop_size
        frame_size = values["dataset"].frame_size
        if crop_size > min(frame_size):
            raise ValueError(f"crop_size {crop_size} exceeds the generated frame size {frame_size}")

        return values
