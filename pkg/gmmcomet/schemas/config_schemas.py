import math
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrictModel(BaseModel):
    # Unknown keys are hard errors; NaN/Inf never pass validation.
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False, frozen=True)


class OodMetricKind(str, Enum):
    MAHALANOBIS = "mahalanobis"
    NORMALIZED_ENTROPY = "entropy"


class PredictionTiming(str, Enum):
    POST = "post"
    PRE = "pre"


class ScenarioKind(str, Enum):
    PDA = "PDA"
    ODA = "ODA"
    OPDA = "OPDA"


class LossWeights(StrictModel):
    lambda_entropy: float = Field(1.0, ge=0, description="Weight of the entropy loss.")
    lambda_src: float = Field(2.0, ge=0, description="Weight of the source consistency loss.")
    lambda_mt: float = Field(1.0, ge=0, description="Weight of the student-teacher consistency loss.")
    temperature: float = Field(0.1, gt=0, description="Contrastive temperature.")
    exclude_self_pairs: bool = Field(True, description="Drop j == i pairs and l == i denominator terms.")


class AblationSwitches(StrictModel):
    adapt: bool = True
    mean_teacher: bool = True
    ensembling: bool = True
    consistency_src: bool = True
    consistency_mt: bool = True


class NetworkConfig(StrictModel):
    hidden_dims: List[int] = Field(default_factory=lambda: [64, 64])
    feature_dim: int = Field(32, ge=1)
    reduced_dim: int = Field(8, ge=1, description="Output size of the projection layer.")

    @field_validator("hidden_dims")
    @classmethod
    def _positive_widths(cls, value: List[int]) -> List[int]:
        if any(width < 1 for width in value):
            raise ValueError("hidden layer widths must be positive")
        return value


# Published hyperparameters per benchmark family.
BENCHMARK_PRESETS: Dict[str, Dict[str, Any]] = {
    "cifar10": {
        "alpha_mt": 0.99, "alpha_gmm": 0.99, "p_reject": 0.5, "metric": "mahalanobis",
        "weights": {"lambda_entropy": 1.0, "lambda_src": 5.0, "lambda_mt": 2.0},
    },
    "cifar100": {
        "alpha_mt": 0.99, "alpha_gmm": 0.99, "p_reject": 0.5, "metric": "entropy",
        "weights": {"lambda_entropy": 1.0, "lambda_src": 2.0, "lambda_mt": 1.0},
    },
    "domainnet": {
        "alpha_mt": 0.999, "alpha_gmm": 0.999, "p_reject": 0.65, "metric": "entropy",
        "weights": {"lambda_entropy": 1.0, "lambda_src": 2.0, "lambda_mt": 1.0},
    },
}


class EngineConfig(StrictModel):
    lr: float = Field(0.001, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    alpha_mt: float = Field(0.99, ge=0, le=1)
    alpha_gmm: float = Field(0.99, ge=0, le=1)
    n_init: int = Field(50, ge=1, description="Number of batches used to calibrate the OOD thresholds.")
    p_reject: float = Field(0.5, gt=0, lt=1)
    metric: OodMetricKind = OodMetricKind.NORMALIZED_ENTROPY
    weights: LossWeights = Field(default_factory=LossWeights)
    sigma_aug: float = Field(0.1, ge=0, description="Jitter std relative to the per-dimension batch scale.")
    cov_reg: float = Field(1e-4, gt=0)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    switches: AblationSwitches = Field(default_factory=AblationSwitches)
    prediction_timing: PredictionTiming = PredictionTiming.POST
    share_projection: bool = False
    preset: Optional[Literal["cifar10", "cifar100", "domainnet"]] = None

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data: Any) -> Any:
        if not isinstance(data, dict) or not data.get("preset"):
            return data
        preset = BENCHMARK_PRESETS.get(data["preset"])
        if preset is None:
            return data  # the Literal check reports it
        merged = dict(data)
        for key, value in preset.items():
            if key == "weights":
                weights = dict(value)
                weights.update(dict(data.get("weights") or {}))
                merged["weights"] = weights
            else:
                merged.setdefault(key, value)
        return merged


class ClassSplit(StrictModel):
    shared: int = Field(..., ge=1, description="Classes present in both source and target.")
    source_private: int = Field(..., ge=0, description="Classes only the source has.")
    target_private: int = Field(..., ge=0, description="Classes only the target has (unknown at test time).")

    @property
    def num_source_classes(self) -> int:
        return self.shared + self.source_private

    @property
    def num_target_classes(self) -> int:
        return self.shared + self.target_private

    @property
    def total_classes(self) -> int:
        return self.shared + self.source_private + self.target_private

    def source_classes(self) -> List[int]:
        # Source classes come first, shared classes in the middle.
        return list(range(self.num_source_classes))

    def target_classes(self) -> List[int]:
        # Target classes start after the source-private block.
        return list(range(self.source_private, self.total_classes))


class ShiftSpec(StrictModel):
    rotation: float = Field(0.0, description="Rotation angle in radians.")
    rotation_plane: Tuple[int, int] = (0, 1)
    translation: Optional[List[float]] = None
    scale: float = Field(1.0, gt=0)
    noise_std: float = Field(0.0, ge=0)

    @model_validator(mode="before")
    @classmethod
    def _degrees(cls, data: Any) -> Any:
        if isinstance(data, dict) and "rotation_deg" in data:
            data = dict(data)
            if "rotation" in data:
                raise ValueError("give either rotation or rotation_deg, not both")
            data["rotation"] = math.radians(data.pop("rotation_deg"))
        return data

    @field_validator("rotation_plane")
    @classmethod
    def _distinct_axes(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if value[0] == value[1] or min(value) < 0:
            raise ValueError("rotation_plane needs two distinct non-negative axes")
        return value


def default_domains() -> List[ShiftSpec]:
    return [ShiftSpec(rotation=math.radians(deg)) for deg in (15.0, 30.0, 45.0, 60.0)]


class PretrainConfig(StrictModel):
    samples_per_class: int = Field(200, ge=1)
    epochs: int = Field(200, ge=1)
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(64, ge=1)
    label_smoothing: float = Field(0.1, ge=0, lt=1)
    target_accuracy: float = Field(0.95, gt=0, le=1)
    min_accuracy: float = Field(0.6, ge=0, le=1)


class ScenarioConfig(StrictModel):
    kind: ScenarioKind
    split: ClassSplit
    input_dim: int = Field(8, ge=2)
    domains: List[ShiftSpec] = Field(default_factory=default_domains)
    batch_size: int = Field(64, ge=2)
    batches_per_domain: Union[int, List[int]] = 60
    class_radius: float = Field(3.0, gt=0)
    class_std: float = Field(1.0, gt=0)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ScenarioConfig":
        split = self.split
        if self.kind == ScenarioKind.PDA and (split.target_private != 0 or split.source_private == 0):
            raise ValueError("PDA requires split.target_private == 0 and split.source_private > 0")
        if self.kind == ScenarioKind.ODA and (split.source_private != 0 or split.target_private == 0):
            raise ValueError("ODA requires split.source_private == 0 and split.target_private > 0")
        if self.kind == ScenarioKind.OPDA and (split.source_private == 0 or split.target_private == 0):
            raise ValueError("OPDA requires shared, source_private and target_private all > 0")
        if split.num_source_classes < 2:
            raise ValueError("at least two source classes are needed for normalized entropies")
        counts = self.domain_batch_counts()
        if len(counts) != len(self.domains):
            raise ValueError("batches_per_domain list must have one entry per domain")
        if any(count < 0 for count in counts):
            raise ValueError("batches_per_domain must be non-negative")
        for spec in self.domains:
            if spec.translation is not None and len(spec.translation) != self.input_dim:
                raise ValueError("translation length must equal input_dim")
            if max(spec.rotation_plane) >= self.input_dim:
                raise ValueError("rotation_plane axis out of range for input_dim")
        return self

    def domain_batch_counts(self) -> List[int]:
        if isinstance(self.batches_per_domain, int):
            return [self.batches_per_domain] * len(self.domains)
        return list(self.batches_per_domain)


class Variant(str, Enum):
    FULL = "full"
    NO_CONSISTENCY = "no_consistency"
    NO_CONSISTENCY_SRC = "no_consistency_src"
    NO_CONSISTENCY_MT = "no_consistency_mt"
    NO_MEAN_TEACHER = "no_mean_teacher"
    NO_ENSEMBLING = "no_ensembling"
    SOURCE_ONLY = "source_only"


ABLATION_VARIANTS: List[Variant] = [
    Variant.FULL, Variant.NO_CONSISTENCY, Variant.NO_MEAN_TEACHER, Variant.NO_ENSEMBLING, Variant.SOURCE_ONLY,
]

_VARIANT_SWITCHES: Dict[Variant, Dict[str, bool]] = {
    Variant.FULL: {},
    Variant.NO_CONSISTENCY: {"consistency_src": False, "consistency_mt": False},
    Variant.NO_CONSISTENCY_SRC: {"consistency_src": False},
    Variant.NO_CONSISTENCY_MT: {"consistency_mt": False},
    Variant.NO_MEAN_TEACHER: {"mean_teacher": False},
    Variant.NO_ENSEMBLING: {"ensembling": False},
    Variant.SOURCE_ONLY: {"adapt": False},
}


def apply_variant(engine: EngineConfig, variant: Variant) -> EngineConfig:
    switches = engine.switches.model_copy(update=_VARIANT_SWITCHES[variant])
    return engine.model_copy(update={"switches": switches})


class ExperimentSpec(StrictModel):
    """One `experiments:` entry of the config file."""
    name: str = Field(..., min_length=1, pattern=r"^[A-Za-z0-9_\-]+$")
    scenario: ScenarioConfig
    engine: EngineConfig = Field(default_factory=EngineConfig)
    seeds: Optional[List[int]] = None
    variants: Optional[List[Variant]] = None


class SuiteFile(StrictModel):
    """Top level of the YAML config file (dialect version 1)."""
    config_version: Literal[1]
    output_dir: Optional[str] = None
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    save_gmm_snapshots: bool = False
    experiments: List[ExperimentSpec] = Field(..., min_length=1)


class SuiteRun(StrictModel):
    name: str
    engine: EngineConfig
    scenario: ScenarioConfig
    seeds: List[int] = Field(..., min_length=1)


class ExperimentSuite(StrictModel):
    runs: List[SuiteRun]
    output_dir: str
    save_gmm_snapshots: bool = False

    @model_validator(mode="after")
    def _unique_names(self) -> "ExperimentSuite":
        names = [run.name for run in self.runs]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise ValueError(f"run names must be unique, duplicated: {duplicates}")
        return self
