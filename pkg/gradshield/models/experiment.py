"""
Experiment configuration

A TOML experiment file maps onto ExperimentConfig: top-level keys choose the
experiment kind, model and seed, and one optional table per module holds that
module's parameters. Every table forbids unknown keys.
"""
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from gradshield.core.config import settings
from gradshield.models.schemas import AttackConfig, DefenseConfig, FedsimConfig
from gradshield.services.model_zoo import MODEL_IDS

ExperimentKind = Literal["bound-curve", "attack-sweep", "noise-utility", "adaptive-train", "concentration", "descent"]
EXPERIMENT_KINDS = ("bound-curve", "attack-sweep", "noise-utility", "adaptive-train", "concentration", "descent")


def _z_grid(values: List[float]) -> List[float]:
    if not values:
        raise ValueError("grid must be nonempty")
    for z in values:
        if not 0.0 <= z <= 1.0:
            raise ValueError("z out of [0,1]")
    return sorted(set(values))


def _positive_grid(values: List[float]) -> List[float]:
    if not values:
        raise ValueError("grid must be nonempty")
    if any(v < 0 for v in values):
        raise ValueError("values must be nonnegative")
    return sorted(set(values))


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(Section):
    source: Literal["synthetic", "images"] = "synthetic"
    count: int = Field(300, ge=1)
    tau: float = Field(1.0, gt=0.0)
    label: Literal["constant", "linear", "argmax"] = "linear"
    label_value: float = 0.0
    teacher_scale: float = Field(0.1, gt=0.0)
    label_noise: float = Field(0.3, ge=0.0)
    num_classes: int = Field(4, ge=2)
    directory: Optional[str] = None
    lambda1: float = Field(0.0, ge=0.0, description="User-supplied λ1 for image data")

    @model_validator(mode="after")
    def check_source(self):
        if self.source == "images" and not self.directory:
            raise ValueError("images source needs a directory")
        return self


class BoundsSection(Section):
    models: List[str] = Field(default_factory=list, description="Models to compare; defaults to the top-level model")
    z_grid: List[float] = Field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99])
    sigma: float = Field(1e-2, gt=0.0)
    sample_cap: int = Field(default_factory=lambda: settings.EXPOSURE_SAMPLE_CAP, ge=1)
    h: float = Field(default_factory=lambda: settings.FD_STEP, gt=0.0)

    @field_validator("z_grid")
    @classmethod
    def check_z_grid(cls, v):
        return _z_grid(v)


class AttackSection(AttackConfig):
    z_grid: List[float] = Field(default_factory=lambda: [0.0, 0.5, 0.9])
    sigmas: List[float] = Field(default_factory=lambda: [1e-3, 1e-2])
    trials: int = Field(20, ge=1)
    trace_stride: int = Field(0, ge=0)
    sample_cap: int = Field(64, ge=1)

    @field_validator("z_grid")
    @classmethod
    def check_z_grid(cls, v):
        return _z_grid(v)

    @field_validator("sigmas")
    @classmethod
    def check_sigmas(cls, v):
        return _positive_grid(v)


class FedsimSection(FedsimConfig):
    sigma_grid: List[float] = Field(default_factory=lambda: [0.0, 1e-6, 1e-3, 1.0, 10.0])
    z_grid: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 0.9])
    tolerance: float = Field(0.01, gt=0.0, description="Relative final-loss gap counted as matching the baseline")

    @field_validator("z_grid")
    @classmethod
    def check_z_grid(cls, v):
        return _z_grid(v)

    @field_validator("sigma_grid")
    @classmethod
    def check_sigma_grid(cls, v):
        return _positive_grid(v)


class ConcentrationSection(Section):
    sigma: float = Field(1.0, gt=0.0)
    n_grid: List[int] = Field(default_factory=lambda: [1, 3, 10])
    d_grid: List[int] = Field(default_factory=lambda: [4, 64, 1024])
    delta_grid: List[float] = Field(default_factory=lambda: [0.01, 0.05, 0.5])
    trials: int = Field(100_000, ge=10_000)

    @field_validator("n_grid", "d_grid")
    @classmethod
    def check_counts(cls, v):
        if not v or any(k < 1 for k in v):
            raise ValueError("grid must be nonempty with entries >= 1")
        return sorted(set(v))

    @field_validator("delta_grid")
    @classmethod
    def check_deltas(cls, v):
        if not v or any(not 0.0 < p < 1.0 for p in v):
            raise ValueError("delta out of (0,1)")
        return sorted(set(v))


class DescentSection(Section):
    d: int = Field(1, ge=1)
    B: List[float] = Field(default_factory=lambda: [1.0, 0.5, 2.0])
    mu_norms: List[float] = Field(default_factory=lambda: [1.0, 1.0, 0.5])
    multipliers: List[float] = Field(default_factory=lambda: [0.0, 0.5, 0.9, 2.0, 10.0])
    eta: float = Field(0.01, gt=0.0)
    delta_prob: float = Field(default_factory=lambda: settings.DEFAULT_DELTA_PROB, gt=0.0, lt=1.0)
    rule: Literal["sum", "average"] = "sum"
    trials: int = Field(10_000, ge=1)

    @model_validator(mode="after")
    def check_clients(self):
        if len(self.B) != len(self.mu_norms) or not self.B:
            raise ValueError("B and mu_norms must list the same nonzero number of clients")
        if any(v <= 0 for v in self.mu_norms):
            raise ValueError("mu_norms must be positive")
        return self

    @field_validator("multipliers")
    @classmethod
    def check_multipliers(cls, v):
        return _positive_grid(v)


class ExperimentConfig(Section):
    """Validated experiment file"""

    kind: ExperimentKind
    model: str = "small"
    name: Optional[str] = None
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED)
    output_dir: str = Field(default_factory=lambda: settings.RUNS_DIR)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    defense: DefenseConfig = Field(default_factory=DefenseConfig)
    bounds: BoundsSection = Field(default_factory=BoundsSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    fedsim: FedsimSection = Field(default_factory=FedsimSection)
    concentration: ConcentrationSection = Field(default_factory=ConcentrationSection)
    descent: DescentSection = Field(default_factory=DescentSection)

    @field_validator("model")
    @classmethod
    def check_model(cls, v):
        if v not in MODEL_IDS:
            raise ValueError(f"unknown model '{v}', expected one of {', '.join(MODEL_IDS)}")
        return v

    @model_validator(mode="after")
    def check_bound_models(self):
        for model in self.bounds.models:
            if model not in MODEL_IDS:
                raise ValueError(f"unknown model '{model}' in bounds.models")
        return self
