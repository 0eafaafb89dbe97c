"""
Pydantic models for reports, records and per-module configuration
"""
import math
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from gradshield.models.domain import ParameterVector


class DefenseConfig(BaseModel):
    """Selective encryption plus Gaussian noise on the unencrypted coordinates"""
    model_config = ConfigDict(extra="forbid")

    z: float = Field(0.0, ge=0.0, le=1.0, description="Requested encryption ratio")
    sigma: float = Field(0.0, ge=0.0, allow_inf_nan=False, description="Noise standard deviation")
    strategy: Literal["magnitude", "random", "fixed-indices"] = "magnitude"
    fixed_indices: Optional[List[int]] = Field(None, description="Unencrypted indices for fixed-indices")


class BoundReport(BaseModel):
    """One evaluation of the reconstruction-error lower bound"""

    model: str = ""
    m: int = Field(..., ge=1)
    D: int = Field(..., ge=1)
    d: int = Field(..., ge=0)
    z_requested: float
    z_realized: float
    sigma: float
    exposure: float = Field(..., ge=0.0)
    lambda1: float = Field(..., ge=0.0)
    data_information: float = Field(..., description="d·E/σ², the trace-bound role of J_D")
    bayesian_information: float = Field(..., description="data_information + λ1, the J_B role")
    bound: float
    samples: int = 0
    unbounded: bool = False
    optimistic: bool = False

    @model_validator(mode="after")
    def check_consistency(self):
        if self.d > self.D:
            raise ValueError("d cannot exceed D")
        if abs(self.z_realized - (self.D - self.d) / self.D) > 1e-12:
            raise ValueError("z_realized must equal (D - d) / D")
        if self.bayesian_information > 0 and not self.bound > 0:
            raise ValueError("bound must be positive when the denominator is")
        return self

    def csv_row(self) -> dict:
        return {
            "model": self.model,
            "m": self.m,
            "D": self.D,
            "z_requested": self.z_requested,
            "z_realized": self.z_realized,
            "sigma": self.sigma,
            "exposure": self.exposure,
            "lambda1": self.lambda1,
            "bound": self.bound,
            "samples": self.samples,
        }


BOUND_CSV_HEADER = ["model", "m", "D", "z_requested", "z_realized", "sigma", "exposure", "lambda1", "bound", "samples"]


class TraceCheck(BaseModel):
    """tr(J_F) next to its exposure upper bound (m·d/σ²)·exposure"""

    trace: float
    upper: float
    holds: bool


class ClientGradStats(BaseModel):
    """Alignment statistics of one client against the clean aggregate"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    client: int = Field(..., ge=0)
    mu: List[float]
    mu_norm: float = Field(..., ge=0.0)
    B: float
    batch_size: int = Field(..., ge=1)

    @field_validator("mu")
    @classmethod
    def check_finite(cls, v):
        if not all(math.isfinite(x) for x in v):
            raise ValueError("mu must be finite")
        return v

    @property
    def d(self) -> int:
        return len(self.mu)


class CriticalNoiseConfig(BaseModel):
    """Parameters of the σ_crit threshold"""
    model_config = ConfigDict(extra="forbid")

    n: int = Field(..., ge=1, description="Client count")
    d: int = Field(..., ge=0, description="Noisy-coordinate count")
    delta_prob: float = Field(0.05, gt=0.0, lt=1.0)
    kappa: float = Field(0.9, gt=0.0, le=1.0)
    eta: float = Field(0.1, gt=0.0)


class CriticalNoise(BaseModel):
    """σ_crit with its degenerate-case flags"""

    value: float
    nonpositive: bool = False
    infinite: bool = False


class NoiseDecision(BaseModel):
    """σ_t chosen by the adaptive scheduler for one round"""

    sigma: float = Field(..., ge=0.0)
    sigma_crit: float = Field(..., description="min over clients of σ_crit, before κ")
    floored: bool = False
    capped: bool = False


class AttackConfig(BaseModel):
    """Gradient-inversion attacker settings"""
    model_config = ConfigDict(extra="forbid")

    objective: Literal["l2", "cosine"] = "l2"
    iterations: int = Field(2000, ge=1)
    step_size: float = Field(0.05, gt=0.0)
    restarts: int = Field(4, ge=1)
    init_scale: float = Field(1.0, gt=0.0)
    label_mode: Literal["known", "optimize"] = "known"
    fd_step: float = Field(1e-5, gt=0.0, description="Finite-difference step for the dummy-input gradient")
    seed: int = 0


class AttackResult(BaseModel):
    """Best reconstruction over restarts"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    x_hat: List[float]
    objective: float
    trace: List[float]
    traces: List[List[float]] = Field(default_factory=list, description="One objective trace per restart")
    accepted_steps: List[int] = Field(default_factory=list, description="Iterations of the best restart that improved the best objective")
    mse: Optional[float] = Field(None, ge=0.0)
    best_restart: int = Field(0, ge=0)
    aborted_restarts: List[int] = Field(default_factory=list)


class SweepTrial(BaseModel):
    """One attack trial of a sweep"""

    trial: int
    z: float
    sigma: float
    mse: float
    bound: float = Field(..., description="lower bound on the per-coordinate MSE (total bound / m)")
    violated: bool


class SweepSummary(BaseModel):
    """Per-z aggregate of a sweep"""

    z: float
    sigma: float
    mean_mse: float
    std_mse: float
    bound: float
    violations: int


class SweepResult(BaseModel):
    trials: List[SweepTrial]
    summary: List[SweepSummary]
    traces: List[Tuple[int, float, float, int, int, float]] = Field(
        default_factory=list, description="(trial, z, sigma, restart, iteration, objective)"
    )

    @property
    def violation_fraction(self) -> float:
        return sum(t.violated for t in self.trials) / len(self.trials) if self.trials else 0.0


class ClientState(BaseModel):
    """One federated client: its sample indices and random stream"""

    client: int = Field(..., ge=0)
    indices: List[int]
    stream: int


class ServerState(BaseModel):
    """Global model state held by the server"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: ParameterVector
    round: int = 0
    rule: Literal["sum", "average"] = "sum"
    eta: float = Field(0.1, gt=0.0)


class RoundRecord(BaseModel):
    """Outcome of one federated round"""

    round: int
    stats: List[ClientGradStats] = Field(default_factory=list)
    sigma_crit: float = Field(math.inf, description="min over clients of σ_crit, before κ")
    sigma_applied: float = Field(0.0, ge=0.0)
    adaptive: bool = False
    floored: bool = False
    loss: float
    z_realized: float
    d: int
    aborted: bool = False
    wall_time: float = 0.0
    descent_fraction: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_noise_safety(self):
        if self.adaptive and not self.floored and math.isfinite(self.sigma_crit) and self.sigma_crit > 0:
            if self.sigma_applied > self.sigma_crit * (1 + 1e-12):
                raise ValueError("applied sigma exceeds the critical noise")
        return self


class RunLog(BaseModel):
    """Loss trajectory and per-round records of one training run"""

    initial_loss: float
    rounds: List[RoundRecord] = Field(default_factory=list)
    aborted: bool = False

    @property
    def losses(self) -> List[float]:
        return [self.initial_loss] + [r.loss for r in self.rounds]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


class PlotSeries(BaseModel):
    """Plot-ready (x, y) series"""

    name: str
    xlabel: str
    ylabel: str
    points: List[Tuple[float, float]]
    provenance: str = ""

    @field_validator("points")
    @classmethod
    def check_increasing(cls, v):
        xs = [p[0] for p in v]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("x must be strictly increasing within a series")
        return v


class CheckResult(BaseModel):
    """One row of the verification report"""

    check: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


class FedsimConfig(BaseModel):
    """Federated simulation settings"""
    model_config = ConfigDict(extra="forbid")

    clients: int = Field(3, ge=1)
    rounds: int = Field(50, ge=1)
    eta: float = Field(0.2, gt=0.0)
    rule: Literal["sum", "average"] = "sum"
    partition: Literal["iid", "label-skew"] = "iid"
    mask_mode: Literal["per-round", "fixed"] = "per-round"
    noise_placement: Literal["client", "server"] = "client"
    granularity: Literal["batch", "sample"] = "batch"
    adaptive: bool = False
    kappa: float = Field(0.9, gt=0.0, le=1.0)
    delta_prob: float = Field(0.05, gt=0.0, lt=1.0)
    noise_floor: float = Field(1e-6, ge=0.0)
    sigma_max: float = Field(1e-2, gt=0.0)
    init_scale: Optional[float] = Field(None, gt=0.0)
    descent_trials: int = Field(0, ge=0, description="Noise draws for the per-round descent check (0 disables)")
