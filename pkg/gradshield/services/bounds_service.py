"""
Bounds Service

Fisher information of the defended channel, gradient exposure and the
reconstruction-error lower bound

    E_A ≥ m / (d · E‖R∇_x g(x)‖²_max / σ² + λ1)

with d the realized number of unencrypted coordinates.
"""
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from gradshield.core.config import settings
from gradshield.core.exceptions import ConfigurationError, UndefinedFisherError
from gradshield.core.logging_config import logger
from gradshield.models.domain import (
    DataSample,
    EncryptionMask,
    FisherMatrix,
    GradientInputJacobian,
    GradientVector,
    ModelSpec,
    ParameterVector,
    PriorInfo,
)
from gradshield.models.schemas import BoundReport, TraceCheck
from gradshield.services.defense_service import defense_service
from gradshield.services.model_service import model_service
from gradshield.utils.helpers import chunk_sizes, ordered_map, round_half_away

# (gradient, input Jacobian) of one sample
SampleJacobian = Tuple[GradientVector, GradientInputJacobian]


def _entries(jac) -> np.ndarray:
    return jac.entries if isinstance(jac, GradientInputJacobian) else np.asarray(jac, dtype=np.float64)


class BoundsService:
    """Fisher information, exposure and lower-bound evaluation"""

    def fisher_information(self, jac: GradientInputJacobian, mask: EncryptionMask, sigma: float) -> FisherMatrix:
        """
        Closed-form J_F = (R J)ᵀ (R J) / σ²

        Args:
            jac: D×m input Jacobian of the parameter gradient
            mask: Encryption mask; only unencrypted rows enter
            sigma: Noise standard deviation, must be positive

        Returns:
            FisherMatrix (m×m)
        """
        if sigma <= 0:
            raise UndefinedFisherError("Fisher information is undefined without noise (sigma must be > 0)")
        J = _entries(jac)
        if J.shape[0] != mask.D:
            raise ConfigurationError(f"Jacobian has {J.shape[0]} rows, mask expects D={mask.D}")
        RJ = J[mask.unencrypted]
        F = RJ.T @ RJ / sigma ** 2
        return FisherMatrix(entries=0.5 * (F + F.T), sigma=sigma, mask=mask)

    def empirical_fisher(
        self,
        spec: ModelSpec,
        params: ParameterVector,
        sample: DataSample,
        mask: EncryptionMask,
        sigma: float,
        trials: int,
        seed: int,
        h: Optional[float] = None,
    ) -> FisherMatrix:
        """
        Monte Carlo estimate of J_F as the mean outer product of the score

        For u ~ N(Rg, σ²I) the score is (RJ)ᵀ(u − Rg)/σ², i.e. (RJ)ᵀε/σ with
        ε standard normal, so the Jacobian is computed once and only ε is drawn.
        """
        if sigma <= 0:
            raise UndefinedFisherError("Fisher information is undefined without noise (sigma must be > 0)")
        if trials < 1000:
            raise ConfigurationError("empirical Fisher needs at least 1000 trials")
        jac = model_service.input_jacobian_of_gradient(spec, params, sample, h)
        RJ = jac.entries[mask.unencrypted]
        m = spec.m
        if mask.d == 0:
            return FisherMatrix(entries=np.zeros((m, m)), sigma=sigma, mask=mask)

        rng = np.random.default_rng(seed)
        total = np.zeros((m, m))
        for size in chunk_sizes(trials, mask.d):
            scores = rng.standard_normal((size, mask.d)) @ RJ / sigma
            total += scores.T @ scores
        F = total / trials
        return FisherMatrix(entries=0.5 * (F + F.T), sigma=sigma, mask=mask)

    def gradient_exposure(self, jac: GradientInputJacobian, mask: EncryptionMask) -> float:
        """(max |R J|)², 0.0 when every coordinate is encrypted"""
        J = _entries(jac)
        if J.shape[0] != mask.D:
            raise ConfigurationError(f"Jacobian has {J.shape[0]} rows, mask expects D={mask.D}")
        if mask.d == 0:
            return 0.0
        peak = float(np.abs(J[mask.unencrypted]).max())
        return peak * peak

    def trace_inequality(self, jac: GradientInputJacobian, mask: EncryptionMask, sigma: float) -> TraceCheck:
        """tr(J_F) against (m·d/σ²)·exposure"""
        F = self.fisher_information(jac, mask, sigma)
        m = _entries(jac).shape[1]
        upper = m * mask.d / sigma ** 2 * self.gradient_exposure(jac, mask)
        return TraceCheck(trace=F.trace, upper=upper, holds=F.trace <= upper * (1 + 1e-12) + 1e-300)

    # -- expectations over data ----------------------------------------------

    def subsample(self, count: int, cap: Optional[int], seed: int) -> np.ndarray:
        """Ascending indices of at most `cap` samples, chosen by seed alone"""
        cap = settings.EXPOSURE_SAMPLE_CAP if cap is None else cap
        if count <= cap:
            return np.arange(count)
        return np.sort(np.random.default_rng(seed).choice(count, size=cap, replace=False))

    def sample_jacobians(
        self,
        spec: ModelSpec,
        params: ParameterVector,
        dataset: Sequence[DataSample],
        h: Optional[float] = None,
        cap: Optional[int] = None,
        seed: int = 0,
    ) -> List[SampleJacobian]:
        """Gradient and input Jacobian for each sample of the seeded subsample"""
        if not dataset:
            raise ConfigurationError("exposure expectation needs a nonempty dataset")
        chosen = [dataset[i] for i in self.subsample(len(dataset), cap, seed)]

        def one(sample: DataSample) -> SampleJacobian:
            return (
                model_service.param_gradient(spec, params, sample),
                model_service.input_jacobian_of_gradient(spec, params, sample, h),
            )

        return ordered_map(one, chosen)

    def exposure_samples(
        self,
        jacobians: Sequence[SampleJacobian],
        z: float = 0.0,
        mask: Optional[EncryptionMask] = None,
    ) -> np.ndarray:
        """
        Per-sample exposures

        With a fixed mask every sample is measured under it; otherwise each
        sample gets the magnitude mask of its own gradient at ratio z.
        """
        values = []
        for g, jac in jacobians:
            sample_mask = mask if mask is not None else defense_service.select_mask(g, z)
            values.append(self.gradient_exposure(jac, sample_mask))
        return np.asarray(values)

    def expected_exposure(
        self,
        spec: ModelSpec,
        params: ParameterVector,
        dataset: Sequence[DataSample],
        z: float = 0.0,
        mask: Optional[EncryptionMask] = None,
        h: Optional[float] = None,
        cap: Optional[int] = None,
        seed: int = 0,
    ) -> float:
        """
        Mean exposure over up to `cap` samples

        Args:
            spec: Model
            params: Parameters the gradients are taken at
            dataset: Nonempty list of samples
            z: Encryption ratio of the per-sample magnitude policy
            mask: Fixed mask overriding the per-sample policy
            h: Finite-difference step
            cap: Sample cap (settings.EXPOSURE_SAMPLE_CAP by default)
            seed: Subsample seed

        Returns:
            Arithmetic mean accumulated in ascending sample order
        """
        jacobians = self.sample_jacobians(spec, params, dataset, h, cap, seed)
        return float(np.mean(self.exposure_samples(jacobians, z, mask)))

    # -- the bound -----------------------------------------------------------

    def reconstruction_lower_bound(
        self,
        m: int,
        D: int,
        z: float,
        sigma: float,
        exposure: float,
        lambda1: float,
        model: str = "",
        samples: int = 0,
    ) -> BoundReport:
        """
        m / (d·E/σ² + λ1) with d = D − round(zD)

        A zero denominator (no unencrypted coordinates, or zero exposure, and
        λ1 = 0) is reported as unbounded with an infinite bound.
        """
        if sigma <= 0:
            raise UndefinedFisherError("the bound requires sigma > 0")
        if not 0.0 <= z <= 1.0:
            raise ConfigurationError(f"z={z} out of [0,1]")
        if exposure < 0 or lambda1 < 0:
            raise ConfigurationError("exposure and lambda1 must be nonnegative")
        d = D - round_half_away(z * D)
        data_information = d * exposure / sigma ** 2
        denominator = data_information + lambda1
        unbounded = denominator <= 0.0
        bound = math.inf if unbounded else m / denominator
        return BoundReport(
            model=model,
            m=m,
            D=D,
            d=d,
            z_requested=z,
            z_realized=(D - d) / D,
            sigma=sigma,
            exposure=exposure,
            lambda1=lambda1,
            data_information=data_information,
            bayesian_information=denominator,
            bound=bound,
            samples=samples,
            unbounded=unbounded,
            optimistic=lambda1 == 0.0,
        )

    def bound_curve(
        self,
        spec: ModelSpec,
        params: ParameterVector,
        dataset: Sequence[DataSample],
        z_grid: Sequence[float],
        sigma: float,
        prior: PriorInfo,
        model: str = "",
        h: Optional[float] = None,
        cap: Optional[int] = None,
        seed: int = 0,
    ) -> List[BoundReport]:
        """
        Bound over a z grid, exposure recomputed under each z's magnitude masks

        Jacobians are computed once on one subsample and reused across z.
        """
        if not z_grid:
            raise ConfigurationError("z grid must be nonempty")
        for z in z_grid:
            if not 0.0 <= z <= 1.0:
                raise ConfigurationError(f"z={z} out of [0,1]")
        jacobians = self.sample_jacobians(spec, params, dataset, h, cap, seed)
        reports = []
        for z in z_grid:
            exposure = float(np.mean(self.exposure_samples(jacobians, z)))
            report = self.reconstruction_lower_bound(
                spec.m, spec.param_count, z, sigma, exposure, prior.lambda1,
                model=model, samples=len(jacobians),
            )
            logger.info(
                f"Bound at z={z}: {report.bound:.6g}",
                extra={"extra_fields": {"model": model, "z": z, "d": report.d, "exposure": exposure}},
            )
            reports.append(report)
        return reports


# Singleton instance
bounds_service = BoundsService()
