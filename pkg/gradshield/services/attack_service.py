"""
Attack Service

Gradient-matching reconstruction (DLG with an L2 or cosine objective) against
a defended gradient, the reconstruction MSE, and the z-sweep that compares
attack error with the lower bound.

The dummy input is optimized with Adam under a cosine-annealed step size. The
objective only sees the unencrypted coordinates; its gradient with respect to
the dummy input is Jᵀ ∂O/∂ĝ_R with J the central-difference Jacobian of the
restricted parameter gradient.
"""
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from gradshield.core.exceptions import ConfigurationError
from gradshield.core.logging_config import logger
from gradshield.models.domain import (
    DataSample,
    DefendedGradient,
    GradientVector,
    ModelSpec,
    ParameterVector,
    PriorInfo,
)
from gradshield.models.schemas import AttackConfig, AttackResult, SweepResult, SweepSummary, SweepTrial
from gradshield.services.bounds_service import bounds_service
from gradshield.services.defense_service import defense_service
from gradshield.services.model_service import jacobian_columns
from gradshield.services.model_zoo import ToyNetwork, network_for
from gradshield.utils.helpers import derive_seed, ordered_map

NORM_GUARD = 1e-12
FINAL_STEP_FRACTION = 0.01


class Adam:
    """Adaptive-moment updates on a flat vector"""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_step(base: float, iteration: int, total: int) -> float:
    """Cosine annealing from base down to FINAL_STEP_FRACTION·base"""
    progress = iteration / max(1, total - 1)
    return base * (FINAL_STEP_FRACTION + (1 - FINAL_STEP_FRACTION) * 0.5 * (1 + math.cos(math.pi * progress)))


class GradientMatch:
    """Objective O(ĝ_R, u) and its derivative with respect to ĝ_R"""

    def __init__(self, kind: str, visible: np.ndarray):
        self.kind = kind
        self.u = visible
        self.u_norm = float(np.linalg.norm(visible))

    def __call__(self, g_r: np.ndarray) -> Tuple[float, np.ndarray]:
        if self.kind == "l2":
            r = g_r - self.u
            return float(r @ r), 2.0 * r
        g_norm = float(np.linalg.norm(g_r))
        denom = max(g_norm * self.u_norm, NORM_GUARD)
        inner = float(g_r @ self.u)
        value = 1.0 - inner / denom
        if g_norm * self.u_norm > NORM_GUARD:
            grad = -(self.u / denom - inner * g_r / (g_norm * g_norm * denom))
        else:
            grad = -self.u / denom
        return value, grad


class AttackService:
    """DLG-style gradient inversion"""

    def reconstruction_error(self, x_hat: np.ndarray, x: np.ndarray) -> float:
        """Mean squared error over coordinates"""
        x_hat = np.asarray(x_hat, dtype=np.float64).reshape(-1)
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x_hat.size != x.size:
            raise ConfigurationError(f"length mismatch: {x_hat.size} vs {x.size}")
        if x.size == 0:
            return 0.0
        diff = x_hat - x
        return float(diff @ diff) / x.size

    # -- dummy label handling ------------------------------------------------

    def _label_size(self, spec: ModelSpec) -> int:
        return spec.output_dim if spec.loss == "cross-entropy" else 1

    def _target(self, spec: ModelSpec, label: np.ndarray):
        if spec.loss == "cross-entropy":
            return softmax(label)
        return float(label[0])

    def _label_gradient(
        self, network: ToyNetwork, spec: ModelSpec, values: np.ndarray, x: np.ndarray,
        label: np.ndarray, rows: np.ndarray, step: float,
    ) -> np.ndarray:
        """Central-difference Jacobian of ĝ_R with respect to the label parameters"""
        columns = np.empty((rows.size, label.size))
        for j in range(label.size):
            forward = label.copy()
            backward = label.copy()
            forward[j] += step
            backward[j] -= step
            g_f = network.gradient(values, x, self._target(spec, forward))[rows]
            g_b = network.gradient(values, x, self._target(spec, backward))[rows]
            columns[:, j] = (g_f - g_b) / (2 * step)
        return columns

    # -- attack --------------------------------------------------------------

    def _restart(
        self,
        spec: ModelSpec,
        params: ParameterVector,
        defended: DefendedGradient,
        target,
        cfg: AttackConfig,
        restart: int,
    ) -> Tuple[np.ndarray, float, List[float], List[int], bool]:
        network = network_for(spec)
        rows = defended.mask.unencrypted
        match = GradientMatch(cfg.objective, defended.visible)
        rng = np.random.default_rng(derive_seed(cfg.seed, restart))

        x = rng.normal(0.0, cfg.init_scale, size=spec.m)
        optimize_label = cfg.label_mode == "optimize"
        label = rng.normal(0.0, 1.0, size=self._label_size(spec)) if optimize_label else None

        state = np.concatenate([x, label]) if optimize_label else x.copy()
        adam = Adam(state.size)
        best_x, best_value = x.copy(), math.inf
        trace: List[float] = []
        accepted: List[int] = []

        for it in range(cfg.iterations):
            x = state[:spec.m]
            current = self._target(spec, state[spec.m:]) if optimize_label else target
            g_r = network.gradient(params.values, x, current)[rows]
            value, d_g = match(g_r)
            if not math.isfinite(value):
                logger.warning(
                    f"Attack restart {restart} aborted: non-finite objective",
                    extra={"extra_fields": {"restart": restart, "iteration": it}},
                )
                trace.extend([math.nan] * (cfg.iterations - len(trace)))
                return best_x, best_value, trace, accepted, True
            trace.append(value)
            if value < best_value:
                best_value, best_x = value, x.copy()
                accepted.append(it)
            if rows.size == 0:
                continue

            J = jacobian_columns(network, params.values, x, current, cfg.fd_step)[rows]
            grad = J.T @ d_g
            if optimize_label:
                L = self._label_gradient(network, spec, params.values, x, state[spec.m:], rows, cfg.fd_step)
                grad = np.concatenate([grad, L.T @ d_g])
            state = state - adam.step(grad, cosine_step(cfg.step_size, it, cfg.iterations))
        return best_x, best_value, trace, accepted, False

    def dlg_attack(
        self,
        spec: ModelSpec,
        params: ParameterVector,
        defended: DefendedGradient,
        target=None,
        cfg: Optional[AttackConfig] = None,
        ground_truth: Optional[np.ndarray] = None,
    ) -> AttackResult:
        """
        Reconstruct the input behind a defended gradient

        Args:
            spec: Model the gradient was computed on
            params: Parameters at which the gradient was taken
            defended: Attacker view; its mask is known to the attacker
            target: Ground-truth target for label_mode "known"
            cfg: Attack settings
            ground_truth: True input, used only to report MSE

        Returns:
            AttackResult of the best restart (lowest objective, lowest index on ties)
        """
        cfg = cfg or AttackConfig()
        if defended.mask.D != spec.param_count:
            raise ConfigurationError(f"defended gradient has D={defended.mask.D}, model expects {spec.param_count}")
        if cfg.label_mode == "known" and target is None:
            raise ConfigurationError("label_mode 'known' needs the target")

        runs = [self._restart(spec, params, defended, target, cfg, r) for r in range(cfg.restarts)]
        best = 0
        for r, run in enumerate(runs):
            if run[1] < runs[best][1]:
                best = r
        x_hat, value, trace, accepted, _ = runs[best]
        mse = self.reconstruction_error(x_hat, ground_truth) if ground_truth is not None else None
        return AttackResult(
            x_hat=x_hat.tolist(),
            objective=value,
            trace=trace,
            traces=[run[2] for run in runs],
            accepted_steps=accepted,
            mse=mse,
            best_restart=best,
            aborted_restarts=[r for r, run in enumerate(runs) if run[4]],
        )

    # -- sweep ---------------------------------------------------------------

    def attack_sweep(
        self,
        spec: ModelSpec,
        params: ParameterVector,
        dataset: Sequence[DataSample],
        z_grid: Sequence[float],
        sigma: float,
        cfg: AttackConfig,
        trials: int = 20,
        prior: Optional[PriorInfo] = None,
        seed: int = 0,
        trace_stride: int = 0,
        h: Optional[float] = None,
        cap: Optional[int] = None,
    ) -> SweepResult:
        """
        Attack every (trial, z) pair and compare MSE with the bound

        Trial t attacks dataset[t mod len]. Each z gets the magnitude mask of
        that sample's gradient; the per-z bound uses the expected exposure of
        the same policy and λ1 from the prior (0 without one). The bound limits
        the total squared error, so trials compare MSE with bound / m.

        Args:
            trace_stride: Keep every k-th objective value in the trace rows (0 keeps none)
        """
        if not z_grid:
            raise ConfigurationError("z grid must be nonempty")
        if not dataset:
            raise ConfigurationError("attack sweep needs a nonempty dataset")
        prior = prior or PriorInfo()

        bounds = {}
        if sigma > 0:
            jacobians = bounds_service.sample_jacobians(spec, params, dataset, h, cap, seed)
            for z in z_grid:
                exposure = float(np.mean(bounds_service.exposure_samples(jacobians, z)))
                bounds[z] = bounds_service.reconstruction_lower_bound(
                    spec.m, spec.param_count, z, sigma, exposure, prior.lambda1
                ).bound / spec.m
        else:
            logger.warning("Noiseless sweep: the lower bound is undefined and reported as nan")

        def one(trial: int) -> List[Tuple[SweepTrial, List[Tuple[int, float, float, int, int, float]]]]:
            sample = dataset[trial % len(dataset)]
            gradient = network_for(spec).gradient(params.values, sample.x, sample.target)
            g = GradientVector(values=gradient, model=spec)
            rows = []
            for zi, z in enumerate(z_grid):
                mask = defense_service.select_mask(g, z)
                defended = defense_service.apply_defense(g, mask, sigma, derive_seed(seed, trial, zi, 0))
                trial_cfg = cfg.model_copy(update={"seed": derive_seed(seed, trial, zi, 1)})
                result = self.dlg_attack(spec, params, defended, sample.target, trial_cfg, sample.x)
                bound = bounds.get(z, math.nan)
                record = SweepTrial(
                    trial=trial, z=z, sigma=sigma, mse=result.mse, bound=bound,
                    violated=bool(result.mse < bound),
                )
                trace_rows = []
                if trace_stride > 0:
                    for r, run_trace in enumerate(result.traces):
                        trace_rows.extend(
                            (trial, z, sigma, r, i, v) for i, v in enumerate(run_trace) if i % trace_stride == 0
                        )
                rows.append((record, trace_rows))
            return rows

        per_trial = ordered_map(one, list(range(trials)))
        records = [rec for rows in per_trial for rec, _ in rows]
        traces = [row for rows in per_trial for _, trace_rows in rows for row in trace_rows]

        summary = []
        for z in z_grid:
            mses = np.array([r.mse for r in records if r.z == z])
            summary.append(SweepSummary(
                z=z,
                sigma=sigma,
                mean_mse=float(mses.mean()),
                std_mse=float(mses.std()),
                bound=bounds.get(z, math.nan),
                violations=sum(r.violated for r in records if r.z == z),
            ))
            logger.info(f"Sweep z={z}: mean MSE {summary[-1].mean_mse:.6g}")
        return SweepResult(trials=records, summary=summary, traces=traces)


# Singleton instance
attack_service = AttackService()
