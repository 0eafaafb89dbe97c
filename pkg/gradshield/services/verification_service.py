"""
Verification Service

Acceptance checks at desk-scale budgets, written to verify.csv. Each check
returns a CheckResult with the measured value next to its threshold.
"""
import math
import tempfile
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from gradshield.core.logging_config import logger
from gradshield.models.domain import EncryptionMask, LabelRule, PriorInfo, SyntheticPrior
from gradshield.models.schemas import AttackConfig, CheckResult, ClientGradStats, CriticalNoiseConfig, DefenseConfig, FedsimConfig
from gradshield.services.artifact_service import artifact_service
from gradshield.services.attack_service import attack_service
from gradshield.services.bounds_service import bounds_service
from gradshield.services.dataset_service import dataset_service
from gradshield.services.defense_service import defense_service
from gradshield.services.experiment_service import experiment_service
from gradshield.services.fedsim_service import fedsim_service
from gradshield.services.model_service import model_service
from gradshield.services.utility_service import utility_service
from gradshield.utils.helpers import derive_seed, format_float, relative_gap, round_half_away

VERIFY_HEADER = ["check", "passed", "value", "threshold", "detail"]
BOUND_GRID = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99]
FISHER_MODELS = ("linear", "small", "medium")

# (z, bound of the small model, bound of the large model, exposures measured rather than matched)
ComplexityPoint = Tuple[float, float, float, bool]


class VerificationService:
    """Runs the acceptance suite"""

    def __init__(self, seed: int = 42):
        self.seed = seed

    def _data(self, model_id: str, count: int, seed: int):
        spec = model_service.spec(model_id)
        kind = "linear" if spec.loss == "squared-error" else "argmax"
        rule = LabelRule(kind=kind, num_classes=max(2, spec.output_dim), teacher_scale=0.1, noise=0.3)
        samples = dataset_service.generate_synthetic_dataset(spec.m, count, SyntheticPrior(tau=1.0), rule, seed)
        params = model_service.init_parameters(spec, derive_seed(seed, 1))
        return spec, samples, params

    # -- bounds --------------------------------------------------------------

    def check_bound_monotone(self) -> CheckResult:
        """Nondecreasing in z, strictly increasing wherever the realized d drops"""
        spec, samples, params = self._data("small", 64, self.seed)
        reports = bounds_service.bound_curve(spec, params, samples, BOUND_GRID, 1e-2, PriorInfo.gaussian(1.0), cap=32)
        failures = 0
        for before, after in zip(reports, reports[1:]):
            if math.isinf(before.bound) and math.isinf(after.bound):
                continue
            if after.d < before.d:
                failures += not after.bound > before.bound
            else:
                failures += after.bound < before.bound
        return CheckResult(check="bound_increasing_in_z", passed=failures == 0, value=failures, threshold=0)

    def complexity_comparisons(self, grid: Sequence[float] = BOUND_GRID) -> List[ComplexityPoint]:
        """
        Small against large model at every grid z

        Points whose measured exposures are within 10% are compared as
        measured; the rest are re-evaluated at the geometric mean of the two
        exposures so that only d separates the models. Points where either
        exposure is zero are skipped.
        """
        prior = PriorInfo.gaussian(1.0)
        curves = {}
        for model_id in ("small", "large"):
            spec, samples, params = self._data(model_id, 16, self.seed)
            curves[model_id] = bounds_service.bound_curve(spec, params, samples, grid, 1e-2, prior, cap=8)
        points = []
        for z, small, large in zip(grid, curves["small"], curves["large"]):
            if small.exposure <= 0 or large.exposure <= 0:
                continue
            if relative_gap(small.exposure, large.exposure) < 0.1:
                points.append((z, small.bound, large.bound, True))
                continue
            shared = math.sqrt(small.exposure * large.exposure)
            small_bound, large_bound = (
                bounds_service.reconstruction_lower_bound(r.m, r.D, z, r.sigma, shared, r.lambda1).bound
                for r in (small, large)
            )
            points.append((z, small_bound, large_bound, False))
        return points

    def check_model_complexity(self) -> CheckResult:
        points = self.complexity_comparisons()
        failures = sum(not small > large for _, small, large, _ in points)
        measured = sum(1 for *_, as_measured in points if as_measured)
        return CheckResult(
            check="bound_smaller_model_higher", passed=bool(points) and failures == 0, value=failures, threshold=0,
            detail=f"{measured} measured and {len(points) - measured} exposure-matched grid points",
        )

    def check_exposure_monotone(self) -> CheckResult:
        spec, samples, params = self._data("small", 64, self.seed)
        jacobians = bounds_service.sample_jacobians(spec, params, samples, cap=64)
        values = [float(np.mean(bounds_service.exposure_samples(jacobians, z))) for z in BOUND_GRID]
        rises = sum(b > a for a, b in zip(values, values[1:]))
        return CheckResult(check="exposure_nonincreasing_in_z", passed=rises == 0, value=rises, threshold=0)

    def check_fisher_oracle(self, configs: int = 20, trials: int = 100_000) -> CheckResult:
        """Closed form against the score covariance on random (model, mask, σ) draws"""
        worst = 0.0
        for k in range(configs):
            seed = derive_seed(self.seed, 100, k)
            rng = np.random.default_rng(seed)
            model_id = FISHER_MODELS[int(rng.integers(len(FISHER_MODELS)))]
            spec, samples, params = self._data(model_id, 1, seed)
            g = model_service.param_gradient(spec, params, samples[0])
            mask = defense_service.select_mask(g, float(rng.uniform(0.0, 0.8)))
            sigma = float(10 ** rng.uniform(-2, 0))
            jac = model_service.input_jacobian_of_gradient(spec, params, samples[0])
            exact = bounds_service.fisher_information(jac, mask, sigma).entries
            estimate = bounds_service.empirical_fisher(spec, params, samples[0], mask, sigma, trials, seed).entries
            worst = max(worst, float(np.linalg.norm(estimate - exact) / np.linalg.norm(exact)))
        return CheckResult(
            check="fisher_oracle_equivalence", passed=worst <= 0.05, value=worst, threshold=0.05,
            detail=f"{configs} configurations, {trials} trials each",
        )

    # -- attack --------------------------------------------------------------

    def check_attack_bound(self, trials: int = 50, cfg: Optional[AttackConfig] = None) -> CheckResult:
        spec, samples, params = self._data("linear", 32, self.seed)
        cfg = cfg or AttackConfig()
        records = []
        for sigma in (1e-3, 1e-2):
            result = attack_service.attack_sweep(
                spec, params, samples, [0.0, 0.5, 0.9], sigma, cfg, trials=trials,
                prior=PriorInfo.gaussian(1.0), seed=derive_seed(self.seed, 200), cap=32,
            )
            records.extend(result.trials)
        fraction = sum(r.violated for r in records) / len(records)
        return CheckResult(
            check="attack_mse_above_bound", passed=fraction <= 0.05, value=fraction, threshold=0.05,
            detail=f"{len(records)} trials at {cfg.iterations} iterations x {cfg.restarts} restarts",
        )

    # -- utility -------------------------------------------------------------

    def check_concentration(self, trials: int = 100_000) -> CheckResult:
        failures = 0
        for n in (1, 3, 10):
            for d in (4, 64, 1024):
                deltas = (0.01, 0.05, 0.5)
                values = utility_service.exceedance_by_delta(1.0, n, d, deltas, trials, derive_seed(self.seed, 300, n, d))
                for delta, value in zip(deltas, values):
                    failures += value > delta + 3 * math.sqrt(delta * (1 - delta) / trials)
        return CheckResult(check="gaussian_sum_tail_bound", passed=failures == 0, value=failures, threshold=0)

    def descent_fixture(self) -> List[ClientGradStats]:
        rng = np.random.default_rng(derive_seed(self.seed, 400))
        stats = []
        for i, (B, norm) in enumerate(zip((1.0, 0.5, 2.0), (1.0, 1.0, 0.5))):
            mu = rng.standard_normal(1)
            stats.append(ClientGradStats(client=i, mu=(mu / np.linalg.norm(mu) * norm).tolist(), mu_norm=norm, B=B, batch_size=1))
        return stats

    def check_descent(self, trials: int = 10_000) -> CheckResult:
        stats = self.descent_fixture()
        crit = min(utility_service.critical_noise(s.B, s.mu_norm, 3, 1, 0.05).value for s in stats)
        safe = utility_service.descent_check(stats, 0.9 * crit, 0.01, trials, derive_seed(self.seed, 401))
        loud = utility_service.descent_check(stats, 10 * crit, 0.01, trials, derive_seed(self.seed, 402))
        passed = min(safe) >= 0.95 and min(loud) < 0.95
        return CheckResult(
            check="descent_guarantee", passed=passed, value=min(safe), threshold=0.95,
            detail=f"at 10x sigma_crit min fraction {format_float(min(loud))}",
        )

    # -- fedsim --------------------------------------------------------------

    def _fl_fixture(self):
        spec, samples, _ = self._data("linear", 300, derive_seed(self.seed, 500))
        return spec, samples, FedsimConfig(clients=3, rounds=50, eta=0.2)

    def check_noise_utility(self) -> CheckResult:
        spec, samples, cfg = self._fl_fixture()
        finals = {}
        initial = None
        for sigma in (0.0, 1e-6, 1e-3, 1.0):
            log = fedsim_service.train(spec, samples, DefenseConfig(sigma=sigma), cfg, self.seed)
            finals[sigma] = log.final_loss
            initial = log.initial_loss
        low_gap = relative_gap(finals[1e-6], finals[0.0])
        passed = low_gap < 0.01 and finals[1e-3] > finals[0.0] and finals[1.0] >= 0.95 * initial
        return CheckResult(
            check="noise_utility_regimes", passed=passed, value=low_gap, threshold=0.01,
            detail=f"final losses {', '.join(f'{k}:{format_float(v)}' for k, v in finals.items())}",
        )

    def check_adaptive(self) -> CheckResult:
        spec, samples, cfg = self._fl_fixture()
        baseline = fedsim_service.train(spec, samples, DefenseConfig(), cfg, self.seed).final_loss
        adaptive = cfg.model_copy(update={"adaptive": True})
        worst = 0.0
        for z in (0.0, 0.25, 0.5, 0.75, 0.9):
            log = fedsim_service.train(spec, samples, DefenseConfig(z=z), adaptive, self.seed)
            worst = max(worst, relative_gap(log.final_loss, baseline))
        return CheckResult(check="adaptive_noise_preserves_utility", passed=worst <= 0.02, value=worst, threshold=0.02)

    def check_sigma_crit_grows_with_z(self) -> CheckResult:
        stats = self.descent_fixture()
        D = 88
        sigmas = []
        for z in BOUND_GRID:
            d = D - round_half_away(z * D)
            decision = fedsim_service.adaptive_noise_schedule(stats, CriticalNoiseConfig(n=3, d=max(d, 1)))
            sigmas.append(decision.sigma_crit)
        drops = sum(b < a for a, b in zip(sigmas, sigmas[1:]))
        return CheckResult(check="sigma_crit_nondecreasing_in_z", passed=drops == 0, value=drops, threshold=0)

    # -- defense -------------------------------------------------------------

    def check_operator_algebra(self, cases: int = 20) -> CheckResult:
        rng = np.random.default_rng(derive_seed(self.seed, 600))
        failures = 0
        for _ in range(cases):
            D = int(rng.integers(1, 65))
            keep = np.flatnonzero(rng.random(D) < 0.6)
            mask = EncryptionMask(D=D, unencrypted=keep)
            R = defense_service.restriction_matrix(mask)
            P = defense_service.prolongation_matrix(mask)
            indicator = np.zeros((D, D))
            indicator[keep, keep] = 1.0
            ok = (
                np.array_equal(R @ R.T, np.eye(mask.d))
                and np.array_equal(P, R.T)
                and np.array_equal(R @ P, np.eye(mask.d))
                and np.array_equal(P @ P.T, indicator)
            )
            failures += not ok
        return CheckResult(check="operator_algebra", passed=failures == 0, value=failures, threshold=0)

    def check_determinism(self, rounds: int = 10) -> CheckResult:
        """Two seeded training runs write byte-identical rounds and clients CSVs"""
        spec, samples, cfg = self._fl_fixture()
        cfg = cfg.model_copy(update={"rounds": rounds, "adaptive": True, "descent_trials": 200})
        payloads = []
        with tempfile.TemporaryDirectory() as scratch:
            for attempt in range(2):
                directory = Path(scratch) / f"run-{attempt}"
                directory.mkdir()
                log = fedsim_service.train(spec, samples, DefenseConfig(z=0.5), cfg, self.seed)
                experiment_service.write_run_log(log, directory, "determinism", cfg)
                payloads.append([
                    (directory / name).read_bytes() for name in ("rounds-determinism.csv", "clients-determinism.csv")
                ])
        same = payloads[0] == payloads[1]
        return CheckResult(check="determinism", passed=same, value=float(same), threshold=1.0)

    def checks(self) -> List[Callable[[], CheckResult]]:
        return [
            self.check_bound_monotone,
            self.check_model_complexity,
            self.check_exposure_monotone,
            self.check_fisher_oracle,
            self.check_attack_bound,
            self.check_concentration,
            self.check_descent,
            self.check_noise_utility,
            self.check_adaptive,
            self.check_sigma_crit_grows_with_z,
            self.check_operator_algebra,
            self.check_determinism,
        ]

    def run(self, directory: Optional[Path] = None) -> List[CheckResult]:
        """Run every check, optionally writing verify.csv into directory"""
        results = []
        for check in self.checks():
            result = check()
            level = logger.info if result.passed else logger.warning
            level(f"{result.check}: {'pass' if result.passed else 'FAIL'} ({format_float(result.value)})")
            results.append(result)
        if directory is not None:
            Path(directory).mkdir(parents=True, exist_ok=True)
            artifact_service.write_csv(Path(directory) / "verify.csv", VERIFY_HEADER, (r.model_dump() for r in results))
        return results


# Singleton instance
verification_service = VerificationService()
