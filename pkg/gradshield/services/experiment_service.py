"""
Experiment Service

Dispatches a validated ExperimentConfig to its pipeline and persists the
results under a run directory keyed by the config hash.
"""
import math
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from gradshield.core.exceptions import ConfigurationError, GradShieldError, TrainingAbortedError
from gradshield.core.logging_config import logger
from gradshield.models.domain import DataSample, LabelRule, ModelSpec, ParameterVector, PriorInfo, SyntheticPrior
from gradshield.models.experiment import ExperimentConfig
from gradshield.models.schemas import (
    BOUND_CSV_HEADER,
    AttackConfig,
    ClientGradStats,
    DefenseConfig,
    FedsimConfig,
    PlotSeries,
    RoundRecord,
    RunLog,
)
from gradshield.services.artifact_service import artifact_service
from gradshield.services.attack_service import attack_service
from gradshield.services.bounds_service import bounds_service
from gradshield.services.config_service import config_service
from gradshield.services.dataset_service import dataset_service
from gradshield.services.fedsim_service import fedsim_service
from gradshield.services.model_service import model_service
from gradshield.services.utility_service import utility_service
from gradshield.utils.helpers import derive_seed, format_duration, format_float, relative_gap

ROUNDS_HEADER = ["round", "loss", "sigma_applied", "sigma_crit", "z_realized", "aborted"]
CLIENTS_HEADER = ["round", "client", "B", "mu_norm", "d", "n", "delta", "sigma_crit", "sigma_applied", "descent_fraction"]
TRIALS_HEADER = ["trial", "z", "sigma", "mse", "bound", "violated"]
TRACE_HEADER = ["trial", "z", "sigma", "restart", "iteration", "objective"]
SUMMARY_HEADER = ["z", "sigma", "mean_mse", "std_mse", "bound", "violations"]

Pipeline = Callable[[ExperimentConfig, Path], Dict[str, Any]]


class ExperimentService:
    """Experiment pipelines and run persistence"""

    def __init__(self):
        self.pipelines: Dict[str, Pipeline] = {
            "bound-curve": self.bound_curve,
            "attack-sweep": self.attack_sweep,
            "noise-utility": self.noise_utility,
            "adaptive-train": self.adaptive_train,
            "concentration": self.concentration,
            "descent": self.descent,
        }

    def run_experiment(self, config: ExperimentConfig, force: bool = False) -> Path:
        """
        Run one experiment and persist its artifacts

        Args:
            config: Validated configuration
            force: Overwrite a finished run of the same configuration

        Returns:
            The run directory

        Raises:
            ArtifactExistsError: same config already ran and force is off
            GradShieldError: any module error, after the manifest records it
        """
        config_hash = config_service.config_hash(config)
        directory = artifact_service.run_directory(config.output_dir, config.name or config.kind, config_hash, force)
        seeds = {"base": config.seed, "attack": config.attack.seed}
        started = time.perf_counter()
        logger.info(
            f"Experiment {config.kind} started",
            extra={"extra_fields": {"kind": config.kind, "model": config.model, "hash": config_hash[:12]}},
        )
        with artifact_service.lock(directory):
            (directory / "config.json").write_text(config_service.snapshot(config) + "\n")
            try:
                results = self.pipelines[config.kind](config, directory)
            except Exception as e:
                message = e.message if isinstance(e, GradShieldError) else f"{type(e).__name__}: {e}"
                logger.error(f"Experiment {config.kind} failed: {message}", exc_info=not isinstance(e, GradShieldError))
                artifact_service.write_manifest(directory, config_hash, seeds, "failed", error=message)
                raise
            artifact_service.write_manifest(directory, config_hash, seeds, "ok", extra=results)
        logger.info(f"Experiment {config.kind} finished in {format_duration(time.perf_counter() - started)}: {directory}")
        return directory

    # -- shared setup --------------------------------------------------------

    def model_spec(self, config: ExperimentConfig, model_id: Optional[str] = None) -> ModelSpec:
        return model_service.spec(model_id or config.model, num_classes=config.dataset.num_classes)

    def dataset(self, config: ExperimentConfig, spec: ModelSpec) -> Tuple[List[DataSample], PriorInfo]:
        """Training data for the config and the matching prior information"""
        section = config.dataset
        if section.source == "images":
            samples = dataset_service.load_image_dataset(section.directory)
            if not samples:
                raise ConfigurationError(f"no images found in {section.directory}")
            if samples[0].m != spec.m:
                raise ConfigurationError(f"images have m={samples[0].m}, model expects {spec.m}")
            return samples, PriorInfo(lambda1=section.lambda1)

        kind = section.label
        if spec.loss == "cross-entropy" and kind == "linear":
            kind = "argmax"
        elif spec.loss == "squared-error" and kind == "argmax":
            kind = "linear"
        rule = LabelRule(
            kind=kind,
            value=section.label_value,
            num_classes=max(2, spec.output_dim),
            teacher_scale=section.teacher_scale,
            noise=section.label_noise,
        )
        samples = dataset_service.generate_synthetic_dataset(
            spec.m, section.count, SyntheticPrior(tau=section.tau), rule, derive_seed(config.seed, 10)
        )
        return samples, PriorInfo.gaussian(section.tau)

    def parameters(self, config: ExperimentConfig, spec: ModelSpec) -> ParameterVector:
        return model_service.init_parameters(spec, derive_seed(config.seed, 11))

    # -- pipelines -----------------------------------------------------------

    def bound_curve(self, config: ExperimentConfig, directory: Path) -> Dict[str, Any]:
        section = config.bounds
        rows, series = [], []
        for model_id in section.models or [config.model]:
            spec = self.model_spec(config, model_id)
            samples, prior = self.dataset(config, spec)
            reports = bounds_service.bound_curve(
                spec, self.parameters(config, spec), samples, section.z_grid, section.sigma, prior,
                model=model_id, h=section.h, cap=section.sample_cap, seed=derive_seed(config.seed, 12),
            )
            rows.extend(r.csv_row() for r in reports)
            series.append(PlotSeries(
                name=f"bound-{model_id}", xlabel="z", ylabel="reconstruction error lower bound",
                points=[(r.z_requested, r.bound) for r in reports],
            ))
            series.append(PlotSeries(
                name=f"exposure-{model_id}", xlabel="z", ylabel="expected gradient exposure",
                points=[(r.z_requested, r.exposure) for r in reports],
            ))
        artifact_service.write_csv(directory / "bounds.csv", BOUND_CSV_HEADER, rows)
        artifact_service.emit_plot_data(series, directory / "plots")
        return {"reports": len(rows)}

    def attack_sweep(self, config: ExperimentConfig, directory: Path) -> Dict[str, Any]:
        section = config.attack
        spec = self.model_spec(config)
        samples, prior = self.dataset(config, spec)
        params = self.parameters(config, spec)
        cfg = AttackConfig(**section.model_dump(include=set(AttackConfig.model_fields)))

        trials, traces, summary, series = [], [], [], []
        violations = 0
        for sigma in section.sigmas:
            result = attack_service.attack_sweep(
                spec, params, samples, section.z_grid, sigma, cfg,
                trials=section.trials, prior=prior, seed=derive_seed(config.seed, 13),
                trace_stride=section.trace_stride, cap=section.sample_cap,
            )
            trials.extend(t.model_dump() for t in result.trials)
            traces.extend(dict(zip(TRACE_HEADER, row)) for row in result.traces)
            summary.extend(s.model_dump() for s in result.summary)
            violations += sum(t.violated for t in result.trials)
            tag = format_float(sigma)
            series.append(PlotSeries(
                name=f"mse-sigma{tag}", xlabel="z", ylabel="mean reconstruction MSE",
                points=[(s.z, s.mean_mse) for s in result.summary],
            ))
            series.append(PlotSeries(
                name=f"bound-sigma{tag}", xlabel="z", ylabel="reconstruction error lower bound",
                points=[(s.z, s.bound) for s in result.summary],
            ))
        artifact_service.write_csv(directory / "trials.csv", TRIALS_HEADER, trials)
        artifact_service.write_csv(directory / "summary.csv", SUMMARY_HEADER, summary)
        if section.trace_stride > 0:
            artifact_service.write_csv(directory / "traces.csv", TRACE_HEADER, traces)
        artifact_service.emit_plot_data(series, directory / "plots")
        return {"trials": len(trials), "violation_fraction": violations / len(trials)}

    def _train(
        self, config: ExperimentConfig, spec: ModelSpec, samples: Sequence[DataSample],
        defense: DefenseConfig, cfg: FedsimConfig, directory: Path, tag: str,
    ) -> RunLog:
        """Train and persist rounds/clients CSVs, including a partial log on abort"""
        try:
            log = fedsim_service.train(spec, samples, defense, cfg, derive_seed(config.seed, 14))
        except TrainingAbortedError as e:
            if e.run_log is not None:
                self.write_run_log(e.run_log, directory, tag, cfg)
            raise
        self.write_run_log(log, directory, tag, cfg)
        return log

    def write_run_log(self, log: RunLog, directory: Path, tag: str, cfg: FedsimConfig) -> None:
        artifact_service.write_csv(
            directory / f"rounds-{tag}.csv", ROUNDS_HEADER,
            (self.round_row(r) for r in log.rounds),
        )
        artifact_service.write_csv(
            directory / f"clients-{tag}.csv", CLIENTS_HEADER,
            (row for r in log.rounds for row in self.client_rows(r, cfg.delta_prob)),
        )

    def round_row(self, record: RoundRecord) -> Dict[str, Any]:
        return {
            "round": record.round,
            "loss": record.loss,
            "sigma_applied": record.sigma_applied,
            "sigma_crit": record.sigma_crit,
            "z_realized": record.z_realized,
            "aborted": record.aborted,
        }

    def client_rows(self, record: RoundRecord, delta_prob: float) -> List[Dict[str, Any]]:
        n = len(record.stats)
        rows = []
        for s in record.stats:
            crit = (
                utility_service.critical_noise(s.B, s.mu_norm, n, record.d, delta_prob).value
                if record.d > 0 else math.inf
            )
            fraction = record.descent_fraction[s.client] if record.descent_fraction else math.nan
            rows.append(self.client_row(record.round, s, n, record.d, delta_prob, crit, record.sigma_applied, fraction))
        return rows

    def client_row(
        self, round_index: int, stats: ClientGradStats, n: int, d: int, delta_prob: float,
        sigma_crit: float, sigma_applied: float, fraction: float,
    ) -> Dict[str, Any]:
        return {
            "round": round_index, "client": stats.client, "B": stats.B, "mu_norm": stats.mu_norm,
            "d": d, "n": n, "delta": delta_prob, "sigma_crit": sigma_crit,
            "sigma_applied": sigma_applied, "descent_fraction": fraction,
        }

    def loss_series(self, name: str, log: RunLog) -> PlotSeries:
        return PlotSeries(
            name=name, xlabel="round", ylabel="training loss",
            points=[(float(i), loss) for i, loss in enumerate(log.losses)],
        )

    def noise_utility(self, config: ExperimentConfig, directory: Path) -> Dict[str, Any]:
        """
        Fixed-σ training over the σ grid against the noiseless baseline

        The practical noise ceiling is the largest σ whose final loss stays
        within `tolerance` (relative) of the baseline.
        """
        section = config.fedsim
        spec = self.model_spec(config)
        samples, _ = self.dataset(config, spec)
        cfg = FedsimConfig(**section.model_dump(include=set(FedsimConfig.model_fields)))
        cfg = cfg.model_copy(update={"adaptive": False})

        grid = sorted(set(section.sigma_grid) | {0.0})
        logs = {}
        for sigma in grid:
            defense = config.defense.model_copy(update={"sigma": sigma})
            logs[sigma] = self._train(config, spec, samples, defense, cfg, directory, f"sigma{format_float(sigma)}")

        baseline = logs[0.0]
        base_losses = np.asarray(baseline.losses)
        rows, series = [], []
        ceiling = 0.0
        for sigma in grid:
            log = logs[sigma]
            gap = relative_gap(log.final_loss, baseline.final_loss)
            rms = float(np.sqrt(np.mean((np.asarray(log.losses) - base_losses) ** 2)))
            within = gap <= section.tolerance
            if within:
                ceiling = max(ceiling, sigma)
            rows.append({
                "sigma": sigma, "initial_loss": log.initial_loss, "final_loss": log.final_loss,
                "relative_gap": gap, "rms_deviation": rms, "within_tolerance": within,
                "converged": log.final_loss < 0.95 * log.initial_loss,
            })
            series.append(self.loss_series(f"loss-sigma{format_float(sigma)}", log))
        artifact_service.write_csv(
            directory / "noise_utility.csv",
            ["sigma", "initial_loss", "final_loss", "relative_gap", "rms_deviation", "within_tolerance", "converged"],
            rows,
        )
        artifact_service.emit_plot_data(series, directory / "plots")
        logger.info(f"Practical noise ceiling: {ceiling}")
        return {"noise_ceiling": ceiling, "baseline_final_loss": baseline.final_loss}

    def adaptive_train(self, config: ExperimentConfig, directory: Path) -> Dict[str, Any]:
        """Adaptive-σ training per z next to a noiseless baseline"""
        section = config.fedsim
        spec = self.model_spec(config)
        samples, _ = self.dataset(config, spec)
        cfg = FedsimConfig(**section.model_dump(include=set(FedsimConfig.model_fields)))

        baseline_cfg = cfg.model_copy(update={"adaptive": False})
        baseline_defense = config.defense.model_copy(update={"z": 0.0, "sigma": 0.0})
        baseline = self._train(config, spec, samples, baseline_defense, baseline_cfg, directory, "baseline")

        adaptive_cfg = cfg.model_copy(update={"adaptive": True})
        rows, series = [], [self.loss_series("loss-baseline", baseline)]
        worst = 0.0
        for z in section.z_grid:
            defense = config.defense.model_copy(update={"z": z})
            tag = f"z{format_float(z)}"
            log = self._train(config, spec, samples, defense, adaptive_cfg, directory, tag)
            gap = relative_gap(log.final_loss, baseline.final_loss)
            worst = max(worst, gap)
            rows.append({
                "z": z, "final_loss": log.final_loss, "baseline_final_loss": baseline.final_loss,
                "relative_gap": gap,
                "mean_sigma_applied": float(np.mean([r.sigma_applied for r in log.rounds])),
                "floored_rounds": sum(r.floored for r in log.rounds),
            })
            series.append(self.loss_series(f"loss-{tag}", log))
            series.append(PlotSeries(
                name=f"sigma-crit-{tag}", xlabel="round", ylabel="critical noise",
                points=[(float(r.round), r.sigma_crit) for r in log.rounds],
            ))
        artifact_service.write_csv(
            directory / "adaptive.csv",
            ["z", "final_loss", "baseline_final_loss", "relative_gap", "mean_sigma_applied", "floored_rounds"],
            rows,
        )
        artifact_service.emit_plot_data(series, directory / "plots")
        return {"worst_relative_gap": worst}

    def concentration(self, config: ExperimentConfig, directory: Path) -> Dict[str, Any]:
        section = config.concentration
        rows, series = [], []
        failures = 0
        for n in section.n_grid:
            for d in section.d_grid:
                exceedances = utility_service.exceedance_by_delta(
                    section.sigma, n, d, section.delta_grid, section.trials, derive_seed(config.seed, 15, n, d)
                )
                for delta, value in zip(section.delta_grid, exceedances):
                    tolerance = delta + 3 * math.sqrt(delta * (1 - delta) / section.trials)
                    passed = value <= tolerance
                    failures += not passed
                    rows.append({
                        "n": n, "d": d, "delta": delta,
                        "threshold": utility_service.gaussian_sum_norm_bound(section.sigma, n, d, delta),
                        "exceedance": value, "tolerance": tolerance, "passed": passed,
                    })
                series.append(PlotSeries(
                    name=f"exceedance-n{n}-d{d}", xlabel="delta", ylabel="empirical exceedance",
                    points=list(zip(section.delta_grid, exceedances)),
                ))
        artifact_service.write_csv(
            directory / "concentration.csv",
            ["n", "d", "delta", "threshold", "exceedance", "tolerance", "passed"], rows,
        )
        artifact_service.emit_plot_data(series, directory / "plots")
        return {"failures": failures}

    def descent_fixture(self, section, seed: int) -> List[ClientGradStats]:
        """Clients with the configured B and ‖μ‖ and seeded μ directions"""
        rng = np.random.default_rng(seed)
        stats = []
        for i, (B, norm) in enumerate(zip(section.B, section.mu_norms)):
            direction = rng.standard_normal(section.d)
            mu = direction / np.linalg.norm(direction) * norm
            stats.append(ClientGradStats(client=i, mu=mu.tolist(), mu_norm=float(norm), B=B, batch_size=1))
        return stats

    def descent(self, config: ExperimentConfig, directory: Path) -> Dict[str, Any]:
        section = config.descent
        stats = self.descent_fixture(section, derive_seed(config.seed, 16))
        n = len(stats)
        crits = [utility_service.critical_noise(s.B, s.mu_norm, n, section.d, section.delta_prob) for s in stats]
        positive = [c.value for c in crits if not c.nonpositive]
        if not positive:
            raise ConfigurationError("descent fixture needs at least one client with B > 0")
        reference = min(positive)

        rows = []
        per_client: Dict[int, List[Tuple[float, float]]] = {s.client: [] for s in stats}
        for index, k in enumerate(section.multipliers):
            sigma = k * reference
            fractions = utility_service.descent_check(
                stats, sigma, section.eta, section.trials, derive_seed(config.seed, 17, index), section.rule
            )
            for s, crit, fraction in zip(stats, crits, fractions):
                rows.append(self.client_row(index, s, n, section.d, section.delta_prob, crit.value, sigma, fraction))
                per_client[s.client].append((k, fraction))
        artifact_service.write_csv(directory / "descent.csv", CLIENTS_HEADER, rows)
        series = [
            PlotSeries(name=f"descent-client{c}", xlabel="sigma / min sigma_crit", ylabel="descent fraction", points=pts)
            for c, pts in per_client.items()
        ]
        artifact_service.emit_plot_data(series, directory / "plots")
        return {"sigma_crit": reference, "target": 1 - section.delta_prob}


# Singleton instance
experiment_service = ExperimentService()
