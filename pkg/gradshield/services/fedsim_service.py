"""
Federated Simulation Service

Gradient-sharing federated learning with every client participating in every
round:

1. clients compute batch-mean gradients on their shards
2. one encryption mask per round from the clean aggregate's magnitudes
3. each client adds N(0, σ²) noise on the unencrypted coordinates
4. the server sums (or averages) and steps θ ← θ − ηQ

With the adaptive scheduler σ is set per round from the clients' alignment
statistics.
"""
import math
import time
from typing import List, Optional, Sequence, Tuple

import numpy as np

from gradshield.core.exceptions import ConfigurationError, TrainingAbortedError
from gradshield.core.logging_config import logger
from gradshield.models.domain import DataSample, EncryptionMask, GradientVector, ModelSpec, ParameterVector
from gradshield.models.schemas import (
    ClientGradStats,
    ClientState,
    CriticalNoiseConfig,
    DefenseConfig,
    FedsimConfig,
    NoiseDecision,
    RoundRecord,
    RunLog,
    ServerState,
)
from gradshield.services.defense_service import defense_service
from gradshield.services.model_service import model_service
from gradshield.services.model_zoo import network_for
from gradshield.services.utility_service import utility_service
from gradshield.utils.helpers import derive_seed, ordered_map


class FedsimService:
    """Deterministic federated training simulator"""

    def partition(
        self,
        dataset: Sequence[DataSample],
        clients: int,
        mode: str = "iid",
        seed: int = 0,
    ) -> List[ClientState]:
        """
        Split sample indices into disjoint shards covering the dataset

        Args:
            dataset: Training samples
            clients: Number of clients
            mode: iid (seeded shuffle, equal shards) | label-skew (sorted by target)
            seed: Shuffle seed

        Returns:
            One ClientState per client
        """
        if clients < 1 or len(dataset) < clients:
            raise ConfigurationError(f"cannot split {len(dataset)} samples across {clients} clients")
        if mode == "iid":
            order = np.random.default_rng(seed).permutation(len(dataset))
        elif mode == "label-skew":
            order = np.argsort([float(s.target) for s in dataset], kind="stable")
        else:
            raise ConfigurationError(f"unknown partition mode '{mode}'")
        shards = np.array_split(order, clients)
        return [
            ClientState(client=i, indices=sorted(int(j) for j in shard), stream=derive_seed(seed, i))
            for i, shard in enumerate(shards)
        ]

    def global_loss(self, spec: ModelSpec, params: ParameterVector, dataset: Sequence[DataSample]) -> float:
        """Mean training loss over all samples"""
        network = network_for(spec)
        return float(np.mean([network.loss(params.values, s.x, s.target) for s in dataset]))

    def adaptive_noise_schedule(
        self,
        stats: Sequence[ClientGradStats],
        config: CriticalNoiseConfig,
        floor: float = 1e-6,
        sigma_max: float = 1e-2,
    ) -> NoiseDecision:
        """
        σ_t = min(κ · min_i σ_crit,i, sigma_max)

        Floored at `floor` when any client has B ≤ 0, capped at `sigma_max` when
        the threshold is infinite or larger than the cap, and 0 when no
        coordinate is left unencrypted. The aggregation rule does not enter:
        averaging divides signal and noise alike, so the descent sign and the
        threshold are the same under both rules.
        """
        if config.d == 0:
            return NoiseDecision(sigma=0.0, sigma_crit=math.inf)
        crits = [utility_service.critical_noise(s.B, s.mu_norm, config.n, config.d, config.delta_prob) for s in stats]
        minimum = min(c.value for c in crits)
        if any(c.nonpositive for c in crits):
            logger.debug(f"Nonpositive alignment, noise floored at {floor}")
            return NoiseDecision(sigma=floor, sigma_crit=minimum, floored=True)
        scaled = config.kappa * minimum
        if scaled > sigma_max:
            return NoiseDecision(sigma=sigma_max, sigma_crit=minimum, capped=True)
        if scaled < floor:
            return NoiseDecision(sigma=floor, sigma_crit=minimum, floored=True)
        return NoiseDecision(sigma=scaled, sigma_crit=minimum)

    def aggregate(
        self,
        client_gradients: np.ndarray,
        mask: EncryptionMask,
        sigma: float,
        seed: int,
        rule: str = "sum",
        placement: str = "client",
    ) -> np.ndarray:
        """
        Q = G + P Σ_i ε_i under the sum rule, divided by n under averaging

        Client placement draws ε_i from stream derive_seed(seed, i) per client;
        server placement adds one draw once to the aggregate.
        """
        n, D = client_gradients.shape
        Q = np.zeros(D)
        for i in range(n):
            Q += client_gradients[i]
            if sigma > 0 and placement == "client":
                noise = np.random.default_rng(derive_seed(seed, i)).normal(0.0, sigma, size=mask.d)
                Q[mask.unencrypted] += noise
        if sigma > 0 and placement == "server":
            Q[mask.unencrypted] += np.random.default_rng(derive_seed(seed, n)).normal(0.0, sigma, size=mask.d)
        return Q / n if rule == "average" else Q

    def run_round(
        self,
        spec: ModelSpec,
        server: ServerState,
        clients: Sequence[ClientState],
        dataset: Sequence[DataSample],
        defense: DefenseConfig,
        cfg: FedsimConfig,
        seed: int,
        fixed_mask: Optional[EncryptionMask] = None,
    ) -> Tuple[RoundRecord, ServerState, EncryptionMask]:
        """
        One federated round

        Returns:
            (record, next server state, mask used); an aborted round leaves the
            parameters unchanged
        """
        started = time.perf_counter()
        params = server.params
        network = network_for(spec)
        shards = [[dataset[j] for j in c.indices] for c in clients]
        for c, shard in zip(clients, shards):
            if not shard:
                raise ConfigurationError(f"client {c.client} has an empty batch")

        def local(shard: List[DataSample]) -> np.ndarray:
            return utility_service.per_sample_gradients(spec, params, shard)

        per_sample = ordered_map(local, shards)
        grads = np.stack([g.mean(axis=0) for g in per_sample])
        G = grads.sum(axis=0)

        if fixed_mask is not None:
            mask = fixed_mask
        else:
            g_view = GradientVector(values=np.nan_to_num(G), model=spec)
            mask = defense_service.select_mask(
                g_view, defense.z, defense.strategy, derive_seed(seed, 1), defense.fixed_indices
            )

        if not np.all(np.isfinite(grads)):
            record = self._aborted(spec, server, dataset, mask, defense.sigma, cfg, "client gradient", G, started)
            return record, server, mask

        if cfg.granularity == "sample":
            stats = utility_service.paired_stats(spec, params, shards, mask)
        else:
            stats = [utility_service.stats_from_gradients(i, grads[i], G, mask) for i in range(len(clients))]

        n = len(clients)
        noise_config = CriticalNoiseConfig(n=n, d=mask.d, delta_prob=cfg.delta_prob, kappa=cfg.kappa, eta=cfg.eta)
        decision = self.adaptive_noise_schedule(stats, noise_config, cfg.noise_floor, cfg.sigma_max)
        sigma = decision.sigma if cfg.adaptive else defense.sigma

        Q = self.aggregate(grads, mask, sigma, derive_seed(seed, 2), cfg.rule, cfg.noise_placement)
        descent = []
        if cfg.descent_trials > 0 and mask.d > 0:
            descent = utility_service.descent_check(stats, sigma, cfg.eta, cfg.descent_trials, derive_seed(seed, 3), cfg.rule)

        common = dict(
            round=server.round,
            stats=stats,
            sigma_crit=decision.sigma_crit,
            sigma_applied=sigma,
            adaptive=cfg.adaptive,
            floored=cfg.adaptive and decision.floored,
            z_realized=mask.z,
            d=mask.d,
            descent_fraction=descent,
        )
        if not np.all(np.isfinite(Q)):
            record = self._aborted(spec, server, dataset, mask, sigma, cfg, "aggregate", Q, started, common)
            return record, server, mask

        updated = ParameterVector(values=params.values - server.eta * Q, layout=params.layout)
        loss = float(np.mean([network.loss(updated.values, s.x, s.target) for s in dataset]))
        record = RoundRecord(loss=loss, wall_time=time.perf_counter() - started, **common)
        next_server = server.model_copy(update={"params": updated, "round": server.round + 1})
        return record, next_server, mask

    def _aborted(
        self,
        spec: ModelSpec,
        server: ServerState,
        dataset: Sequence[DataSample],
        mask: EncryptionMask,
        sigma: float,
        cfg: FedsimConfig,
        what: str,
        values: np.ndarray,
        started: float,
        common: Optional[dict] = None,
    ) -> RoundRecord:
        """Record of a round whose gradients or aggregate went non-finite"""
        index = int(np.argwhere(~np.isfinite(values))[0][0])
        logger.error(
            f"Round {server.round} aborted: non-finite {what}",
            extra={"extra_fields": {"round": server.round, "index": index}},
        )
        common = common or dict(
            round=server.round, sigma_applied=sigma, adaptive=cfg.adaptive, z_realized=mask.z, d=mask.d,
        )
        return RoundRecord(
            loss=self.global_loss(spec, server.params, dataset), aborted=True,
            wall_time=time.perf_counter() - started, **common,
        )

    def train(
        self,
        spec: ModelSpec,
        dataset: Sequence[DataSample],
        defense: DefenseConfig,
        cfg: FedsimConfig,
        seed: int,
        params: Optional[ParameterVector] = None,
    ) -> RunLog:
        """
        Run cfg.rounds rounds from seeded initial parameters

        Raises:
            TrainingAbortedError: a round aborted; the partial log is attached
        """
        if params is None:
            params = model_service.init_parameters(spec, derive_seed(seed, 0), cfg.init_scale)
        clients = self.partition(dataset, cfg.clients, cfg.partition, derive_seed(seed, 1))
        server = ServerState(params=params, rule=cfg.rule, eta=cfg.eta)
        log = RunLog(initial_loss=self.global_loss(spec, params, dataset))
        logger.info(
            "Training started",
            extra={"extra_fields": {"rounds": cfg.rounds, "clients": cfg.clients, "z": defense.z,
                                    "sigma": defense.sigma, "adaptive": cfg.adaptive}},
        )

        fixed_mask = None
        for r in range(cfg.rounds):
            record, server, mask = self.run_round(
                spec, server, clients, dataset, defense, cfg, derive_seed(seed, 2, r), fixed_mask
            )
            if cfg.mask_mode == "fixed":
                fixed_mask = mask
            log.rounds.append(record)
            if record.aborted:
                log.aborted = True
                raise TrainingAbortedError(f"training aborted in round {r}", run_log=log)
            logger.debug(f"Round {r}: loss {record.loss:.6g} sigma {record.sigma_applied:.3g}")

        logger.info(f"Training finished: final loss {log.final_loss:.6g}")
        return log


# Singleton instance
fedsim_service = FedsimService()
