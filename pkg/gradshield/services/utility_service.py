"""
Utility Service

Per-client alignment statistics, the critical-noise threshold

    σ_crit = B / (√n ‖μ‖ (√d + √(2 ln(1/δ))))

the Gaussian concentration bound on summed client noise with a Monte Carlo
check, and the one-step descent checker.
"""
import math
from typing import List, Literal, Sequence

import numpy as np

from gradshield.core.exceptions import ConfigurationError
from gradshield.core.logging_config import logger
from gradshield.models.domain import DataSample, EncryptionMask, ModelSpec, ParameterVector
from gradshield.models.schemas import ClientGradStats, CriticalNoise
from gradshield.services.dataset_service import dataset_service
from gradshield.services.model_zoo import network_for
from gradshield.utils.helpers import chunk_sizes

Rule = Literal["sum", "average"]


class QuadraticFixture:
    """
    Per-client quadratic losses L_i(θ) = ½ (θ − c_i)ᵀ A (θ − c_i)

    Exact losses make the first-order descent prediction checkable.
    """

    def __init__(self, curvature: np.ndarray, centers: np.ndarray):
        self.A = np.asarray(curvature, dtype=np.float64)
        self.centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        if self.A.shape != (self.D, self.D):
            raise ConfigurationError("curvature must be D×D")

    @property
    def D(self) -> int:
        return self.centers.shape[1]

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    def loss(self, client: int, theta: np.ndarray) -> float:
        r = theta - self.centers[client]
        return 0.5 * float(r @ self.A @ r)

    def gradient(self, client: int, theta: np.ndarray) -> np.ndarray:
        return self.A @ (theta - self.centers[client])

    def first_order_gap(self, client: int, theta: np.ndarray, direction: np.ndarray, eta: float) -> float:
        """|exact loss change − first-order prediction| for θ → θ − η·direction"""
        exact = self.loss(client, theta - eta * direction) - self.loss(client, theta)
        predicted = -eta * float(self.gradient(client, theta) @ direction)
        return abs(exact - predicted)


class UtilityService:
    """Privacy-utility statistics and checks"""

    # -- statistics ----------------------------------------------------------

    def stats_from_gradients(
        self,
        client: int,
        own: np.ndarray,
        aggregate: np.ndarray,
        mask: EncryptionMask,
    ) -> ClientGradStats:
        """
        μ = mean_x R g_i(x), B = mean_x g_i(x)ᵀ G(x)

        Args:
            client: Client id
            own: batch × D per-sample gradients of this client
            aggregate: batch × D clean aggregates G(x), or one row shared by all
            mask: Encryption mask selecting the noisy coordinates
        """
        own = np.atleast_2d(np.asarray(own, dtype=np.float64))
        if own.shape[0] == 0 or own.size == 0:
            raise ConfigurationError(f"client {client} has an empty batch")
        aggregate = np.broadcast_to(np.atleast_2d(np.asarray(aggregate, dtype=np.float64)), own.shape)
        mu = own[:, mask.unencrypted].mean(axis=0)
        B = float(np.mean(np.einsum("ij,ij->i", own, aggregate)))
        return ClientGradStats(
            client=client,
            mu=mu.tolist(),
            mu_norm=float(np.linalg.norm(mu)),
            B=B,
            batch_size=own.shape[0],
        )

    def per_sample_gradients(self, spec: ModelSpec, params: ParameterVector, samples: Sequence[DataSample]) -> np.ndarray:
        if not samples:
            return np.zeros((0, spec.param_count))
        xs, targets = dataset_service.arrays(list(samples))
        return network_for(spec).gradients(params.values, xs, targets)

    def client_stats(
        self,
        spec: ModelSpec,
        params: ParameterVector,
        client_samples: Sequence[DataSample],
        mask: EncryptionMask,
        aggregate: np.ndarray,
        client: int = 0,
    ) -> ClientGradStats:
        """
        Statistics of one client given the clean aggregates

        `aggregate` holds G(x) = Σ_k g_k(x) for each of the client's samples
        (row j pairs with the client's j-th sample).
        """
        if not client_samples:
            raise ConfigurationError(f"client {client} has an empty batch")
        own = self.per_sample_gradients(spec, params, client_samples)
        return self.stats_from_gradients(client, own, aggregate, mask)

    def paired_stats(
        self,
        spec: ModelSpec,
        params: ParameterVector,
        client_datasets: Sequence[Sequence[DataSample]],
        mask: EncryptionMask,
    ) -> List[ClientGradStats]:
        """
        Statistics for every client with per-sample pairing across clients

        Sample j of every client forms one joint draw; batches are truncated to
        the smallest client.
        """
        size = min(len(ds) for ds in client_datasets)
        if size == 0:
            raise ConfigurationError("every client needs at least one sample")
        grads = [self.per_sample_gradients(spec, params, ds[:size]) for ds in client_datasets]
        G = np.sum(grads, axis=0)
        return [self.stats_from_gradients(i, g, G, mask) for i, g in enumerate(grads)]

    # -- thresholds ----------------------------------------------------------

    def _tail_term(self, d: int, delta_prob: float) -> float:
        if d < 1:
            raise ConfigurationError("noise dimension d must be >= 1")
        if not 0.0 < delta_prob < 1.0:
            raise ConfigurationError("delta_prob must lie in (0,1)")
        return math.sqrt(d) + math.sqrt(2.0 * math.log(1.0 / delta_prob))

    def critical_noise(self, B: float, mu_norm: float, n: int, d: int, delta_prob: float) -> CriticalNoise:
        """
        Largest per-client σ with one-step descent at probability ≥ 1 − δ

        Returns:
            CriticalNoise; `nonpositive` when B ≤ 0 and `infinite` when μ = 0
        """
        if n < 1:
            raise ConfigurationError("client count n must be >= 1")
        tail = self._tail_term(d, delta_prob)
        if B <= 0:
            value = B / (math.sqrt(n) * mu_norm * tail) if mu_norm > 0 else 0.0
            return CriticalNoise(value=value, nonpositive=True)
        if mu_norm == 0:
            return CriticalNoise(value=math.inf, infinite=True)
        return CriticalNoise(value=B / (math.sqrt(n) * mu_norm * tail))

    def gaussian_sum_norm_bound(self, sigma: float, n: int, d: int, delta_prob: float) -> float:
        """σ√n(√d + √(2 ln(1/δ)))"""
        if sigma < 0:
            raise ConfigurationError("sigma must be nonnegative")
        return sigma * math.sqrt(n) * self._tail_term(d, delta_prob)

    # -- Monte Carlo checks --------------------------------------------------

    def summed_noise_norms(self, sigma: float, n: int, d: int, trials: int, seed: int) -> np.ndarray:
        """‖Σ_i ε_i‖ per trial, ε_i ~ N(0, σ² I_d) drawn for each of n clients"""
        rng = np.random.default_rng(seed)
        norms = []
        for size in chunk_sizes(trials, n * d):
            S = rng.standard_normal((size, n, d)).sum(axis=1) * sigma
            norms.append(np.linalg.norm(S, axis=1))
        return np.concatenate(norms)

    def verify_concentration(self, sigma: float, n: int, d: int, delta_prob: float, trials: int, seed: int) -> float:
        """Fraction of trials with ‖Σε‖ ≥ gaussian_sum_norm_bound"""
        if sigma <= 0:
            raise ConfigurationError("concentration check needs sigma > 0")
        if trials < 10_000:
            raise ConfigurationError("concentration check needs at least 10000 trials")
        threshold = self.gaussian_sum_norm_bound(sigma, n, d, delta_prob)
        norms = self.summed_noise_norms(sigma, n, d, trials, seed)
        return float(np.count_nonzero(norms >= threshold)) / trials

    def exceedance_by_delta(
        self, sigma: float, n: int, d: int, deltas: Sequence[float], trials: int, seed: int
    ) -> List[float]:
        """verify_concentration for several δ on one set of draws"""
        norms = self.summed_noise_norms(sigma, n, d, trials, seed)
        return [
            float(np.count_nonzero(norms >= self.gaussian_sum_norm_bound(sigma, n, d, delta))) / trials
            for delta in deltas
        ]

    def _noise_sums(self, rng: np.random.Generator, size: int, n: int, d: int, sigma: float, rule: Rule) -> np.ndarray:
        E = rng.standard_normal((size, n, d)).sum(axis=1) * sigma
        return E / n if rule == "average" else E

    def descent_check(
        self,
        clients: Sequence[ClientGradStats],
        sigma: float,
        eta: float,
        trials: int,
        seed: int,
        rule: Rule = "sum",
    ) -> List[float]:
        """
        Per-client fraction of noise draws with first-order reduction
        η(B_i + μ_iᵀE) ≥ 0, E the aggregated client noise

        Under averaging both B_i and E carry the 1/n factor of Q = (G + Σε)/n.

        Args:
            clients: Statistics of all n participating clients (shared d)
            sigma: Per-client noise standard deviation
            eta: Step size
            trials: Noise draws
            seed: Seed
            rule: sum (E = Σε) or average (E = Σε / n)
        """
        if eta <= 0:
            raise ConfigurationError("step size eta must be positive")
        if not clients:
            raise ConfigurationError("descent check needs at least one client")
        n = len(clients)
        d = clients[0].d
        if any(c.d != d for c in clients):
            raise ConfigurationError("all clients must share the mask dimension d")
        mus = np.array([c.mu for c in clients]).reshape(n, d)
        Bs = np.array([c.B for c in clients])
        if rule == "average":
            Bs = Bs / n
        if sigma == 0 or d == 0:
            return [1.0 if B >= 0 else 0.0 for B in Bs]

        rng = np.random.default_rng(seed)
        hits = np.zeros(n, dtype=np.int64)
        for size in chunk_sizes(trials, n * d):
            E = self._noise_sums(rng, size, n, d, sigma, rule)
            reductions = eta * (Bs[None, :] + E @ mus.T)
            hits += np.count_nonzero(reductions >= 0, axis=0)
        fractions = (hits / trials).tolist()
        logger.debug("Descent check", extra={"extra_fields": {"sigma": sigma, "fractions": fractions}})
        return fractions

    def descent_check_exact(
        self,
        fixture: QuadraticFixture,
        theta: np.ndarray,
        mask: EncryptionMask,
        sigma: float,
        eta: float,
        trials: int,
        seed: int,
        rule: Rule = "sum",
    ) -> List[float]:
        """Per-client fraction of draws where the exact loss does not increase"""
        n = fixture.n
        grads = np.stack([fixture.gradient(i, theta) for i in range(n)])
        G = grads.sum(axis=0)
        if rule == "average":
            G = G / n
        before = np.array([fixture.loss(i, theta) for i in range(n)])
        rng = np.random.default_rng(seed)
        hits = np.zeros(n, dtype=np.int64)
        for size in chunk_sizes(trials, n * max(1, mask.d)):
            E = self._noise_sums(rng, size, n, mask.d, sigma, rule)
            Q = np.broadcast_to(G, (size, fixture.D)).copy()
            Q[:, mask.unencrypted] += E
            steps = theta[None, :] - eta * Q
            for i in range(n):
                r = steps - fixture.centers[i]
                after = 0.5 * np.einsum("ij,jk,ik->i", r, fixture.A, r)
                hits[i] += np.count_nonzero(after <= before[i])
        return (hits / trials).tolist()

    def aggregate_noise_variance(
        self, sigma: float, n: int, d: int, rounds: int, seed: int, rule: Rule = "sum"
    ) -> float:
        """Per-coordinate variance of the aggregated noise over simulated rounds"""
        rng = np.random.default_rng(seed)
        total = 0.0
        count = 0
        for size in chunk_sizes(rounds, n * d):
            E = self._noise_sums(rng, size, n, d, sigma, rule)
            total += float(np.sum(E * E))
            count += E.size
        return total / count


# Singleton instance
utility_service = UtilityService()
