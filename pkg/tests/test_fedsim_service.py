"""
Tests for the federated training simulator
"""
import math

import numpy as np
import pytest
from pydantic import ValidationError

from gradshield.core.exceptions import ConfigurationError, TrainingAbortedError
from gradshield.models.domain import EncryptionMask, LabelRule, ParameterVector, SyntheticPrior
from gradshield.models.schemas import (
    ClientGradStats,
    CriticalNoiseConfig,
    DefenseConfig,
    FedsimConfig,
    RoundRecord,
    ServerState,
)
from gradshield.services.dataset_service import dataset_service
from gradshield.services.fedsim_service import fedsim_service
from gradshield.services.model_service import model_service
from gradshield.utils.helpers import relative_gap


@pytest.fixture(scope="module")
def regression():
    spec = model_service.spec("linear")
    rule = LabelRule(kind="linear", teacher_scale=0.1, noise=0.3)
    samples = dataset_service.generate_synthetic_dataset(16, 300, SyntheticPrior(), rule, seed=11)
    return spec, samples


def stats(client, mu, B):
    return ClientGradStats(client=client, mu=mu, mu_norm=float(np.linalg.norm(mu)), B=B, batch_size=1)


def test_noiseless_sum_aggregation_is_exact():
    grads = np.random.default_rng(0).normal(size=(3, 10))
    mask = EncryptionMask(D=10, unencrypted=np.arange(0, 10, 2))
    Q = fedsim_service.aggregate(grads, mask, 0.0, seed=1)
    np.testing.assert_allclose(Q, grads.sum(axis=0), rtol=0, atol=1e-12)


def test_average_rule_divides_by_clients():
    grads = np.random.default_rng(1).normal(size=(4, 6))
    mask = EncryptionMask(D=6, unencrypted=np.arange(6))
    np.testing.assert_allclose(fedsim_service.aggregate(grads, mask, 0.0, 0, rule="average"), grads.mean(axis=0))


def test_noise_stays_off_encrypted_coordinates():
    grads = np.zeros((3, 8))
    mask = EncryptionMask(D=8, unencrypted=[1, 4])
    for placement in ("client", "server"):
        Q = fedsim_service.aggregate(grads, mask, 1.0, seed=2, placement=placement)
        assert np.all(Q[mask.encrypted] == 0.0)
        assert np.all(Q[mask.unencrypted] != 0.0)


def test_partition_covers_dataset(regression):
    _, samples = regression
    for mode in ("iid", "label-skew"):
        clients = fedsim_service.partition(samples, 3, mode, seed=4)
        indices = sorted(i for c in clients for i in c.indices)
        assert indices == list(range(len(samples)))
        assert [len(c.indices) for c in clients] == [100, 100, 100]


def test_partition_rejects_bad_requests(regression):
    _, samples = regression
    with pytest.raises(ConfigurationError):
        fedsim_service.partition(samples[:2], 3)
    with pytest.raises(ConfigurationError):
        fedsim_service.partition(samples, 3, mode="dirichlet")


def test_schedule_symmetric_clients():
    """Identical clients share σ_crit and σ_t = κ·σ_crit"""
    same = [stats(i, [0.6, 0.8], 2.0) for i in range(3)]
    decision = fedsim_service.adaptive_noise_schedule(same, CriticalNoiseConfig(n=3, d=2, kappa=0.9), sigma_max=1.0)
    assert decision.sigma == pytest.approx(0.9 * decision.sigma_crit)
    assert not decision.floored


def test_schedule_floors_on_opposed_clients():
    opposed = [stats(0, [1.0], 1.0), stats(1, [-1.0], -1.0)]
    decision = fedsim_service.adaptive_noise_schedule(opposed, CriticalNoiseConfig(n=2, d=1))
    assert decision.floored
    assert decision.sigma == 1e-6


def test_schedule_grows_as_d_shrinks():
    clients = [stats(0, [1.0], 1.0), stats(1, [0.5], 0.7)]
    sigmas = [
        fedsim_service.adaptive_noise_schedule(clients, CriticalNoiseConfig(n=2, d=d), sigma_max=10.0).sigma
        for d in (64, 32, 8, 1)
    ]
    assert sigmas == sorted(sigmas)


def test_schedule_degenerate_cases():
    clients = [stats(0, [0.0], 1.0)]
    capped = fedsim_service.adaptive_noise_schedule(clients, CriticalNoiseConfig(n=1, d=1), sigma_max=0.01)
    assert capped.capped and capped.sigma == 0.01
    closed = fedsim_service.adaptive_noise_schedule(clients, CriticalNoiseConfig(n=1, d=0))
    assert closed.sigma == 0.0


def test_schedule_caps_large_thresholds():
    """A huge finite σ_crit is clamped to sigma_max; σ_crit itself is kept raw"""
    clients = [stats(0, [1e-9], 50.0), stats(1, [2e-9], 40.0)]
    decision = fedsim_service.adaptive_noise_schedule(clients, CriticalNoiseConfig(n=2, d=1), sigma_max=0.01)
    assert decision.capped
    assert decision.sigma == 0.01
    assert decision.sigma_crit > 1e9


def test_schedule_floors_tiny_thresholds():
    clients = [stats(0, [1e3], 1e-12)]
    decision = fedsim_service.adaptive_noise_schedule(clients, CriticalNoiseConfig(n=1, d=4), floor=1e-6)
    assert decision.floored
    assert decision.sigma == 1e-6
    assert decision.sigma_crit < 1e-6


def test_schedule_ignores_aggregation_rule(regression):
    """Sum and average rounds pick the same σ and record the unscaled σ_crit"""
    spec, samples = regression
    server = ServerState(params=model_service.init_parameters(spec, 0), eta=0.2)
    clients = fedsim_service.partition(samples, 3)
    records = []
    for rule in ("sum", "average"):
        cfg = FedsimConfig(adaptive=True, rule=rule, sigma_max=1e6)
        record, _, _ = fedsim_service.run_round(spec, server, clients, samples, DefenseConfig(z=0.5), cfg, seed=0)
        records.append(record)
    assert records[0].sigma_applied == records[1].sigma_applied
    assert records[0].sigma_crit == records[1].sigma_crit
    if not records[0].floored:
        assert records[0].sigma_applied == pytest.approx(min(0.9 * records[0].sigma_crit, 1e6))


def test_round_record_rejects_unsafe_noise():
    with pytest.raises(ValidationError):
        RoundRecord(round=0, sigma_crit=0.1, sigma_applied=0.2, adaptive=True, loss=1.0, z_realized=0.0, d=4)
    RoundRecord(round=0, sigma_crit=0.1, sigma_applied=0.2, adaptive=False, loss=1.0, z_realized=0.0, d=4)
    RoundRecord(round=0, sigma_crit=1e-9, sigma_applied=1e-6, adaptive=True, floored=True, loss=1.0, z_realized=0.0, d=4)


def test_single_client_descends():
    """One client, no encryption, no noise: plain gradient descent"""
    spec = model_service.spec("linear")
    samples = dataset_service.generate_synthetic_dataset(16, 40, SyntheticPrior(), LabelRule(kind="linear"), seed=3)
    log = fedsim_service.train(spec, samples, DefenseConfig(), FedsimConfig(clients=1, rounds=10, eta=0.1), seed=3)
    losses = log.losses
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_aborted_round_keeps_parameters(regression):
    """Overflowing gradients abort the round and leave θ untouched"""
    spec, samples = regression
    params = ParameterVector.from_values(spec, np.full(spec.param_count, 1e308))
    server = ServerState(params=params, eta=0.2)
    clients = fedsim_service.partition(samples, 3)
    with np.errstate(all="ignore"):
        record, after, _ = fedsim_service.run_round(spec, server, clients, samples, DefenseConfig(), FedsimConfig(), seed=0)
    assert record.aborted
    assert after is server
    assert after.round == 0


def test_training_abort_carries_partial_log(regression):
    spec, samples = regression
    params = ParameterVector.from_values(spec, np.full(spec.param_count, 1e308))
    with np.errstate(all="ignore"), pytest.raises(TrainingAbortedError) as caught:
        fedsim_service.train(spec, samples, DefenseConfig(), FedsimConfig(rounds=5), seed=0, params=params)
    log = caught.value.run_log
    assert log.aborted
    assert len(log.rounds) == 1


def test_round_advances_server(regression):
    spec, samples = regression
    server = ServerState(params=model_service.init_parameters(spec, 0), eta=0.2)
    clients = fedsim_service.partition(samples, 3)
    record, after, mask = fedsim_service.run_round(spec, server, clients, samples, DefenseConfig(z=0.5), FedsimConfig(), seed=0)
    assert not record.aborted
    assert after.round == 1
    assert mask.d == record.d == 8
    assert record.loss < fedsim_service.global_loss(spec, server.params, samples)


def test_training_is_reproducible(regression):
    spec, samples = regression
    cfg = FedsimConfig(rounds=5, adaptive=True)
    a = fedsim_service.train(spec, samples, DefenseConfig(z=0.5), cfg, seed=9)
    b = fedsim_service.train(spec, samples, DefenseConfig(z=0.5), cfg, seed=9)
    assert a.losses == b.losses
    assert [r.sigma_applied for r in a.rounds] == [r.sigma_applied for r in b.rounds]


def test_adaptive_rounds_respect_critical_noise(regression):
    spec, samples = regression
    log = fedsim_service.train(spec, samples, DefenseConfig(z=0.25), FedsimConfig(rounds=8, adaptive=True), seed=1)
    for record in log.rounds:
        assert len(record.stats) == 3
        if record.floored:
            assert record.sigma_applied == 1e-6
        elif math.isfinite(record.sigma_crit):
            assert record.sigma_applied <= record.sigma_crit * (1 + 1e-12)


def test_adaptive_noise_never_exceeds_cap(regression):
    """High encryption ratios have huge thresholds; applied σ stays at or below sigma_max"""
    spec, samples = regression
    cfg = FedsimConfig(rounds=10, adaptive=True, sigma_max=1e-2)
    log = fedsim_service.train(spec, samples, DefenseConfig(z=0.9), cfg, seed=42)
    assert all(r.sigma_applied <= 1e-2 for r in log.rounds)
    assert all(math.isfinite(r.loss) for r in log.rounds)
    assert log.final_loss < log.initial_loss


def test_fixed_mask_mode_keeps_dimension(regression):
    spec, samples = regression
    cfg = FedsimConfig(rounds=4, mask_mode="fixed")
    log = fedsim_service.train(spec, samples, DefenseConfig(z=0.5), cfg, seed=2)
    assert {r.d for r in log.rounds} == {8}


def test_descent_fractions_recorded(regression):
    spec, samples = regression
    cfg = FedsimConfig(rounds=2, descent_trials=500, adaptive=True)
    log = fedsim_service.train(spec, samples, DefenseConfig(z=0.5), cfg, seed=2)
    assert all(len(r.descent_fraction) == 3 for r in log.rounds)


@pytest.mark.slow
def test_noise_regimes(regression):
    """Tiny noise tracks the baseline; σ = 1 stalls training"""
    spec, samples = regression
    cfg = FedsimConfig()
    baseline = fedsim_service.train(spec, samples, DefenseConfig(sigma=0.0), cfg, seed=42)
    tiny = fedsim_service.train(spec, samples, DefenseConfig(sigma=1e-6), cfg, seed=42)
    loud = fedsim_service.train(spec, samples, DefenseConfig(sigma=1.0), cfg, seed=42)
    assert relative_gap(tiny.final_loss, baseline.final_loss) < 0.01
    assert loud.final_loss >= 0.95 * loud.initial_loss


@pytest.mark.slow
def test_adaptive_noise_preserves_utility(regression):
    """Adaptive σ at any encryption ratio lands within 2% of the noiseless run"""
    spec, samples = regression
    baseline = fedsim_service.train(spec, samples, DefenseConfig(sigma=0.0), FedsimConfig(), seed=42).final_loss
    cfg = FedsimConfig(adaptive=True)
    for z in (0.0, 0.25, 0.5, 0.75, 0.9):
        final = fedsim_service.train(spec, samples, DefenseConfig(z=z), cfg, seed=42).final_loss
        assert relative_gap(final, baseline) < 0.02
