"""
Tests for the selective-encryption channel
"""
import numpy as np
import pytest

from gradshield.core.exceptions import ConfigurationError, IngestionError, NumericError
from gradshield.models.domain import EncryptionMask, GradientVector, ModelSpec
from gradshield.services.defense_service import defense_service


SPEC4 = ModelSpec(architecture="linear", input_dim=3, output_dim=1, loss="squared-error", bias=True)


def gradient(values) -> GradientVector:
    return GradientVector(values=values, model=SPEC4)


def test_magnitude_mask_example():
    """|g| = [3,1,2,0] at z=0.5 encrypts {0,2}"""
    mask = defense_service.select_mask(gradient([3.0, -1.0, 2.0, 0.0]), 0.5)
    assert mask.unencrypted.tolist() == [1, 3]
    assert mask.encrypted.tolist() == [0, 2]
    assert mask.z == 0.5


def test_mask_boundaries():
    g = gradient([3.0, -1.0, 2.0, 0.0])
    assert defense_service.select_mask(g, 0.0).unencrypted.tolist() == [0, 1, 2, 3]
    assert defense_service.select_mask(g, 1.0).d == 0


def test_magnitude_ties_favor_lower_index():
    mask = defense_service.select_mask(np.array([1.0, -1.0]), 0.5)
    assert mask.encrypted.tolist() == [0]


def test_realized_z_within_one_over_D():
    g = np.random.default_rng(0).normal(size=37)
    for z in np.linspace(0.0, 1.0, 21):
        mask = defense_service.select_mask(g, float(z))
        assert abs(mask.z - z) <= 1.0 / 37 + 1e-12


def test_random_mask_is_seeded():
    g = np.arange(20.0)
    a = defense_service.select_mask(g, 0.3, strategy="random", seed=4)
    b = defense_service.select_mask(g, 0.3, strategy="random", seed=4)
    assert a.unencrypted.tolist() == b.unencrypted.tolist()
    assert a.d == 14


def test_fixed_indices_mask():
    mask = defense_service.select_mask(np.zeros(5), 0.0, strategy="fixed-indices", fixed_indices=[4, 1])
    assert mask.unencrypted.tolist() == [1, 4]
    assert mask.requested_z == pytest.approx(0.6)
    with pytest.raises(ConfigurationError):
        defense_service.select_mask(np.zeros(5), 0.0, strategy="fixed-indices", fixed_indices=[5])
    with pytest.raises(ConfigurationError):
        defense_service.select_mask(np.zeros(5), 0.0, strategy="fixed-indices", fixed_indices=[1, 1])


def test_mask_rejects_bad_inputs():
    with pytest.raises(ConfigurationError):
        defense_service.select_mask(np.zeros(4), 1.5)
    with pytest.raises(ConfigurationError):
        defense_service.select_mask(np.zeros(4), 0.5, strategy="loudest")
    with pytest.raises(NumericError):
        defense_service.select_mask(np.array([1.0, np.nan]), 0.5)


def test_restrict_and_prolong_examples():
    mask = EncryptionMask(D=4, unencrypted=[1, 3])
    u = defense_service.restrict(gradient([3.0, -1.0, 2.0, 0.0]), mask)
    np.testing.assert_array_equal(u, [-1.0, 0.0])
    np.testing.assert_array_equal(defense_service.prolong(u, mask), [0.0, -1.0, 0.0, 0.0])


def test_restrict_boundaries():
    g = gradient([3.0, -1.0, 2.0, 0.0])
    np.testing.assert_array_equal(defense_service.restrict(g, EncryptionMask(D=4, unencrypted=range(4))), g.values)
    empty = EncryptionMask(D=4, unencrypted=[])
    assert defense_service.restrict(g, empty).size == 0
    np.testing.assert_array_equal(defense_service.prolong(np.zeros(0), empty), np.zeros(4))


def test_restrict_prolong_round_trip():
    """R P = I_d on random masks"""
    rng = np.random.default_rng(1)
    for _ in range(100):
        D = int(rng.integers(1, 30))
        mask = EncryptionMask(D=D, unencrypted=np.flatnonzero(rng.random(D) < 0.5))
        u = rng.normal(size=mask.d)
        np.testing.assert_array_equal(defense_service.restrict(defense_service.prolong(u, mask), mask), u)


def test_operator_matrices():
    """Explicit binary R and P satisfy the projection identities"""
    rng = np.random.default_rng(2)
    for _ in range(20):
        D = int(rng.integers(1, 65))
        keep = np.flatnonzero(rng.random(D) < 0.6)
        mask = EncryptionMask(D=D, unencrypted=keep)
        R = defense_service.restriction_matrix(mask)
        P = defense_service.prolongation_matrix(mask)
        np.testing.assert_array_equal(R @ R.T, np.eye(mask.d))
        np.testing.assert_array_equal(P, R.T)
        np.testing.assert_array_equal(P.T @ P, np.eye(mask.d))
        diagonal = np.zeros(D)
        diagonal[keep] = 1.0
        np.testing.assert_array_equal(P @ P.T, np.diag(diagonal))


def test_length_mismatch_rejected():
    mask = EncryptionMask(D=4, unencrypted=[0])
    with pytest.raises(ConfigurationError):
        defense_service.restrict(np.zeros(5), mask)
    with pytest.raises(ConfigurationError):
        defense_service.prolong(np.zeros(2), mask)


def test_apply_defense_without_noise():
    g = gradient([3.0, -1.0, 2.0, 0.0])
    mask = defense_service.select_mask(g, 0.5)
    defended = defense_service.apply_defense(g, mask, 0.0, seed=0)
    np.testing.assert_array_equal(defended.y, [0.0, -1.0, 0.0, 0.0])


def test_defended_gradient_is_immutable():
    g = gradient([3.0, -1.0, 2.0, 0.0])
    defended = defense_service.apply_defense(g, defense_service.select_mask(g, 0.5), 1.0, seed=0)
    with pytest.raises(ValueError):
        defended.y[1] = 5.0


def test_apply_defense_rejects_negative_sigma():
    g = gradient([1.0, 1.0, 1.0, 1.0])
    with pytest.raises(ConfigurationError):
        defense_service.apply_defense(g, EncryptionMask(D=4, unencrypted=[0]), -1.0, seed=0)


def test_observation_moments():
    """Unencrypted coordinates are N(g_j, σ²); encrypted ones stay exactly zero"""
    g = gradient([3.0, -1.0, 2.0, 0.0])
    mask = defense_service.select_mask(g, 0.5)
    draws = defense_service.sample_observations(g, mask, 1.0, 400_000, seed=9)
    assert draws.shape == (400_000, 4)
    assert np.all(draws[:, mask.encrypted] == 0.0)
    column = draws[:, 1]
    assert abs(column.mean() - (-1.0)) < 0.01
    assert 0.99 <= column.var() <= 1.01


def test_observation_noise_covariance():
    """Empirical covariance of y − PRg matches σ² PPᵀ to 5% of σ² in every entry"""
    g = gradient([3.0, -1.0, 2.0, 0.5])
    mask = defense_service.select_mask(g, 0.25)
    sigma = 0.3
    draws = defense_service.sample_observations(g, mask, sigma, 100_000, seed=10)
    noise = draws - defense_service.prolong(defense_service.restrict(g, mask), mask)
    covariance = noise.T @ noise / noise.shape[0]
    P = defense_service.prolongation_matrix(mask)
    expected = sigma ** 2 * (P @ P.T)
    assert np.all(np.abs(covariance - expected) <= 0.05 * sigma ** 2)


def test_mask_file_round_trip(tmp_path):
    mask = EncryptionMask(D=6, unencrypted=[0, 2, 5])
    path = defense_service.write_mask(mask, tmp_path / "mask.txt")
    assert path.read_text() == "6 3\n0 2 5\n"
    assert defense_service.read_mask(path).unencrypted.tolist() == [0, 2, 5]


def test_mask_file_count_mismatch(tmp_path):
    path = tmp_path / "mask.txt"
    path.write_text("6 2\n0 2 5\n")
    with pytest.raises(IngestionError):
        defense_service.read_mask(path)


def test_defended_gradient_binary(tmp_path):
    g = gradient([3.0, -1.0, 2.0, 0.0])
    defended = defense_service.apply_defense(g, defense_service.select_mask(g, 0.25), 0.5, seed=123)
    path = defense_service.write_defended_gradient(defended, tmp_path / "y.gsdg")
    data = path.read_bytes()
    assert data[:5] == b"GSDG1"
    assert len(data) == 37 + 8 * 4 + 8 * 3
    loaded = defense_service.read_defended_gradient(path)
    np.testing.assert_array_equal(loaded.y, defended.y)
    assert loaded.mask.unencrypted.tolist() == defended.mask.unencrypted.tolist()
    assert (loaded.sigma, loaded.seed) == (0.5, 123)
