"""
Tests for the toy model zoo and its gradients
"""
import math

import numpy as np
import pytest

from gradshield.core.exceptions import ConfigurationError
from gradshield.models.domain import DataSample, ModelSpec, ParameterVector
from gradshield.services.model_service import model_service


SCALAR = ModelSpec(architecture="linear", input_dim=1, output_dim=1, loss="squared-error", bias=False)


def scalar_params(theta: float) -> ParameterVector:
    return ParameterVector.from_values(SCALAR, [theta])


def random_sample(spec: ModelSpec, rng: np.random.Generator) -> DataSample:
    target = int(rng.integers(spec.output_dim)) if spec.loss == "cross-entropy" else float(rng.normal())
    return DataSample(x=rng.normal(size=spec.m), target=target)


def naive_loss(spec: ModelSpec, params: ParameterVector, sample: DataSample) -> float:
    """Scalar-by-scalar forward pass for dense models"""
    tensors = params.unflatten()
    a = list(sample.x)
    n_dense = len(spec.dense_widths()) - 1
    for index in range(n_dense):
        W = tensors[f"dense{index}.weight"]
        b = tensors[f"dense{index}.bias"]
        out = []
        for row in range(W.shape[0]):
            total = b[row]
            for col in range(W.shape[1]):
                total += W[row, col] * a[col]
            out.append(math.tanh(total) if index < n_dense - 1 else total)
        a = out
    peak = max(a)
    log_norm = peak + math.log(sum(math.exp(v - peak) for v in a))
    return log_norm - a[int(sample.target)]


@pytest.mark.parametrize("model_id, D", [("linear", 17), ("small", 88), ("medium", 1140), ("large", 9540)])
def test_zoo_parameter_counts(model_id, D):
    """D is the exact sum of layer sizes"""
    spec = model_service.spec(model_id)
    assert spec.param_count == D
    assert model_service.init_parameters(spec, 0).D == D


def test_forward_loss_hand_example():
    """θ=1, x=2, t=0 gives (θx − t)²/2 = 2"""
    sample = DataSample(x=[2.0], target=0.0)
    assert model_service.forward_loss(SCALAR, scalar_params(1.0), sample) == 2.0


def test_forward_loss_zero_case():
    spec = model_service.spec("linear")
    params = ParameterVector.from_values(spec, np.zeros(spec.param_count))
    assert model_service.forward_loss(spec, params, DataSample(x=np.zeros(16), target=0.0)) == 0.0


def test_forward_loss_matches_naive_oracle():
    """Vectorised mlp forward agrees with a scalar loop"""
    spec = model_service.spec("medium")
    rng = np.random.default_rng(7)
    params = model_service.init_parameters(spec, 7)
    for _ in range(5):
        sample = random_sample(spec, rng)
        assert model_service.forward_loss(spec, params, sample) == pytest.approx(naive_loss(spec, params, sample), abs=1e-12)


def test_param_gradient_hand_example():
    """g = (θx − t)·x = 4 at θ=1, x=2, t=0"""
    g = model_service.param_gradient(SCALAR, scalar_params(1.0), DataSample(x=[2.0], target=0.0))
    np.testing.assert_array_equal(g.values, [4.0])


def test_param_gradient_vanishes_at_minimum():
    g = model_service.param_gradient(SCALAR, scalar_params(1.5), DataSample(x=[2.0], target=3.0))
    np.testing.assert_array_equal(g.values, [0.0])


@pytest.mark.parametrize("model_id", ["linear", "small", "large"])
def test_param_gradient_matches_finite_differences(model_id):
    """Analytic backward pass agrees with central differences of the loss"""
    spec = model_service.spec(model_id)
    rng = np.random.default_rng(3)
    params = model_service.init_parameters(spec, 3)
    sample = random_sample(spec, rng)
    g = model_service.param_gradient(spec, params, sample).values

    coords = rng.choice(spec.param_count, size=min(40, spec.param_count), replace=False)
    h = 1e-5
    for j in coords:
        plus = params.values.copy()
        minus = params.values.copy()
        plus[j] += h
        minus[j] -= h
        fd = (
            model_service.forward_loss(spec, ParameterVector.from_values(spec, plus), sample)
            - model_service.forward_loss(spec, ParameterVector.from_values(spec, minus), sample)
        ) / (2 * h)
        assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_param_gradient_directional_derivatives():
    """g·v matches central differences of the loss along v on 100 random (model, θ, x) triples"""
    rng = np.random.default_rng(12)
    model_ids = ["linear", "small", "medium", "large"]
    h = 1e-5
    for k in range(100):
        spec = model_service.spec(model_ids[k % len(model_ids)])
        params = model_service.init_parameters(spec, 100 + k)
        sample = random_sample(spec, rng)
        v = rng.normal(size=spec.param_count)
        v /= np.linalg.norm(v)
        g = model_service.param_gradient(spec, params, sample).values
        plus = ParameterVector.from_values(spec, params.values + h * v)
        minus = ParameterVector.from_values(spec, params.values - h * v)
        fd = (model_service.forward_loss(spec, plus, sample) - model_service.forward_loss(spec, minus, sample)) / (2 * h)
        assert float(g @ v) == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_input_jacobian_linear_example():
    """g = θx², so ∂g/∂x = 2θx = 6 at x=3"""
    jac = model_service.input_jacobian_of_gradient(SCALAR, scalar_params(1.0), DataSample(x=[3.0], target=0.0), h=1e-4)
    assert jac.entries.shape == (1, 1)
    assert jac.entries[0, 0] == pytest.approx(6.0, abs=1e-6)


def test_input_jacobian_zero_parameters():
    """θ=0 and t=0 make g identically zero in x"""
    jac = model_service.input_jacobian_of_gradient(SCALAR, scalar_params(0.0), DataSample(x=[1.7], target=0.0))
    np.testing.assert_array_equal(jac.entries, [[0.0]])


def test_input_jacobian_converges_with_step():
    """Halving h on a smooth mlp moves entries by a small amount only"""
    spec = model_service.spec("small")
    params = model_service.init_parameters(spec, 5)
    sample = random_sample(spec, np.random.default_rng(5))
    coarse = model_service.input_jacobian_of_gradient(spec, params, sample, h=1e-3).entries
    fine = model_service.input_jacobian_of_gradient(spec, params, sample, h=5e-4).entries
    assert coarse.shape == (88, 16)
    assert np.max(np.abs(coarse - fine)) < 1e-5


def test_input_jacobian_error_is_second_order():
    """Halving h cuts the central-difference error by about four"""
    spec = model_service.spec("small")
    params = model_service.init_parameters(spec, 6)
    sample = random_sample(spec, np.random.default_rng(6))
    coarse, mid, fine = (
        model_service.input_jacobian_of_gradient(spec, params, sample, h=h).entries for h in (1e-2, 5e-3, 2.5e-3)
    )
    ratio = np.linalg.norm(coarse - mid) / np.linalg.norm(mid - fine)
    assert 3.5 < ratio < 4.5


def test_input_jacobian_rejects_nonpositive_step():
    with pytest.raises(ConfigurationError):
        model_service.input_jacobian_of_gradient(SCALAR, scalar_params(1.0), DataSample(x=[1.0]), h=0.0)


def test_dimension_mismatch_rejected():
    spec = model_service.spec("small")
    params = model_service.init_parameters(spec, 0)
    with pytest.raises(ConfigurationError):
        model_service.forward_loss(spec, params, DataSample(x=np.zeros(3), target=0))
    with pytest.raises(ConfigurationError):
        model_service.forward_loss(spec, params, DataSample(x=np.zeros(16), target=9))


def test_init_parameters_deterministic():
    spec = model_service.spec("medium")
    a = model_service.init_parameters(spec, 11).values
    b = model_service.init_parameters(spec, 11).values
    np.testing.assert_array_equal(a, b)
    biases = params_named(spec, a, ".bias")
    assert np.all(biases == 0.0)


def params_named(spec: ModelSpec, values: np.ndarray, suffix: str) -> np.ndarray:
    tensors = ParameterVector.from_values(spec, values).unflatten()
    return np.concatenate([t.reshape(-1) for name, t in tensors.items() if name.endswith(suffix)])


@pytest.mark.parametrize("model_id", ["linear", "small", "medium", "large"])
def test_parameter_vector_round_trip(model_id):
    """unflatten then flatten restores θ and its layout"""
    spec = model_service.spec(model_id)
    params = model_service.init_parameters(spec, 13)
    tensors = params.unflatten()
    assert list(tensors) == [slot.name for slot in spec.layout()]
    restored = ParameterVector.flatten(spec, tensors)
    np.testing.assert_array_equal(restored.values, params.values)
    assert restored.layout == params.layout


def test_flatten_rejects_missing_tensor():
    spec = model_service.spec("small")
    tensors = model_service.init_parameters(spec, 0).unflatten()
    tensors.pop("dense0.bias")
    with pytest.raises(KeyError):
        ParameterVector.flatten(spec, tensors)
