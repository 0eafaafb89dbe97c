"""
Model Service

Loss, exact parameter gradients and finite-difference input-Jacobians of those
gradients for the toy model zoo.
"""
from typing import Optional

import numpy as np

from gradshield.core.config import settings
from gradshield.core.exceptions import ConfigurationError, NumericError
from gradshield.core.logging_config import logger
from gradshield.models.domain import (
    DataSample,
    GradientInputJacobian,
    GradientVector,
    ModelSpec,
    ParameterVector,
)
from gradshield.services.model_zoo import ToyNetwork, build_model_spec, init_tensors, network_for


class ModelService:
    """Differentiable-model operations on (ModelSpec, ParameterVector, DataSample)"""

    def __init__(self, default_step: Optional[float] = None):
        self.default_step = default_step or settings.FD_STEP

    def network(self, spec: ModelSpec) -> ToyNetwork:
        return network_for(spec)

    def spec(self, model_id: str, input_dim: int = 16, num_classes: int = 4) -> ModelSpec:
        return build_model_spec(model_id, input_dim=input_dim, num_classes=num_classes)

    def init_parameters(self, spec: ModelSpec, seed: int, scale: Optional[float] = None) -> ParameterVector:
        """Seeded initial parameters (N(0, 1/fan_in) weights, zero biases)"""
        return ParameterVector.flatten(spec, init_tensors(spec, seed, scale))

    def _check(self, spec: ModelSpec, params: ParameterVector, sample: DataSample) -> None:
        if params.D != spec.param_count:
            raise ConfigurationError(f"parameter vector has D={params.D}, model expects {spec.param_count}")
        if sample.m != spec.m:
            raise ConfigurationError(f"sample has m={sample.m}, model expects {spec.m}")
        if spec.loss == "cross-entropy":
            if not float(sample.target).is_integer() or not 0 <= int(sample.target) < spec.output_dim:
                raise ConfigurationError(f"class target {sample.target} outside [0, {spec.output_dim})")

    def forward_loss(self, spec: ModelSpec, params: ParameterVector, sample: DataSample) -> float:
        """
        Scalar loss L(x) at the given parameters

        Squared error is (f − t)²/2; cross-entropy is log-sum-exp(f) − f[t].
        """
        self._check(spec, params, sample)
        return self.network(spec).loss(params.values, sample.x, sample.target)

    def param_gradient(self, spec: ModelSpec, params: ParameterVector, sample: DataSample) -> GradientVector:
        """Exact g(x) = ∇_θ L(x) by an analytic backward pass"""
        self._check(spec, params, sample)
        values = self.network(spec).gradient(params.values, sample.x, sample.target)
        return GradientVector(values=values, model=spec)

    def input_jacobian_of_gradient(
        self,
        spec: ModelSpec,
        params: ParameterVector,
        sample: DataSample,
        h: Optional[float] = None,
    ) -> GradientInputJacobian:
        """
        ∇_x g(x) by central differences of param_gradient

        Column i is (g(x + h_i e_i) − g(x − h_i e_i)) / (2 h_i) with
        h_i = h · max(1, |x_i|).
        """
        step = self.default_step if h is None else h
        if step <= 0:
            raise ConfigurationError("finite-difference step h must be positive")
        self._check(spec, params, sample)
        entries = jacobian_columns(self.network(spec), params.values, sample.x, sample.target, step)
        bad = np.argwhere(~np.isfinite(entries))
        if bad.size:
            logger.error("Non-finite gradient Jacobian entry", extra={"extra_fields": {"index": bad[0].tolist()}})
            raise NumericError("non-finite gradient Jacobian entry", index=bad[0])
        return GradientInputJacobian(entries=entries, step=step)


def jacobian_columns(network: ToyNetwork, values: np.ndarray, x: np.ndarray, target, step: float) -> np.ndarray:
    """Raw D×m central-difference Jacobian of the parameter gradient"""
    m = x.size
    entries = np.empty((network.D, m))
    for i in range(m):
        h_i = step * max(1.0, abs(x[i]))
        forward = x.copy()
        backward = x.copy()
        forward[i] += h_i
        backward[i] -= h_i
        entries[:, i] = (network.gradient(values, forward, target) - network.gradient(values, backward, target)) / (2.0 * h_i)
    return entries


# Singleton instance
model_service = ModelService()
