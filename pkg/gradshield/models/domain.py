"""
Array-carrying domain types

Numeric payloads are numpy float64 / int64 arrays held by pydantic models with
arbitrary types allowed. Validators coerce inputs and enforce the type invariants.
"""
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator


class ArrayModel(BaseModel):
    """Base for models carrying numpy arrays"""

    model_config = ConfigDict(arbitrary_types_allowed=True)


def _float_vector(value, name: str) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim != 1:
        array = array.reshape(-1)
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} must contain only finite values")
    return array


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


# ---------------------------------------------------------------------------
# nn-core
# ---------------------------------------------------------------------------


class DataSample(ArrayModel):
    """One input vector x ∈ R^m with its target"""

    x: np.ndarray
    target: Union[int, float] = 0.0

    @field_validator("x", mode="before")
    @classmethod
    def validate_x(cls, v):
        array = _float_vector(v, "x")
        if array.size < 1:
            raise ValueError("x must have at least one feature")
        return array

    @field_validator("target")
    @classmethod
    def validate_target(cls, v):
        if not np.isfinite(v):
            raise ValueError("target must be finite")
        return v

    @property
    def m(self) -> int:
        return int(self.x.size)


class LayerSlot(BaseModel):
    """Position of one parameter tensor inside the flat vector"""

    model_config = ConfigDict(frozen=True)

    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class ModelSpec(BaseModel):
    """Architecture of a toy network; D is derived from the layer shapes"""

    model_config = ConfigDict(frozen=True)

    architecture: Literal["linear", "mlp", "tiny-conv"]
    input_dim: int = Field(..., ge=1, description="m, input dimension")
    hidden: Tuple[int, ...] = ()
    output_dim: int = Field(1, ge=1)
    loss: Literal["squared-error", "cross-entropy"] = "squared-error"
    bias: bool = True
    image_shape: Optional[Tuple[int, int, int]] = None
    conv_filters: int = 0
    kernel_size: int = 0

    @model_validator(mode="after")
    def validate_architecture(self):
        if any(width < 1 for width in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.architecture == "linear" and self.hidden:
            raise ValueError("linear models take no hidden layers")
        if self.architecture == "tiny-conv":
            if self.image_shape is None:
                raise ValueError("tiny-conv needs image_shape (h, w, c)")
            h, w, c = self.image_shape
            if h * w * c != self.input_dim:
                raise ValueError("image_shape must multiply out to input_dim")
            if self.conv_filters < 1 or not 1 <= self.kernel_size <= min(h, w):
                raise ValueError("tiny-conv needs conv_filters >= 1 and 1 <= kernel_size <= min(h, w)")
        if self.loss == "squared-error" and self.output_dim != 1:
            raise ValueError("squared-error models have a single output")
        if self.loss == "cross-entropy" and self.output_dim < 2:
            raise ValueError("cross-entropy models need at least two classes")
        return self

    @property
    def m(self) -> int:
        return self.input_dim

    @property
    def conv_output_shape(self) -> Tuple[int, int]:
        h, w, _ = self.image_shape
        return h - self.kernel_size + 1, w - self.kernel_size + 1

    def dense_widths(self) -> List[int]:
        """Input width of every dense layer followed by the output width"""
        if self.architecture == "tiny-conv":
            oh, ow = self.conv_output_shape
            first = oh * ow * self.conv_filters
        else:
            first = self.input_dim
        return [first, *self.hidden, self.output_dim]

    def layout(self) -> Tuple[LayerSlot, ...]:
        """Flat row-major layout: every layer's weight, then its bias"""
        shapes = []
        if self.architecture == "tiny-conv":
            _, _, c = self.image_shape
            shapes.append(("conv.weight", (self.conv_filters, self.kernel_size, self.kernel_size, c)))
            if self.bias:
                shapes.append(("conv.bias", (self.conv_filters,)))
        widths = self.dense_widths()
        for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes.append((f"dense{index}.weight", (fan_out, fan_in)))
            if self.bias:
                shapes.append((f"dense{index}.bias", (fan_out,)))

        slots = []
        offset = 0
        for name, shape in shapes:
            slot = LayerSlot(name=name, offset=offset, shape=shape)
            slots.append(slot)
            offset += slot.size
        return tuple(slots)

    @computed_field
    @property
    def param_count(self) -> int:
        """D, the exact sum of layer parameter counts"""
        return sum(slot.size for slot in self.layout())


class ParameterVector(ArrayModel):
    """Flat parameter vector θ ∈ R^D with its per-layer layout"""

    values: np.ndarray
    layout: Tuple[LayerSlot, ...]

    @field_validator("values", mode="before")
    @classmethod
    def validate_values(cls, v):
        return _float_vector(v, "values")

    @model_validator(mode="after")
    def validate_length(self):
        expected = sum(slot.size for slot in self.layout)
        if self.values.size != expected:
            raise ValueError(f"parameter vector has length {self.values.size}, layout needs {expected}")
        return self

    @classmethod
    def from_values(cls, spec: ModelSpec, values) -> "ParameterVector":
        return cls(values=values, layout=spec.layout())

    def unflatten(self) -> dict:
        """Per-layer array views keyed by slot name"""
        return {
            slot.name: self.values[slot.offset:slot.offset + slot.size].reshape(slot.shape)
            for slot in self.layout
        }

    @classmethod
    def flatten(cls, spec: ModelSpec, tensors: dict) -> "ParameterVector":
        """Inverse of unflatten: concatenate named tensors in layout order"""
        layout = spec.layout()
        values = np.concatenate([np.asarray(tensors[slot.name], dtype=np.float64).reshape(-1) for slot in layout])
        return cls(values=values, layout=layout)

    @property
    def D(self) -> int:
        return int(self.values.size)


class GradientVector(ArrayModel):
    """g(x) = ∇_θ L(x), flat, bound to the model that produced it"""

    values: np.ndarray
    model: ModelSpec

    @field_validator("values", mode="before")
    @classmethod
    def validate_values(cls, v):
        return _float_vector(v, "gradient")

    @model_validator(mode="after")
    def validate_length(self):
        if self.values.size != self.model.param_count:
            raise ValueError(f"gradient has length {self.values.size}, model has D={self.model.param_count}")
        return self

    @property
    def D(self) -> int:
        return int(self.values.size)


class GradientInputJacobian(ArrayModel):
    """D×m matrix of ∂g_j/∂x_i from central differences"""

    entries: np.ndarray
    step: float

    @field_validator("entries", mode="before")
    @classmethod
    def validate_entries(cls, v):
        array = np.asarray(v, dtype=np.float64)
        if array.ndim != 2:
            raise ValueError("Jacobian must be a D×m matrix")
        if not np.all(np.isfinite(array)):
            raise ValueError("Jacobian entries must be finite")
        return array

    @property
    def D(self) -> int:
        return int(self.entries.shape[0])

    @property
    def m(self) -> int:
        return int(self.entries.shape[1])


class SyntheticPrior(BaseModel):
    """Gaussian data prior x ~ N(0, τ² I_m)"""

    tau: float = Field(1.0, gt=0, allow_inf_nan=False)

    @property
    def lambda1(self) -> float:
        return 1.0 / (self.tau ** 2)


class LabelRule(BaseModel):
    """How synthetic targets are attached to inputs"""

    kind: Literal["constant", "linear", "argmax"] = "constant"
    value: float = 0.0
    num_classes: int = Field(4, ge=2)
    teacher_scale: float = Field(1.0, gt=0)
    noise: float = Field(0.0, ge=0)


# ---------------------------------------------------------------------------
# defense
# ---------------------------------------------------------------------------


class EncryptionMask(ArrayModel):
    """Partition of {0..D-1}; `unencrypted` realizes R and P"""

    D: int = Field(..., ge=1)
    unencrypted: np.ndarray
    requested_z: Optional[float] = None

    @field_validator("unencrypted", mode="before")
    @classmethod
    def validate_indices(cls, v):
        array = np.asarray(v, dtype=np.int64).reshape(-1)
        return _readonly(array)

    @model_validator(mode="after")
    def validate_partition(self):
        idx = self.unencrypted
        if idx.size > 1 and not np.all(np.diff(idx) > 0):
            raise ValueError("unencrypted indices must be strictly increasing")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.D):
            raise ValueError("unencrypted indices must lie in [0, D)")
        if self.requested_z is not None and abs(self.z - self.requested_z) > 1.0 / self.D + 1e-12:
            raise ValueError("realized z deviates from requested z by more than 1/D")
        return self

    @property
    def d(self) -> int:
        return int(self.unencrypted.size)

    @property
    def z(self) -> float:
        """Realized encryption ratio (D − d) / D"""
        return (self.D - self.d) / self.D

    @property
    def encrypted(self) -> np.ndarray:
        keep = np.ones(self.D, dtype=bool)
        keep[self.unencrypted] = False
        return np.flatnonzero(keep)


class DefendedGradient(ArrayModel):
    """Attacker view y = P(Rg(x) + δ); immutable after construction"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    y: np.ndarray
    mask: EncryptionMask
    sigma: float = Field(..., ge=0)
    seed: int

    @field_validator("y", mode="before")
    @classmethod
    def validate_y(cls, v):
        return _readonly(_float_vector(v, "y"))

    @model_validator(mode="after")
    def validate_support(self):
        if self.y.size != self.mask.D:
            raise ValueError("y length must equal mask.D")
        if np.any(self.y[self.mask.encrypted] != 0.0):
            raise ValueError("y must be exactly zero at encrypted indices")
        return self

    @property
    def visible(self) -> np.ndarray:
        """u = R y, the unencrypted coordinates"""
        return self.y[self.mask.unencrypted]


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------


class FisherMatrix(ArrayModel):
    """Symmetric positive semidefinite m×m Fisher information"""

    entries: np.ndarray
    sigma: float
    mask: EncryptionMask

    @field_validator("entries", mode="before")
    @classmethod
    def validate_entries(cls, v):
        array = np.asarray(v, dtype=np.float64)
        if array.ndim != 2 or array.shape[0] != array.shape[1]:
            raise ValueError("Fisher matrix must be square")
        return array

    @model_validator(mode="after")
    def validate_psd(self):
        F = self.entries
        if not np.allclose(F, F.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(F).max(initial=0.0)))):
            raise ValueError("Fisher matrix must be symmetric")
        trace = float(np.trace(F))
        if F.size and np.linalg.eigvalsh(F).min() < -1e-9 * max(trace, 1e-300):
            raise ValueError("Fisher matrix must be positive semidefinite")
        return self

    @property
    def trace(self) -> float:
        return float(np.trace(self.entries))


class PriorInfo(BaseModel):
    """Source of λ1(J_P), the largest eigenvalue of the prior Fisher information"""

    mode: Literal["gaussian-synthetic", "user-supplied"] = "user-supplied"
    tau: Optional[float] = Field(None, gt=0)
    lambda1: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def derive_lambda1(self):
        if self.mode == "gaussian-synthetic":
            if self.tau is None:
                raise ValueError("gaussian-synthetic prior needs tau")
            self.lambda1 = 1.0 / self.tau ** 2
        return self

    @classmethod
    def gaussian(cls, tau: float) -> "PriorInfo":
        return cls(mode="gaussian-synthetic", tau=tau)

    @property
    def optimistic(self) -> bool:
        """λ1 = 0 drops the prior term, so the bound overstates privacy"""
        return self.lambda1 == 0.0
