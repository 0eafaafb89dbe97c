"""
Toy networks with exact backward passes

Three architectures over a flat row-major parameter vector:

* linear    - one dense layer
* mlp       - dense layers with tanh between them
* tiny-conv - one valid-padding convolution with tanh, then an mlp head

Activations are tanh so that ∂g/∂x is smooth, which keeps central
differences of the parameter gradient accurate.
"""
from functools import lru_cache
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp, softmax

from gradshield.models.domain import ModelSpec

Target = Union[int, float, np.ndarray]

# Named entries share m = 16 so their bounds are comparable under one prior.
ZOO_INPUT_DIM = 16


def build_model_spec(model_id: str, input_dim: int = ZOO_INPUT_DIM, num_classes: int = 4) -> ModelSpec:
    """
    Look up a named architecture

    Args:
        model_id: linear | small | medium | large
        input_dim: m for the linear model; the others are fixed at 16
        num_classes: output classes of the cross-entropy models

    Returns:
        ModelSpec
    """
    if model_id == "linear":
        return ModelSpec(architecture="linear", input_dim=input_dim, output_dim=1,
                         loss="squared-error", bias=True)
    if model_id == "small":
        return ModelSpec(architecture="mlp", input_dim=ZOO_INPUT_DIM, hidden=(4,),
                         output_dim=num_classes, loss="cross-entropy")
    if model_id == "medium":
        return ModelSpec(architecture="mlp", input_dim=ZOO_INPUT_DIM, hidden=(32, 16),
                         output_dim=num_classes, loss="cross-entropy")
    if model_id == "large":
        return ModelSpec(architecture="tiny-conv", input_dim=ZOO_INPUT_DIM, image_shape=(4, 4, 1),
                         conv_filters=32, kernel_size=2, hidden=(32,),
                         output_dim=num_classes, loss="cross-entropy")
    raise KeyError(f"unknown model id '{model_id}'")


MODEL_IDS = ("linear", "small", "medium", "large")


class ToyNetwork:
    """Forward and backward passes for one ModelSpec on raw float64 arrays"""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.slots = spec.layout()
        self.D = sum(slot.size for slot in self.slots)
        self.n_dense = len(spec.dense_widths()) - 1
        self.conv = spec.architecture == "tiny-conv"

    # -- parameter views --------------------------------------------------

    def _views(self, values: np.ndarray) -> Dict[str, np.ndarray]:
        return {
            slot.name: values[slot.offset:slot.offset + slot.size].reshape(slot.shape)
            for slot in self.slots
        }

    def _patches(self, x: np.ndarray) -> np.ndarray:
        """im2col: one row per output position, columns ordered (p, q, channel)"""
        h, w, c = self.spec.image_shape
        s = self.spec.kernel_size
        windows = sliding_window_view(x.reshape(h, w, c), (s, s), axis=(0, 1))
        # (oh, ow, c, s, s) -> (oh, ow, s, s, c)
        return windows.transpose(0, 1, 3, 4, 2).reshape(-1, s * s * c)

    # -- forward ----------------------------------------------------------

    def _forward(self, values: np.ndarray, x: np.ndarray):
        p = self._views(values)
        cache = {"inputs": []}
        a = x
        if self.conv:
            patches = self._patches(x)
            kernels = p["conv.weight"].reshape(self.spec.conv_filters, -1)
            pre = patches @ kernels.T
            if self.spec.bias:
                pre = pre + p["conv.bias"]
            a = np.tanh(pre).reshape(-1)
            cache["patches"] = patches
        for index in range(self.n_dense):
            cache["inputs"].append(a)
            pre = p[f"dense{index}.weight"] @ a
            if self.spec.bias:
                pre = pre + p[f"dense{index}.bias"]
            a = np.tanh(pre) if index < self.n_dense - 1 else pre
        return a, p, cache

    def _loss_from_logits(self, logits: np.ndarray, target: Target) -> Tuple[float, np.ndarray]:
        if self.spec.loss == "squared-error":
            residual = logits[0] - float(target)
            return 0.5 * residual * residual, np.array([residual])
        probs = self._target_distribution(target)
        # log-sum-exp keeps the loss finite near saturation
        loss = float(logsumexp(logits) - probs @ logits)
        return max(loss, 0.0), softmax(logits) - probs

    def _target_distribution(self, target: Target) -> np.ndarray:
        if isinstance(target, np.ndarray) and target.ndim == 1:
            return target
        probs = np.zeros(self.spec.output_dim)
        probs[int(target)] = 1.0
        return probs

    def loss(self, values: np.ndarray, x: np.ndarray, target: Target) -> float:
        logits, _, _ = self._forward(values, x)
        return self._loss_from_logits(logits, target)[0]

    # -- backward ---------------------------------------------------------

    def loss_and_gradient(self, values: np.ndarray, x: np.ndarray, target: Target) -> Tuple[float, np.ndarray]:
        logits, p, cache = self._forward(values, x)
        loss, delta = self._loss_from_logits(logits, target)

        grad = np.empty(self.D)
        views = self._views(grad)
        for index in reversed(range(self.n_dense)):
            a_in = cache["inputs"][index]
            views[f"dense{index}.weight"][...] = np.outer(delta, a_in)
            if self.spec.bias:
                views[f"dense{index}.bias"][...] = delta
            if index == 0 and not self.conv:
                break
            # a_in is a tanh output
            delta = (p[f"dense{index}.weight"].T @ delta) * (1.0 - a_in * a_in)

        if self.conv:
            d_pre = delta.reshape(-1, self.spec.conv_filters)
            views["conv.weight"][...] = (d_pre.T @ cache["patches"]).reshape(views["conv.weight"].shape)
            if self.spec.bias:
                views["conv.bias"][...] = d_pre.sum(axis=0)
        return loss, grad

    def gradient(self, values: np.ndarray, x: np.ndarray, target: Target) -> np.ndarray:
        return self.loss_and_gradient(values, x, target)[1]

    def gradients(self, values: np.ndarray, xs: np.ndarray, targets: List[Target]) -> np.ndarray:
        """Per-sample gradients stacked as rows"""
        return np.stack([self.gradient(values, x, t) for x, t in zip(xs, targets)]) if len(xs) else np.zeros((0, self.D))


@lru_cache(maxsize=64)
def network_for(spec: ModelSpec) -> ToyNetwork:
    """Cached ToyNetwork for a (hashable, frozen) ModelSpec"""
    return ToyNetwork(spec)


def init_tensors(spec: ModelSpec, seed: int, scale: Optional[float] = None) -> Dict[str, np.ndarray]:
    """Per-layer N(0, 1/fan_in) weights (or N(0, scale²) when given) and zero biases, drawn in layout order"""
    rng = np.random.default_rng(seed)
    tensors = {}
    for slot in spec.layout():
        if slot.name.endswith(".bias"):
            tensors[slot.name] = np.zeros(slot.shape)
            continue
        fan_in = int(np.prod(slot.shape[1:]))
        std = scale if scale is not None else 1.0 / np.sqrt(fan_in)
        tensors[slot.name] = rng.normal(0.0, std, size=slot.shape)
    return tensors
