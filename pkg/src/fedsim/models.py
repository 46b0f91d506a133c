"""Differentiable classifiers: loss, gradient, Hessian-vector product, accuracy.

Two model kinds share one flat-parameter representation: multinomial
logistic regression (no hidden layers) and a ReLU MLP. Parameters live in a
single float64 vector, layer-major: each layer contributes its
(fan_in x fan_out) weight matrix in row-major order followed by its biases.
All losses are means over the batch, so step sizes are batch-size-independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from fedsim import kernels
from fedsim.numkit import RngStream

MODEL_KINDS = ("logistic", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; the parameter count is a pure function of it."""

    kind: str
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be positive")
        if self.kind == "logistic" and self.hidden_dims:
            raise ValueError("logistic models take no hidden layers")
        if self.kind == "mlp" and not self.hidden_dims:
            raise ValueError("mlp models need at least one hidden layer")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    def param_count(self) -> int:
        dims = self.dims
        return sum((din + 1) * dout for din, dout in zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class Batch:
    """A labeled mini-batch: (n x input_dim) features and n class indices."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.intp)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ValueError("features must be a nonempty 2-D matrix")
        if labels.shape != (features.shape[0],):
            raise ValueError("labels must match the number of feature rows")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]


def _check(spec: ModelSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    w = np.ascontiguousarray(w, dtype=np.float64)
    if w.shape != (spec.param_count(),):
        raise ValueError(
            f"parameter vector has length {w.size}, spec wants {spec.param_count()}"
        )
    if batch.features.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch feature dim {batch.features.shape[1]} != input_dim {spec.input_dim}"
        )
    if batch.labels.max() >= spec.num_classes or batch.labels.min() < 0:
        raise ValueError("batch labels outside [0, num_classes)")
    return w


def init_params(spec: ModelSpec, rng: RngStream) -> np.ndarray:
    """Glorot-uniform weights, zero biases, in the documented flat layout."""
    dims = spec.dims
    w = np.empty(spec.param_count())
    off = 0
    for din, dout in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (din + dout))
        w[off : off + din * dout] = rng.gen.uniform(-limit, limit, size=din * dout)
        off += din * dout
        w[off : off + dout] = 0.0
        off += dout
    return w


def loss(spec: ModelSpec, w: np.ndarray, batch: Batch) -> float:
    """Mean softmax cross-entropy over the batch."""
    w = _check(spec, w, batch)
    value, _ = kernels.loss_grad(w, batch.features, batch.labels, spec.dims, False)
    return value


def grad(spec: ModelSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    """Analytic gradient of :func:`loss` by backpropagation, in w's layout."""
    w = _check(spec, w, batch)
    _, g = kernels.loss_grad(w, batch.features, batch.labels, spec.dims, True)
    return g


def loss_and_grad(spec: ModelSpec, w: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    w = _check(spec, w, batch)
    value, g = kernels.loss_grad(w, batch.features, batch.labels, spec.dims, True)
    return value, g


def hvp_step(w: np.ndarray, v: np.ndarray) -> float:
    """Differencing step used by the finite-difference Hessian-vector product."""
    w_scale = float(np.max(np.abs(w))) if w.size else 0.0
    v_scale = float(np.max(np.abs(v))) if v.size else 0.0
    return 1e-4 * (1.0 + w_scale) / (v_scale + 1e-12)


def hvp_from_grad(
    grad_fn: Callable[[np.ndarray], np.ndarray], w: np.ndarray, v: np.ndarray
) -> np.ndarray:
    """Hessian-vector product as a central difference of exact gradients.

    Uses the :func:`hvp_step` rule; a zero direction returns exact zeros.
    """
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if w.shape != v.shape:
        raise ValueError(f"dimension mismatch: w has {w.shape}, v has {v.shape}")
    if not np.any(v):
        return np.zeros_like(w)
    h = hvp_step(w, v)
    return (grad_fn(w + h * v) - grad_fn(w - h * v)) / (2.0 * h)


def hvp(spec: ModelSpec, w: np.ndarray, v: np.ndarray, batch: Batch) -> np.ndarray:
    """Hessian-vector product of the batch loss at w, applied to v."""
    w = _check(spec, w, batch)
    return hvp_from_grad(lambda u: grad(spec, u, batch), w, v)


def accuracy(spec: ModelSpec, w: np.ndarray, batch: Batch) -> float:
    """Fraction of argmax-correct examples; ties go to the lowest class index."""
    return num_correct(spec, w, batch) / len(batch)


def num_correct(spec: ModelSpec, w: np.ndarray, batch: Batch) -> int:
    w = _check(spec, w, batch)
    scores = kernels.logits(w, batch.features, spec.dims)
    return int(np.sum(np.argmax(scores, axis=1) == batch.labels))
