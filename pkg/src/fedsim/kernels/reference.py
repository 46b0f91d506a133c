"""Pure-NumPy classifier kernels: forward logits and fused loss/gradient.

This is the fallback backend; ``fedsim.kernels._core`` is the compiled
twin with identical semantics. Parameter layout is layer-major: for each
layer, the (fan_in x fan_out) weight matrix in row-major order, then the
fan_out bias entries.
"""

from __future__ import annotations

import numpy as np

BACKEND = "reference"


def _unpack(w: np.ndarray, dims: tuple[int, ...]):
    layers = []
    off = 0
    for din, dout in zip(dims[:-1], dims[1:]):
        weight = w[off : off + din * dout].reshape(din, dout)
        off += din * dout
        bias = w[off : off + dout]
        off += dout
        layers.append((weight, bias))
    return layers


def logits(w: np.ndarray, x: np.ndarray, dims: tuple[int, ...]) -> np.ndarray:
    """Forward pass: ReLU between layers, raw scores at the output."""
    layers = _unpack(w, dims)
    a = x
    for i, (weight, bias) in enumerate(layers):
        z = a @ weight + bias
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return a


def loss_grad(
    w: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    dims: tuple[int, ...],
    want_grad: bool = True,
) -> tuple[float, np.ndarray | None]:
    """Mean softmax cross-entropy and, optionally, its gradient in w's layout.

    The log-probabilities are computed with max-subtraction so large logits
    cannot overflow.
    """
    layers = _unpack(w, dims)
    n = x.shape[0]

    acts = [x]
    pre = []
    a = x
    for i, (weight, bias) in enumerate(layers):
        z = a @ weight + bias
        pre.append(z)
        if i < len(layers) - 1:
            a = np.maximum(z, 0.0)
            acts.append(a)

    z = pre[-1]
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    expz = np.exp(shifted)
    sumexp = expz.sum(axis=1)
    rows = np.arange(n)
    # per-example loss: log(sum exp(z - m)) - (z[y] - m)
    loss = float(np.mean(np.log(sumexp) - shifted[rows, y]))
    if not want_grad:
        return loss, None

    probs = expz / sumexp[:, None]
    delta = probs
    delta[rows, y] -= 1.0
    delta /= n

    grad = np.empty_like(w)
    offsets = []
    off = 0
    for din, dout in zip(dims[:-1], dims[1:]):
        offsets.append(off)
        off += din * dout + dout
    for i in range(len(layers) - 1, -1, -1):
        weight, _ = layers[i]
        din, dout = weight.shape
        off = offsets[i]
        grad[off : off + din * dout] = (acts[i].T @ delta).ravel()
        grad[off + din * dout : off + din * dout + dout] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weight.T) * (pre[i - 1] > 0.0)
    return loss, grad
