"""Deterministic random streams, distribution samplers, and finite-difference oracles.

Every stochastic choice in the simulator draws from an :class:`RngStream`,
a counter-based (Philox) generator keyed by ``(seed, label path)``. Streams
derived from distinct label paths are independent and do not share state, so
per-client results never depend on scheduling or execution order.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1
# Offset for the empty label path; distinguishes labels=[] from labels=[0].
_PATH_SEED = 0x243F6A8885A308D3


def _mix64(z: int) -> int:
    """SplitMix64 finalizer: a fixed 64-bit avalanche permutation."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _encode_label(label: int | str) -> int:
    if isinstance(label, str):
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    if isinstance(label, (int, np.integer)):
        value = int(label)
        if not 0 <= value <= _MASK64:
            raise ValueError(f"integer label out of 64-bit range: {label}")
        return value
    raise TypeError(f"labels must be int or str, got {type(label).__name__}")


class RngStream:
    """Counter-based random stream identified by a seed and a label path.

    Identical ``(seed, labels)`` reproduce the exact draw sequence on any
    platform; distinct label paths under one seed give independent streams.
    """

    __slots__ = ("seed", "stream_id", "labels", "gen")

    def __init__(self, seed: int, labels: Sequence[int | str] = ()):
        if not 0 <= int(seed) <= _MASK64:
            raise ValueError(f"seed out of 64-bit range: {seed}")
        self.seed = int(seed)
        self.labels = tuple(labels)
        stream_id = _PATH_SEED
        for label in self.labels:
            stream_id = _mix64(stream_id ^ _encode_label(label))
        self.stream_id = stream_id
        key = np.array([_mix64(self.seed), stream_id], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, *labels: int | str) -> "RngStream":
        """Child stream extending this stream's label path."""
        return RngStream(self.seed, self.labels + labels)

    # Thin draw helpers over the underlying generator.
    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, labels={self.labels!r})"


def make_rng_stream(seed: int, labels: Sequence[int | str] = ()) -> RngStream:
    """Create the deterministic stream for ``(seed, labels)``.

    The stream key is a fixed mixing of the seed with the label path:
    each label (strings are hashed with 8-byte BLAKE2b) is XOR-folded into a
    running SplitMix64 chain, and the resulting 128-bit key drives a Philox
    counter generator.
    """
    return RngStream(seed, labels)


def sample_gamma(shape: float, rng: RngStream) -> float:
    """One draw from Gamma(shape, scale=1) via the Marsaglia-Tsang squeeze.

    Shapes below 1 use the boosting identity
    Gamma(a) = Gamma(a+1) * U^(1/a); for tiny shapes the power underflows to
    zero, which callers (the Dirichlet sampler) treat as total concentration.
    """
    if not shape > 0.0:
        raise ValueError(f"gamma shape must be positive, got {shape}")
    if shape < 1.0:
        boost = sample_gamma(shape + 1.0, rng)
        u = rng.random()
        return boost * u ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = rng.normal()
        v = (1.0 + c * x) ** 3
        if v <= 0.0:
            continue
        u = rng.random()
        if u <= 0.0:
            continue
        if u < 1.0 - 0.0331 * x**4:
            return d * v
        if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return d * v


def sample_dirichlet(alphas: Sequence[float], rng: RngStream) -> np.ndarray:
    """Dirichlet draw by gamma normalization: q_i = g_i / sum(g).

    Returns a probability vector (entries >= 0, summing to 1 within 1e-12).
    If every gamma draw underflows to zero (tiny concentrations), falls back
    to a one-hot vector at a uniformly drawn index, matching the
    concentration -> 0 limit.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or alphas.size == 0:
        raise ValueError("alphas must be a nonempty 1-D sequence")
    if not np.all(alphas > 0.0):
        raise ValueError("all Dirichlet concentrations must be positive")
    g = np.array([sample_gamma(a, rng) for a in alphas])
    total = g.sum()
    if total <= 0.0 or not np.isfinite(total):
        q = np.zeros(alphas.size)
        q[int(rng.integers(0, alphas.size))] = 1.0
        return q
    return g / total


def check_simplex(q: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Validate a probability vector; returns it as a float64 array."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size == 0:
        raise ValueError("probability vector must be a nonempty 1-D sequence")
    if np.any(q < 0.0):
        raise ValueError("probability vector has negative entries")
    if abs(q.sum() - 1.0) > atol:
        raise ValueError(f"probabilities sum to {q.sum()!r}, not 1")
    return q


def sample_categorical(q: Sequence[float], rng: RngStream) -> int:
    """Index i with probability q_i, via inverse CDF on one uniform draw."""
    q = check_simplex(np.asarray(q))
    cdf = np.cumsum(q)
    u = rng.random()
    return int(min(np.searchsorted(cdf, u, side="right"), q.size - 1))


def fd_grad_oracle(
    f: Callable[[np.ndarray], float], w: np.ndarray, h: float
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0.0:
        raise ValueError("step h must be positive")
    w = np.asarray(w, dtype=np.float64)
    out = np.empty_like(w)
    for i in range(w.size):
        step = np.zeros_like(w)
        step[i] = h
        out[i] = (f(w + step) - f(w - step)) / (2.0 * h)
    return out


def fd_hvp_oracle(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    w: np.ndarray,
    v: np.ndarray,
    h: float,
) -> np.ndarray:
    """Central-difference Hessian-vector product from a gradient function."""
    if not h > 0.0:
        raise ValueError("step h must be positive")
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if w.shape != v.shape:
        raise ValueError(f"dimension mismatch: w has {w.shape}, v has {v.shape}")
    return (grad_fn(w + h * v) - grad_fn(w - h * v)) / (2.0 * h)
