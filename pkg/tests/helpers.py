"""Shared test fixtures: the quadratic harness and small problem builders."""

from __future__ import annotations

import numpy as np

from fedsim import models
from fedsim.datakit import Dataset
from fedsim.fedcore import ClientState


class QuadraticObjective:
    """Objective f(w) = 0.5 * w' diag(a) w with exact gradient.

    Batch arguments are accepted and ignored, so the harness can drive the
    federated strategies in place of a real model. The curvature method goes
    through the same finite-difference rule as the model-backed objective,
    inheriting its error budget.
    """

    def __init__(self, diag):
        self.diag = np.asarray(diag, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.diag.size

    def loss(self, w, x, y) -> float:
        return float(0.5 * w @ (self.diag * w))

    def grad(self, w, x, y) -> np.ndarray:
        return self.diag * w

    def hvp(self, w, v, x, y) -> np.ndarray:
        return models.hvp_from_grad(lambda u: self.grad(u, x, y), w, v)

    def num_correct(self, w, x, y) -> int:
        return 0


def dummy_dataset(n: int = 4) -> Dataset:
    """Minimal dataset so strategy code can slice batches for the harness."""
    return Dataset(np.zeros((n, 1)), np.zeros(n, dtype=int), 1)


def single_client(n: int = 4) -> ClientState:
    ix = np.arange(n)
    return ClientState(0, ix, ix)


def rel_err(approx: np.ndarray, exact: np.ndarray) -> float:
    """Sup-norm error relative to the exact value's scale."""
    exact = np.asarray(exact, dtype=np.float64)
    scale = max(float(np.max(np.abs(exact))), 1e-12)
    return float(np.max(np.abs(np.asarray(approx) - exact))) / scale
