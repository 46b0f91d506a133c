"""Federated strategies: local SGD with server averaging, and the
meta-learning variant whose global model is optimized to work well after one
local adaptation step.

All client computations are pure functions of (parameters, client data,
derived rng stream), so per-round client work can run in any order; the
server reduces updates in ascending client-id order for bit determinism.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedsim import models
from fedsim.datakit import Dataset
from fedsim.numkit import RngStream

log = logging.getLogger(__name__)

VARIANTS = ("hessian", "first-order")


@dataclass(frozen=True)
class ClientState:
    """One client's identity and index views into the shared dataset.

    ``client_id`` doubles as the rng-stream label under which the client's
    per-round batching stream is derived.
    """

    client_id: int
    train_indices: np.ndarray
    test_indices: np.ndarray


@dataclass(frozen=True)
class FedAvgConfig:
    """Round/participation/local-update settings for plain federated averaging."""

    rounds: int = 100
    client_fraction: float = 0.5
    local_steps: int = 10
    batch_size: int = 40
    local_lr: float = 0.01
    # Eq-style n_k/n weighting; the meta variant defaults to a uniform mean.
    weighted_aggregation: bool = True

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ValueError("client_fraction must be in (0, 1]")
        if self.local_steps < 0:
            raise ValueError("local_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.local_lr > 0.0:
            raise ValueError("local_lr must be > 0")


@dataclass(frozen=True)
class PerFedAvgConfig(FedAvgConfig):
    """Adds the inner adaptation step, outer step, and variant selection."""

    alpha_inner: float = 0.01
    beta: float = 0.01
    variant: str = "hessian"
    weighted_aggregation: bool = False

    def __post_init__(self):
        super().__post_init__()
        if self.alpha_inner < 0.0:
            raise ValueError("alpha_inner must be >= 0")
        if not self.beta > 0.0:
            raise ValueError("beta must be > 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


@dataclass(frozen=True)
class RoundResult:
    """Outcome of one communication round."""

    round_index: int
    params: np.ndarray
    participants: tuple[int, ...]


@dataclass(frozen=True)
class ModelObjective:
    """Batch-level loss/gradient/curvature/accuracy of a classifier spec.

    This is the per-client objective the strategies drive. Anything with the
    same methods (e.g. a quadratic test harness) can stand in for it.
    """

    spec: models.ModelSpec

    @property
    def dim(self) -> int:
        return self.spec.param_count()

    def loss(self, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
        return models.loss(self.spec, w, models.Batch(x, y))

    def grad(self, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return models.grad(self.spec, w, models.Batch(x, y))

    def hvp(self, w: np.ndarray, v: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return models.hvp(self.spec, w, v, models.Batch(x, y))

    def num_correct(self, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> int:
        return models.num_correct(self.spec, w, models.Batch(x, y))


def select_clients(num_clients: int, fraction: float, rng: RngStream) -> np.ndarray:
    """Uniform sample without replacement of max(1, round(fraction * K)) ids,
    returned sorted ascending."""
    if num_clients < 1:
        raise ValueError("num_clients must be positive")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    m = max(1, round(fraction * num_clients))
    return np.sort(rng.permutation(num_clients)[:m])


def _draw_batch(train_indices: np.ndarray, batch_size: int, rng: RngStream) -> np.ndarray:
    # Without replacement within a batch; reshuffled on every draw.
    size = min(batch_size, train_indices.size)
    return train_indices[rng.permutation(train_indices.size)[:size]]


def local_sgd(
    objective,
    w: np.ndarray,
    client: ClientState,
    dataset: Dataset,
    cfg: FedAvgConfig,
    rng: RngStream,
) -> np.ndarray:
    """``local_steps`` steps of w <- w - lr * grad(w, batch)."""
    if client.train_indices.size == 0:
        raise ValueError(f"client {client.client_id} has no training data")
    w = np.asarray(w, dtype=np.float64)
    for _ in range(cfg.local_steps):
        b = _draw_batch(client.train_indices, cfg.batch_size, rng)
        g = objective.grad(w, dataset.features[b], dataset.labels[b])
        w = w - cfg.local_lr * g
    return w


def perfedavg_local(
    objective,
    w: np.ndarray,
    client: ClientState,
    dataset: Dataset,
    cfg: PerFedAvgConfig,
    rng: RngStream,
) -> np.ndarray:
    """Meta local update: adapt on one batch, correct on two more.

    Per step, three independent batches (d0, d1, d2) are drawn. The adapted
    point is w~ = w - alpha * grad(w, d0). The hessian variant then applies
    w <- w - beta * (I - alpha * H(w, d2)) grad(w~, d1), where the curvature
    term is a Hessian-vector product; the first-order variant drops it.
    """
    if client.train_indices.size == 0:
        raise ValueError(f"client {client.client_id} has no training data")
    w = np.asarray(w, dtype=np.float64)
    for _ in range(cfg.local_steps):
        b0 = _draw_batch(client.train_indices, cfg.batch_size, rng)
        b1 = _draw_batch(client.train_indices, cfg.batch_size, rng)
        b2 = _draw_batch(client.train_indices, cfg.batch_size, rng)
        g0 = objective.grad(w, dataset.features[b0], dataset.labels[b0])
        w_adapted = w - cfg.alpha_inner * g0
        g1 = objective.grad(w_adapted, dataset.features[b1], dataset.labels[b1])
        if cfg.variant == "hessian" and cfg.alpha_inner != 0.0:
            hv = objective.hvp(w, g1, dataset.features[b2], dataset.labels[b2])
            w = w - cfg.beta * (g1 - cfg.alpha_inner * hv)
        else:
            w = w - cfg.beta * g1
    return w


def aggregate(
    updates: Sequence[np.ndarray], weights: Sequence[float] | None = None
) -> np.ndarray:
    """Uniform mean, or example-count-weighted mean when weights are given.

    Accumulation runs in the given (ascending client-id) order so results
    are bit-deterministic.
    """
    if len(updates) == 0:
        raise ValueError("nothing to aggregate")
    dim = updates[0].shape
    if any(u.shape != dim for u in updates):
        raise ValueError("updates differ in dimension")
    if weights is None:
        acc = updates[0].astype(np.float64, copy=True)
        for u in updates[1:]:
            acc += u
        return acc / len(updates)
    if len(weights) != len(updates):
        raise ValueError("one weight per update required")
    total = float(sum(weights))
    if not total > 0.0:
        raise ValueError("weights must sum to a positive value")
    acc = (weights[0] / total) * updates[0]
    for u, n_k in zip(updates[1:], weights[1:]):
        acc += (n_k / total) * u
    return acc


def personalize(
    objective, w: np.ndarray, client: ClientState, dataset: Dataset, alpha_inner: float
) -> np.ndarray:
    """One full-batch gradient step on the client's train set (deterministic)."""
    if client.train_indices.size == 0:
        raise ValueError(f"client {client.client_id} has no training data")
    if alpha_inner == 0.0:
        return w
    ix = client.train_indices
    g = objective.grad(w, dataset.features[ix], dataset.labels[ix])
    return w - alpha_inner * g


def evaluate_global(
    objective, w: np.ndarray, clients: Sequence[ClientState], dataset: Dataset
) -> float:
    """Example-weighted accuracy of one shared model over all client test sets."""
    correct = 0
    total = 0
    for client in clients:
        ix = client.test_indices
        if ix.size == 0:
            continue
        correct += objective.num_correct(w, dataset.features[ix], dataset.labels[ix])
        total += ix.size
    if total == 0:
        raise ValueError("no client has test examples")
    return correct / total


def evaluate_personalized(
    objective,
    w: np.ndarray,
    clients: Sequence[ClientState],
    dataset: Dataset,
    alpha_inner: float,
) -> float:
    """Example-weighted accuracy where each client adapts w once before testing."""
    correct = 0
    total = 0
    for client in clients:
        ix = client.test_indices
        if ix.size == 0 or client.train_indices.size == 0:
            continue
        adapted = personalize(objective, w, client, dataset, alpha_inner)
        correct += objective.num_correct(adapted, dataset.features[ix], dataset.labels[ix])
        total += ix.size
    if total == 0:
        raise ValueError("no client has test examples")
    return correct / total


def meta_objective(
    objective,
    w: np.ndarray,
    clients: Sequence[ClientState],
    dataset: Dataset,
    alpha_inner: float,
) -> float:
    """Uniform client average of the loss at the one-step-adapted parameters."""
    if not clients:
        raise ValueError("no clients")
    total = 0.0
    for client in clients:
        ix = client.train_indices
        if ix.size == 0:
            raise ValueError(f"client {client.client_id} has no training data")
        adapted = personalize(objective, w, client, dataset, alpha_inner)
        total += objective.loss(adapted, dataset.features[ix], dataset.labels[ix])
    return total / len(clients)


def run_round(
    objective,
    w: np.ndarray,
    clients: Sequence[ClientState],
    dataset: Dataset,
    cfg: FedAvgConfig,
    round_index: int,
    rng_root: RngStream,
) -> RoundResult:
    """One communication round: select, train locally, aggregate.

    Client updates land in a map keyed by id and are reduced in ascending-id
    order, so the aggregate is independent of completion order.
    """
    selection = select_clients(
        len(clients), cfg.client_fraction, rng_root.derive("select", round_index)
    )
    updates: dict[int, np.ndarray] = {}
    sizes: dict[int, int] = {}
    for cid in selection.tolist():
        client = clients[cid]
        if client.train_indices.size == 0:
            log.warning("round %d: client %d has no training data, skipped", round_index, cid)
            continue
        crng = rng_root.derive("client", round_index, cid)
        if isinstance(cfg, PerFedAvgConfig):
            updates[cid] = perfedavg_local(objective, w, client, dataset, cfg, crng)
        else:
            updates[cid] = local_sgd(objective, w, client, dataset, cfg, crng)
        sizes[cid] = client.train_indices.size
    if not updates:
        raise ValueError(f"round {round_index}: no selected client has training data")
    order = sorted(updates)
    weights = [sizes[c] for c in order] if cfg.weighted_aggregation else None
    new_w = aggregate([updates[c] for c in order], weights)
    return RoundResult(round_index, new_w, tuple(order))
