"""Dataset synthesis and loading, client partitioning, and split bookkeeping.

Partitioners produce disjoint per-client index sets over one dataset. The
concentration-controlled scheme draws each client's class mix from a
Dirichlet distribution, spanning near-identical clients (large
concentration) to single-class clients (tiny concentration).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from fedsim.numkit import (
    RngStream,
    check_simplex,
    make_rng_stream,
    sample_categorical,
    sample_dirichlet,
)


class DatasetFormatError(ValueError):
    """Raised when a dataset or manifest file cannot be parsed."""


@dataclass(frozen=True)
class Dataset:
    """Labeled feature matrix: (n x d) float64 features, n class indices."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.intp)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if labels.shape != (features.shape[0],):
            raise ValueError("labels must match the number of feature rows")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if features.shape[0] < self.num_classes:
            raise ValueError("need at least one example per class slot")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-mixture generator settings: one mean direction per class."""

    num_classes: int
    input_dim: int
    samples_per_class: int
    class_separation: float = 3.0
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2 or self.input_dim < 1 or self.samples_per_class < 1:
            raise ValueError("num_classes, input_dim, samples_per_class must be positive")
        if self.class_separation < 0.0:
            raise ValueError("class_separation must be >= 0")
        if not self.noise_scale > 0.0:
            raise ValueError("noise_scale must be > 0")


@dataclass(frozen=True)
class DirichletSpec:
    """Concentration, class prior, and per-client draw count."""

    alpha_dir: float
    samples_per_client: int
    prior: np.ndarray | None = None  # None: uniform over classes

    def __post_init__(self):
        if not self.alpha_dir > 0.0:
            raise ValueError("alpha_dir must be positive")
        if self.samples_per_client < 1:
            raise ValueError("samples_per_client must be positive")
        if self.prior is not None:
            object.__setattr__(self, "prior", check_simplex(self.prior))


@dataclass(frozen=True)
class ClientPartition:
    """Disjoint per-client index sets over a dataset of ``num_examples`` rows."""

    index_sets: tuple[np.ndarray, ...]
    num_examples: int

    def __post_init__(self):
        sets = tuple(np.ascontiguousarray(ix, dtype=np.intp) for ix in self.index_sets)
        object.__setattr__(self, "index_sets", sets)
        seen: set[int] = set()
        for k, ix in enumerate(sets):
            if ix.size == 0:
                raise ValueError(f"client {k} received no examples")
            if ix.min() < 0 or ix.max() >= self.num_examples:
                raise ValueError(f"client {k} has indices outside [0, {self.num_examples})")
            unique = set(ix.tolist())
            if len(unique) != ix.size:
                raise ValueError(f"client {k} holds duplicate indices")
            if unique & seen:
                raise ValueError(f"client {k} overlaps another client")
            seen |= unique

    @property
    def num_clients(self) -> int:
        return len(self.index_sets)

    @property
    def counts(self) -> np.ndarray:
        return np.array([ix.size for ix in self.index_sets], dtype=np.intp)


@dataclass(frozen=True)
class ClientSplit:
    """Per-client train/test indices. An empty test set marks the client as
    excluded from evaluation (single-example clients)."""

    train_indices: tuple[np.ndarray, ...]
    test_indices: tuple[np.ndarray, ...]

    @property
    def num_clients(self) -> int:
        return len(self.train_indices)


@dataclass(frozen=True)
class PartitionStats:
    """Per-client class histogram and a scalar heterogeneity summary."""

    class_counts: np.ndarray  # (K x N) counts
    mean_pairwise_tv: float


def _class_directions(num_classes: int, dim: int) -> np.ndarray:
    """Fixed unit vectors u_c, deterministic in (num_classes, dim)."""
    if dim >= num_classes:
        return np.eye(num_classes, dim)
    rng = make_rng_stream(0, ["class-directions", num_classes, dim])
    u = rng.normal(size=(num_classes, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec, rng: RngStream) -> Dataset:
    """Balanced Gaussian mixture: class c is N(separation * u_c, noise^2 I)."""
    directions = _class_directions(spec.num_classes, spec.input_dim)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    noise = rng.normal(size=(labels.size, spec.input_dim))
    features = spec.class_separation * directions[labels] + spec.noise_scale * noise
    return Dataset(features, labels, spec.num_classes)


def save_csv_dataset(dataset: Dataset, path: str) -> None:
    """Header-less rows ``label,f1,...,fd`` with full-precision floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for label, row in zip(dataset.labels, dataset.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def load_csv_dataset(path: str) -> Dataset:
    """Parse header-less ``label,f1,...,fd`` rows; errors name the bad line."""
    features: list[list[float]] = []
    labels: list[int] = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise DatasetFormatError(
                        f"{path}: line {lineno}: need a label and at least one feature"
                    )
            elif len(row) != width:
                raise DatasetFormatError(
                    f"{path}: line {lineno}: expected {width} fields, got {len(row)}"
                )
            try:
                label = int(row[0])
            except ValueError:
                raise DatasetFormatError(
                    f"{path}: line {lineno}: label {row[0]!r} is not an integer"
                ) from None
            if label < 0:
                raise DatasetFormatError(f"{path}: line {lineno}: label {label} out of range")
            try:
                values = [float(cell) for cell in row[1:]]
            except ValueError:
                raise DatasetFormatError(
                    f"{path}: line {lineno}: non-numeric feature value"
                ) from None
            labels.append(label)
            features.append(values)
    if not labels:
        raise DatasetFormatError(f"{path}: file holds no data rows")
    return Dataset(np.array(features), np.array(labels), 1 + max(labels))


def partition_iid(dataset: Dataset, num_clients: int, rng: RngStream) -> ClientPartition:
    """Random permutation dealt round-robin; sizes differ by at most one."""
    n = len(dataset)
    if num_clients < 1:
        raise ValueError("num_clients must be positive")
    if num_clients > n:
        raise ValueError(f"cannot deal {n} examples to {num_clients} clients")
    perm = rng.permutation(n)
    return ClientPartition(tuple(perm[k::num_clients] for k in range(num_clients)), n)


def partition_dirichlet(
    dataset: Dataset, num_clients: int, spec: DirichletSpec, rng: RngStream
) -> ClientPartition:
    """Per client: draw a class mix q ~ Dir(alpha * prior), then draw classes
    from q and take unassigned examples of each drawn class.

    When a drawn class's pool is exhausted, q is renormalized over classes
    with remaining examples and the draw repeated. Clients stop early once
    every pool is empty; a client that would end up empty is given one
    leftover example (or one taken from the largest client) so that every
    client holds at least one example.
    """
    n = len(dataset)
    if num_clients < 1:
        raise ValueError("num_clients must be positive")
    if num_clients > n:
        raise ValueError(f"cannot serve {num_clients} clients from {n} examples")
    prior = spec.prior
    if prior is None:
        prior = np.full(dataset.num_classes, 1.0 / dataset.num_classes)
    elif prior.size != dataset.num_classes:
        raise ValueError("prior length must equal the dataset's class count")

    pools: list[list[int]] = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        pools.append(members[rng.permutation(members.size)].tolist())

    index_sets: list[list[int]] = []
    for _ in range(num_clients):
        q = sample_dirichlet(spec.alpha_dir * prior, rng)
        taken: list[int] = []
        for _ in range(spec.samples_per_client):
            if not any(pools):
                break
            c = sample_categorical(q, rng)
            if not pools[c]:
                avail = [j for j, pool in enumerate(pools) if pool]
                mass = q[avail]
                total = mass.sum()
                weights = mass / total if total > 0.0 else np.full(len(avail), 1.0 / len(avail))
                c = avail[sample_categorical(weights, rng)]
            taken.append(pools[c].pop())
        index_sets.append(taken)

    leftovers = [i for pool in pools for i in pool]
    for k, taken in enumerate(index_sets):
        if taken:
            continue
        if leftovers:
            taken.append(leftovers.pop())
        else:
            donor = max(range(num_clients), key=lambda j: len(index_sets[j]))
            taken.append(index_sets[donor].pop())
    return ClientPartition(tuple(np.array(sorted(ix)) for ix in index_sets), n)


def partition_sort_shard(
    dataset: Dataset, num_clients: int, shards_per_client: int, rng: RngStream
) -> ClientPartition:
    """Sort by label, cut into equal shards, deal random shards to clients."""
    n = len(dataset)
    if num_clients < 1 or shards_per_client < 1:
        raise ValueError("num_clients and shards_per_client must be positive")
    total_shards = num_clients * shards_per_client
    if n % total_shards != 0:
        raise ValueError(
            f"{n} examples do not divide into {total_shards} equal shards"
        )
    shard_size = n // total_shards
    order = np.argsort(dataset.labels, kind="stable")
    shards = order.reshape(total_shards, shard_size)
    deal = rng.permutation(total_shards)
    index_sets = []
    for k in range(num_clients):
        mine = deal[k * shards_per_client : (k + 1) * shards_per_client]
        index_sets.append(np.sort(np.concatenate([shards[s] for s in mine])))
    return ClientPartition(tuple(index_sets), n)


def _allocate_test_counts(class_sizes: np.ndarray, n_test: int, fraction: float) -> np.ndarray:
    # Largest-remainder apportionment of n_test over classes, capped by size.
    quotas = fraction * class_sizes
    counts = np.minimum(np.floor(quotas).astype(np.intp), class_sizes)
    remainders = quotas - np.floor(quotas)
    while counts.sum() < n_test:
        open_classes = np.flatnonzero(counts < class_sizes)
        pick = open_classes[np.argmax(remainders[open_classes])]
        counts[pick] += 1
        remainders[pick] = -1.0
    while counts.sum() > n_test:
        filled = np.flatnonzero(counts > 0)
        pick = filled[np.argmin(remainders[filled])]
        counts[pick] -= 1
        remainders[pick] = 2.0
    return counts


def split_client_train_test(
    dataset: Dataset,
    partition: ClientPartition,
    test_fraction: float,
    rng: RngStream,
) -> ClientSplit:
    """Per-client stratified-where-possible split.

    Every client with two or more examples keeps at least one example on
    each side; single-example clients keep it for training and get an empty
    test set (excluded from evaluation).
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    train_sets = []
    test_sets = []
    for ix in partition.index_sets:
        n_k = ix.size
        if n_k == 1:
            train_sets.append(ix.copy())
            test_sets.append(np.empty(0, dtype=np.intp))
            continue
        n_test = int(np.clip(round(test_fraction * n_k), 1, n_k - 1))
        classes, inverse = np.unique(dataset.labels[ix], return_inverse=True)
        class_sizes = np.bincount(inverse, minlength=classes.size).astype(np.intp)
        test_counts = _allocate_test_counts(class_sizes, n_test, test_fraction)
        test_parts = []
        train_parts = []
        for j in range(classes.size):
            members = ix[inverse == j]
            members = members[rng.permutation(members.size)]
            test_parts.append(members[: test_counts[j]])
            train_parts.append(members[test_counts[j] :])
        train_sets.append(np.sort(np.concatenate(train_parts)))
        test_sets.append(np.sort(np.concatenate(test_parts)))
    return ClientSplit(tuple(train_sets), tuple(test_sets))


def partition_stats(partition: ClientPartition, dataset: Dataset) -> PartitionStats:
    """K x N class-count matrix plus mean pairwise total-variation distance."""
    k = partition.num_clients
    counts = np.zeros((k, dataset.num_classes), dtype=np.intp)
    for row, ix in enumerate(partition.index_sets):
        counts[row] = np.bincount(dataset.labels[ix], minlength=dataset.num_classes)
    dists = counts / counts.sum(axis=1, keepdims=True)
    total = 0.0
    pairs = 0
    for a in range(k):
        for b in range(a + 1, k):
            total += 0.5 * np.abs(dists[a] - dists[b]).sum()
            pairs += 1
    return PartitionStats(counts, total / pairs if pairs else 0.0)


def write_partition_manifest(partition: ClientPartition, path: str) -> None:
    """Header-less rows ``client_id,dataset_index``, clients in ascending order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for client_id, ix in enumerate(partition.index_sets):
            for index in ix:
                writer.writerow([client_id, int(index)])


def read_partition_manifest(path: str, num_examples: int | None = None) -> ClientPartition:
    """Rebuild a partition from a manifest written by
    :func:`write_partition_manifest`."""
    by_client: dict[int, list[int]] = {}
    top = -1
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 2:
                raise DatasetFormatError(f"{path}: line {lineno}: expected 2 fields")
            try:
                client_id, index = int(row[0]), int(row[1])
            except ValueError:
                raise DatasetFormatError(
                    f"{path}: line {lineno}: non-integer manifest entry"
                ) from None
            by_client.setdefault(client_id, []).append(index)
            top = max(top, index)
    if not by_client:
        raise DatasetFormatError(f"{path}: manifest holds no rows")
    if sorted(by_client) != list(range(len(by_client))):
        raise DatasetFormatError(f"{path}: client ids are not contiguous from 0")
    if num_examples is None:
        num_examples = top + 1
    sets = tuple(np.array(by_client[c]) for c in sorted(by_client))
    return ClientPartition(sets, num_examples)
