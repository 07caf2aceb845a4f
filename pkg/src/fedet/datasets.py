"""Synthetic data, Dirichlet non-IID partitioning, public-set derivation, CSV I/O.

Datasets are held as a feature matrix plus an integer label vector rather
than as lists of per-example objects; row ``i`` of ``features`` together with
``labels[i]`` is one labeled example.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ArgumentError, ConfigurationError, CSVParseError, DimensionError, StateError

UNLABELED = -1


@dataclass
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) int64

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DimensionError("features must be a 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise DimensionError("need exactly one label per feature row")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> Dataset:
        return Dataset(self.features[index], self.labels[index])

    def label_marginal(self, n_classes: int) -> np.ndarray:
        counts = np.bincount(self.labels, minlength=n_classes).astype(np.float64)
        return counts / max(counts.sum(), 1.0)


@dataclass
class ClientShard(Dataset):
    client_id: int = 0


@dataclass
class PublicSet:
    inputs: np.ndarray  # (n, d)

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise DimensionError("public inputs must be a 2-D array")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    alpha: float
    seed: int
    min_size: int = 1

    def __post_init__(self) -> None:
        if self.n_clients < 1:
            raise ArgumentError("partition needs at least one client")
        if not self.alpha > 0:
            raise ArgumentError("Dirichlet concentration must be positive")
        if self.min_size < 0:
            raise ArgumentError("min_size must be nonnegative")


def class_centers(n_classes: int, dim: int, radius: float = 1.0) -> np.ndarray:
    """Seed-independent class centroids on the sphere of the given radius.

    Classes take the signed coordinate axes in order (``+e0, +e1, ..., -e0,
    ...``); beyond ``2 * dim`` classes the remainder use fixed pseudo-random
    directions.
    """
    centers = np.zeros((n_classes, dim))
    extra = np.random.default_rng(0x5EED).normal(size=(max(n_classes - 2 * dim, 0), dim))
    for c in range(n_classes):
        if c < 2 * dim:
            centers[c, c % dim] = 1.0 if c < dim else -1.0
        else:
            v = extra[c - 2 * dim]
            centers[c] = v / np.linalg.norm(v)
    return radius * centers


def generate_synthetic(n_classes: int, dim: int, n_per_class: int, spread: float,
                       seed: int, radius: float = 1.0) -> Dataset:
    """Isotropic Gaussian blobs, ``n_per_class`` rows per class, ordered by class."""
    if n_classes < 2 or dim < 2 or n_per_class < 1 or not spread > 0:
        raise ArgumentError("need n_classes >= 2, dim >= 2, n_per_class >= 1, spread > 0")
    rng = np.random.default_rng(seed)
    centers = class_centers(n_classes, dim, radius)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    return Dataset(features, labels)


def split_dataset(dataset: Dataset, sizes: tuple[int, ...], seed: int) -> list[Dataset]:
    """Shuffle once and cut consecutive pieces of the requested sizes."""
    if sum(sizes) > len(dataset):
        raise ArgumentError(f"requested {sum(sizes)} rows from a dataset of {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    parts, start = [], 0
    for size in sizes:
        parts.append(dataset.subset(np.sort(order[start:start + size])))
        start += size
    return parts


def proportional_sizes(total: int, ratio: tuple[int, ...] = (7, 1, 2)) -> tuple[int, ...]:
    """Integer sizes in the given ratio; rounding slack goes to the first part."""
    sizes = [total * r // sum(ratio) for r in ratio]
    sizes[0] += total - sum(sizes)
    return tuple(sizes)


def dirichlet_partition(dataset: Dataset, spec: PartitionSpec,
                        max_redraws: int = 10_000) -> list[ClientShard]:
    """Label-skewed split across ``spec.n_clients`` clients.

    Client ``k`` draws a gamma weight per class; normalising each class
    column gives Dirichlet(alpha) class proportions, and every class is then
    split multinomially by them. A client left with fewer than
    ``spec.min_size`` rows gets its gamma row redrawn, from the same stream,
    until every shard is large enough.
    """
    if len(dataset) == 0:
        raise ArgumentError("cannot partition an empty dataset")
    k_clients = spec.n_clients
    if k_clients * spec.min_size > len(dataset):
        raise ConfigurationError(
            f"{k_clients} clients with >= {spec.min_size} rows need more than {len(dataset)} rows"
        )
    if k_clients == 1:
        return [ClientShard(dataset.features.copy(), dataset.labels.copy(), client_id=0)]

    rng = np.random.default_rng(spec.seed)
    classes = np.unique(dataset.labels)
    members = [np.flatnonzero(dataset.labels == c) for c in classes]
    gammas = rng.gamma(spec.alpha, size=(k_clients, classes.size))

    for _ in range(max_redraws):
        owner = np.empty(len(dataset), dtype=np.int64)
        for j, idx in enumerate(members):
            col = gammas[:, j]
            total = col.sum()
            probs = col / total if total > 0 else np.full(k_clients, 1.0 / k_clients)
            counts = rng.multinomial(idx.size, probs)
            owner[rng.permutation(idx)] = np.repeat(np.arange(k_clients), counts)
        sizes = np.bincount(owner, minlength=k_clients)
        short = np.flatnonzero(sizes < spec.min_size)
        if short.size == 0:
            return [
                ClientShard(*_rows(dataset, owner == k), client_id=k)
                for k in range(k_clients)
            ]
        gammas[short] = rng.gamma(spec.alpha, size=(short.size, classes.size))
    raise ConfigurationError(
        f"could not give every client >= {spec.min_size} rows after {max_redraws} redraws"
    )


def _rows(dataset: Dataset, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return dataset.features[mask], dataset.labels[mask]


def derive_public_set(dataset: Dataset, noise_std: float, seed: int) -> PublicSet:
    """Drop labels and add Gaussian jitter so public inputs differ from the originals."""
    if noise_std < 0:
        raise ArgumentError("noise_std must be nonnegative")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(dataset.features.shape)
    return PublicSet(dataset.features + noise_std * noise)


def minibatch_iter(shard: Dataset, batch_size: int,
                   rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of row-index batches drawn from ``shard``.

    Rows within a batch are distinct whenever ``batch_size <= len(shard)``;
    batches are drawn independently of each other.
    """
    if batch_size < 1:
        raise ArgumentError("batch size must be >= 1")
    n = len(shard)
    if n == 0:
        raise StateError("cannot draw batches from an empty shard")
    replace = batch_size > n
    while True:
        yield rng.choice(n, size=batch_size, replace=replace)


def save_csv(data: Dataset | PublicSet, path: str | os.PathLike) -> None:
    if isinstance(data, PublicSet):
        features = data.inputs
        labels = np.full(features.shape[0], UNLABELED, dtype=np.int64)
    else:
        features, labels = data.features, data.labels
    dim = features.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(["label"] + [f"f{j}" for j in range(dim)]) + "\n")
        for label, row in zip(labels, features):
            fh.write(f"{int(label)}," + ",".join(format(float(v), ".17g") for v in row) + "\n")


def load_csv(path: str | os.PathLike) -> Dataset:
    """Read a file written by :func:`save_csv`. Public rows keep label ``-1``."""
    path = os.fspath(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVParseError(path, 1, "missing header") from None
        if not header or header[0] != "label" or header[1:] != [f"f{j}" for j in range(len(header) - 1)]:
            raise CSVParseError(path, 1, "header must be label,f0,f1,...")
        dim = len(header) - 1
        labels, rows = [], []
        for line_no, record in enumerate(reader, start=2):
            if len(record) != dim + 1:
                raise CSVParseError(path, line_no, f"expected {dim + 1} fields, got {len(record)}")
            try:
                labels.append(int(record[0]))
                values = [float(v) for v in record[1:]]
            except ValueError as exc:
                raise CSVParseError(path, line_no, str(exc)) from None
            if not all(math.isfinite(v) for v in values):
                raise CSVParseError(path, line_no, "non-finite feature value")
            rows.append(values)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return Dataset(features, np.array(labels, dtype=np.int64))


def load_public_csv(path: str | os.PathLike) -> PublicSet:
    return PublicSet(load_csv(path).features)
