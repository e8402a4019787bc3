"""Synthetic datasets and client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Batch, Model


@dataclass
class FederatedTask:
    model: Model
    client_shards: list  # list[Batch]
    test_set: Batch
    alpha: float | None  # None means IID

    @property
    def n_clients(self) -> int:
        return len(self.client_shards)

    def train_set(self) -> Batch:
        return Batch(
            np.concatenate([s.inputs for s in self.client_shards]),
            np.concatenate([s.targets for s in self.client_shards]),
        )


def _class_means(n_classes: int, n_features: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    # Means sit pairwise `separation` apart on scaled axes when there are enough
    # dimensions; otherwise on random directions of radius separation/sqrt(2).
    radius = separation / np.sqrt(2.0)
    if n_classes <= n_features:
        means = np.zeros((n_classes, n_features))
        axes = rng.permutation(n_features)[:n_classes]
        means[np.arange(n_classes), axes] = radius
        return means
    dirs = rng.standard_normal((n_classes, n_features))
    return radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes)


def gen_classification(n_classes: int, n_features: int, n_train: int, n_test: int, separation: float, rng: np.random.Generator):
    """Unit-variance Gaussian clusters, one per class, with balanced labels."""
    if min(n_classes, n_features, n_train, n_test) < 1:
        raise ValueError("counts must be >= 1")
    if separation <= 0:
        raise ValueError("separation must be positive")
    means = _class_means(n_classes, n_features, separation, rng)

    def draw(n):
        y = _balanced_labels(n, n_classes, rng)
        X = means[y] + rng.standard_normal((n, n_features))
        return Batch(X, y)

    return draw(n_train), draw(n_test)


def gen_quadratic_centers(n_classes: int, dim: int, n_train: int, n_test: int, spread: float, noise: float, rng: np.random.Generator):
    """Sample centers for the quadratic task, clustered by class so label skew gives heterogeneity."""
    means = spread * rng.standard_normal((n_classes, dim))

    def draw(n):
        y = _balanced_labels(n, n_classes, rng)
        return Batch(means[y] + noise * rng.standard_normal((n, dim)), y)

    return draw(n_train), draw(n_test)


def _repair_empty(assign: list[list[int]]) -> None:
    for i, shard in enumerate(assign):
        if not shard:
            donor = max(range(len(assign)), key=lambda j: (len(assign[j]), -j))
            shard.append(assign[donor].pop())


def dirichlet_partition(train: Batch, n_clients: int, alpha: float, rng: np.random.Generator) -> list[Batch]:
    """Split ``train`` across clients with per-class Dir(alpha) proportions.

    For each class the proportions over clients are drawn once and the class's
    samples are dealt out by a multinomial draw. A client left empty takes one
    sample from the largest shard.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if len(train) < n_clients:
        raise ValueError(f"dataset of {len(train)} samples is smaller than {n_clients} clients")
    assign: list[list[int]] = [[] for _ in range(n_clients)]
    for c in np.unique(train.targets):
        idx = rng.permutation(np.flatnonzero(train.targets == c))
        p = rng.dirichlet(np.full(n_clients, alpha))
        counts = rng.multinomial(len(idx), p)
        start = 0
        for i, n in enumerate(counts):
            assign[i].extend(idx[start:start + n].tolist())
            start += n
    _repair_empty(assign)
    return [train.take(np.sort(np.array(a, dtype=np.int64))) for a in assign]


def iid_partition(train: Batch, n_clients: int, rng: np.random.Generator) -> list[Batch]:
    if len(train) < n_clients:
        raise ValueError(f"dataset of {len(train)} samples is smaller than {n_clients} clients")
    perm = rng.permutation(len(train))
    return [train.take(np.sort(part)) for part in np.array_split(perm, n_clients)]


def partition(train: Batch, n_clients: int, alpha: float | None, rng: np.random.Generator) -> list[Batch]:
    if alpha is None:
        return iid_partition(train, n_clients, rng)
    return dirichlet_partition(train, n_clients, alpha, rng)


def label_entropy(shard: Batch, n_classes: int) -> float:
    counts = np.bincount(shard.targets, minlength=n_classes).astype(float)
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def save_csv(batch: Batch, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(batch.inputs.shape[1])] + ["label"])
        for row, y in zip(batch.inputs, batch.targets):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def load_csv(path) -> Batch:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "label":
        raise ValueError("last CSV column must be 'label'")
    X = np.array([[float(v) for v in r[:-1]] for r in body])
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return Batch(X, y)
