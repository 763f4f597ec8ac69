"""Synthetic data, non-IID partitioning, and per-client train/validation splits.

The generator produces Gaussian class clusters as a desk-scale stand-in for
real corpora. Labels are spread across clients by one Dirichlet draw per
class, with the concentration parameter controlling heterogeneity (small
alpha = strongly skewed clients). Each client's rows are then split 4:1 into
training and validation, stratified by class; classes with fewer than
`min_class` samples on a client stay whole in training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeding
from .errors import ConfigurationError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class Partition:
    """Disjoint, covering assignment of dataset rows to clients."""

    client_indices: list[np.ndarray]
    alpha: float

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


@dataclass(frozen=True)
class ClientHandle:
    """One materialized client: its rows split into train/val, plus its
    aggregation weight (training-size share of the population)."""

    client_id: int
    train_indices: np.ndarray
    val_indices: np.ndarray
    weight: float


def generate_synthetic(
    classes: int, p: int, n: int, class_sep: float, seed: int
) -> Dataset:
    """Gaussian clusters with unit covariance and means `class_sep` apart.

    Per-class counts differ by at most one. When p >= classes the means sit on
    scaled one-hot axes (exact pairwise distance); otherwise they are spaced
    `class_sep` apart along the first axis.
    """
    if classes < 2:
        raise ConfigurationError("classes must be >= 2")
    if n < classes:
        raise ConfigurationError("n must be >= classes")
    if p < 1:
        raise ConfigurationError("p must be >= 1")

    rng = seeding.substream(seed, seeding.DATA)
    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1

    means = np.zeros((classes, p))
    if p >= classes:
        for c in range(classes):
            means[c, c] = class_sep / np.sqrt(2.0)
    else:
        for c in range(classes):
            means[c, 0] = class_sep * c

    features = np.empty((n, p))
    labels = np.empty(n, dtype=np.int64)
    row = 0
    for c in range(classes):
        k = int(counts[c])
        features[row : row + k] = means[c] + rng.standard_normal((k, p))
        labels[row : row + k] = c
        row += k

    order = rng.permutation(n)
    return Dataset(features=features[order], labels=labels[order], num_classes=classes)


def dirichlet_partition(
    labels: np.ndarray, num_clients: int, alpha: float, seed: int
) -> Partition:
    """Allocate each class's rows across clients by a Dirichlet(alpha) draw.

    Rounding residual rows go to the argmax-proportion client. A client left
    empty is repaired by taking one row from the currently largest client, so
    every client the round loop can query holds data.
    """
    if num_clients < 1:
        raise ConfigurationError("num_clients must be >= 1")
    if alpha <= 0:
        raise ConfigurationError("alpha must be > 0")
    n = len(labels)
    if num_clients > n:
        raise ConfigurationError(f"cannot spread {n} rows over {num_clients} clients")

    rng = seeding.substream(seed, seeding.PARTITION)
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        rng.shuffle(rows)
        props = rng.dirichlet(np.full(num_clients, alpha))
        counts = np.floor(props * len(rows)).astype(int)
        counts[int(np.argmax(props))] += len(rows) - counts.sum()
        start = 0
        for i in range(num_clients):
            buckets[i].extend(rows[start : start + counts[i]].tolist())
            start += counts[i]

    # Empty-client repair: move one row from the largest client (lowest id on ties).
    for i in range(num_clients):
        while not buckets[i]:
            donor = max(range(num_clients), key=lambda j: (len(buckets[j]), -j))
            if len(buckets[donor]) <= 1:
                raise ConfigurationError("not enough rows to give every client data")
            buckets[i].append(buckets[donor].pop())

    client_indices = [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
    return Partition(client_indices=client_indices, alpha=alpha)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_split(
    labels: np.ndarray,
    partition: Partition,
    val_fraction: float = 0.2,
    min_class: int = 4,
) -> list[ClientHandle]:
    """Per-client stratified split into train and validation.

    The validation target is round(val_fraction * rows-in-eligible-classes),
    distributed over classes by largest remainder. Classes below `min_class`
    samples on a client are retained whole in training. Weights are training
    sizes normalized over the population.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError("val_fraction must lie in (0, 1)")

    handles: list[ClientHandle] = []
    for cid, rows in enumerate(partition.client_indices):
        by_class: dict[int, np.ndarray] = {}
        for c in np.unique(labels[rows]):
            by_class[int(c)] = rows[labels[rows] == c]

        eligible = {c: r for c, r in by_class.items() if len(r) >= min_class}
        train_parts = [r for c, r in by_class.items() if c not in eligible]

        val_parts: list[np.ndarray] = []
        if eligible:
            total = sum(len(r) for r in eligible.values())
            target = min(_round_half_up(val_fraction * total), total - len(eligible))
            target = max(target, 0)
            quotas = {c: val_fraction * len(r) for c, r in eligible.items()}
            base = {c: min(int(np.floor(q)), len(eligible[c]) - 1) for c, q in quotas.items()}
            leftover = target - sum(base.values())
            # Hand out the remainder by largest fractional part, ties by class id.
            order = sorted(eligible, key=lambda c: (-(quotas[c] - np.floor(quotas[c])), c))
            for c in order:
                if leftover <= 0:
                    break
                if base[c] < len(eligible[c]) - 1:
                    base[c] += 1
                    leftover -= 1
            for c, r in sorted(eligible.items()):
                k = base[c]
                if k > 0:
                    val_parts.append(r[-k:])
                    train_parts.append(r[:-k])
                else:
                    train_parts.append(r)

        train = np.sort(np.concatenate(train_parts)) if train_parts else np.empty(0, dtype=np.int64)
        val = np.sort(np.concatenate(val_parts)) if val_parts else np.empty(0, dtype=np.int64)
        handles.append(ClientHandle(client_id=cid, train_indices=train, val_indices=val, weight=0.0))

    total_train = sum(len(h.train_indices) for h in handles)
    if total_train == 0:
        raise ConfigurationError("no training rows across clients")
    return [
        ClientHandle(
            client_id=h.client_id,
            train_indices=h.train_indices,
            val_indices=h.val_indices,
            weight=len(h.train_indices) / total_train,
        )
        for h in handles
    ]


def save_partition(partition: Partition, path: str | Path) -> None:
    """Write the client -> row-index map as JSON for run reproducibility."""
    payload = {
        "alpha": partition.alpha,
        "clients": {str(i): rows.tolist() for i, rows in enumerate(partition.client_indices)},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
