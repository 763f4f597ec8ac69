"""Shared builders for round-loop and acceptance tests."""

from __future__ import annotations

import numpy as np
import pytest

from fedsim import ModelSpec, TrainingConfig
from fedsim.datasim import dirichlet_partition, generate_synthetic, stratified_split
from fedsim.orchestrator import ClientPool


def make_pool(
    num_clients=8,
    n=240,
    classes=3,
    p=4,
    alpha=0.5,
    class_sep=2.0,
    seed=0,
    model_kind="softmax",
    hidden=6,
) -> ClientPool:
    dataset = generate_synthetic(classes=classes, p=p, n=n, class_sep=class_sep, seed=seed)
    partition = dirichlet_partition(dataset.labels, num_clients, alpha, seed)
    handles = stratified_split(dataset.labels, partition)
    model = ModelSpec(model_kind, classes, p, hidden=hidden if model_kind == "mlp" else 0)
    return ClientPool(dataset, handles, model)


def make_training(
    seed=0, rounds=10, epochs=1, lr=0.3, optimizer="sgd", batch_size=8, patience=100
) -> TrainingConfig:
    return TrainingConfig(
        rounds=rounds,
        epochs=epochs,
        learning_rate=lr,
        optimizer=optimizer,
        batch_size=batch_size,
        patience=patience,
        seed=seed,
    )


@pytest.fixture
def serial_workers(monkeypatch):
    monkeypatch.delenv("FEDSIM_MAX_WORKERS", raising=False)


@pytest.fixture(autouse=True)
def _stable_worker_env(monkeypatch):
    # Tests control parallelism explicitly; default to serial execution.
    monkeypatch.setenv("FEDSIM_MAX_WORKERS", "1")


def ledger_fold(records) -> int:
    """Independent ledger oracle: sum the per-record deltas."""
    return sum(r.ledger_delta for r in records)


def expected_isp_ledger(records) -> int:
    """Spec formula oracle: sum of per-round counts plus intermediate sizes."""
    total = 0
    for r in records:
        total += len(r.participant_ids)
    return total
