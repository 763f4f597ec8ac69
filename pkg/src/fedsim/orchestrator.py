"""The federated round loop.

Each round: ask the scheduler for the participant count (which may trigger an
intermediate collection for a solve), sample that many clients, run their
local training (optionally in a thread pool; results are reduced in client-id
order so scheduling cannot change the outcome), aggregate the transmitted
deltas into the next global model, evaluate, and append a record. The
communication ledger counts one unit per client-to-server model payload,
including intermediate collections; loss probes are free.
"""

from __future__ import annotations

import os
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit, seeding
from .compress import Compressor
from .datasim import ClientHandle, Dataset
from .errors import ConfigurationError, NumericError, RoundAbort
from .ispcore import (
    IspSchedule,
    LossEstimator,
    ParticipantScheduler,
    SolveContext,
    SolveRecord,
)
from .numkit import Batch, ClientUpdate, ModelSpec, OptimizerState
from .sampling import SamplingStrategy

WORKERS_ENV = "FEDSIM_MAX_WORKERS"


@dataclass(frozen=True)
class TrainingConfig:
    rounds: int
    epochs: int
    learning_rate: float
    optimizer: str
    batch_size: int
    patience: int
    seed: int

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.seed < 0:
            raise ConfigurationError("seed must be >= 0")


class ClientPool:
    """Materialized clients plus vectorized evaluation kernels.

    Training rows are packed once into contiguous blocks per client so the
    per-client mean losses a solve needs reduce to one forward pass over the
    gathered rows plus a segment mean.
    """

    def __init__(self, dataset: Dataset, handles: list[ClientHandle], model: ModelSpec):
        self.dataset = dataset
        self.handles = handles
        self.model = model
        self.num_clients = len(handles)
        self.weights = np.array([h.weight for h in handles])
        self.all_ids = list(range(self.num_clients))

        self._train_rows = {h.client_id: h.train_indices for h in handles}
        val_parts = [h.val_indices for h in handles if len(h.val_indices) > 0]
        self._val_rows = np.concatenate(val_parts) if val_parts else np.empty(0, dtype=np.int64)

    def client_losses(self, params: np.ndarray, subset: Sequence[int]) -> np.ndarray:
        """Mean training cross-entropy of each client in `subset` at `params`."""
        rows = [self._train_rows[int(i)] for i in subset]
        lengths = np.array([len(r) for r in rows])
        gathered = np.concatenate(rows)
        per_row = numkit.per_row_loss(
            params,
            Batch(self.dataset.features[gathered], self.dataset.labels[gathered]),
            self.model,
        )
        bounds = np.concatenate([[0], np.cumsum(lengths)])
        return np.add.reduceat(per_row, bounds[:-1]) / lengths

    def validation_metrics(self, params: np.ndarray) -> tuple[float, float]:
        """Validation loss and accuracy over every client's held-out rows,
        weighted by validation sizes (equivalently: pooled)."""
        if len(self._val_rows) == 0:
            return float("nan"), float("nan")
        x = self.dataset.features[self._val_rows]
        y = self.dataset.labels[self._val_rows]
        loss = float(numkit.per_row_loss(params, Batch(x, y), self.model).mean())
        accuracy = float((numkit.predict(params, x, self.model) == y).mean())
        return loss, accuracy


@dataclass
class RoundRecord:
    """One JSONL line of a run: an ordinary training round or an intermediate
    collection feeding a solve."""

    round_index: int
    m: int
    participant_ids: list[int]
    train_loss: float
    val_loss: float | None
    val_accuracy: float | None
    ledger_delta: int
    is_solve_round: bool
    is_intermediate: bool
    solve: SolveRecord | None = None


@dataclass
class CommunicationLedger:
    """Monotone count of client-to-server model-payload exchanges."""

    deltas: list[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.deltas)

    def add(self, count: int) -> None:
        if count < 0:
            raise ConfigurationError("ledger deltas cannot be negative")
        self.deltas.append(count)


@dataclass
class RunResult:
    final_params: np.ndarray
    best_params: np.ndarray
    records: list[RoundRecord]
    ledger: CommunicationLedger
    best_round: int | None
    seed: int
    config_echo: dict | None = None

    def communications_total(self) -> int:
        return self.ledger.total

    def communications_to_best(self) -> int:
        """Ledger fold up to and including the best validation round."""
        if self.best_round is None:
            return 0
        total = 0
        for rec in self.records:
            total += rec.ledger_delta
            if not rec.is_intermediate and rec.round_index == self.best_round:
                break
        return total


def max_workers() -> int:
    """Worker cap for parallel client updates, from the environment (>=1)."""
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, value)


def aggregate(
    base_params: np.ndarray, updates: list[ClientUpdate], weights: np.ndarray
) -> np.ndarray:
    """FedAvg step: weighted mean of the participants' models, with weights
    renormalized over the participants. Updates are folded in client-id order,
    so arrival order never changes the result."""
    if not updates:
        raise ConfigurationError("cannot aggregate an empty round")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    return numkit.weighted_delta_mean(
        base_params, [u.payload_delta() for u in ordered], np.asarray(weights)[ids]
    )


def apply_compression(
    update: ClientUpdate, compressor: Compressor, rng: np.random.Generator
) -> ClientUpdate:
    """Replace the transmitted payload by its sparsified form."""
    return replace(update, sparse=compressor.apply(update.delta, rng))


def run_training(
    pool: ClientPool,
    training: TrainingConfig,
    scheduler: ParticipantScheduler,
    strategy: SamplingStrategy,
    compressor: Compressor | None = None,
    config_echo: dict | None = None,
) -> RunResult:
    """Execute the full round loop and return records, ledger, and models.

    Early-stops once validation loss has not improved for `patience` rounds.
    Identical configuration and seed reproduce the result bit for bit,
    including with worker parallelism enabled.
    """
    model = pool.model
    seed = training.seed
    params = numkit.init_params(model, seed)
    opt_template = OptimizerState(kind=training.optimizer, learning_rate=training.learning_rate)
    estimator = LossEstimator(
        pool.client_losses, pool.weights, getattr(scheduler, "surrogate", None)
    )
    workers = max_workers()

    isp_cfg = scheduler.cfg if isinstance(scheduler, IspSchedule) else None
    intermediate_epochs = training.epochs
    if isp_cfg is not None and isp_cfg.intermediate_epochs is not None:
        intermediate_epochs = isp_cfg.intermediate_epochs

    def collect(ids: Sequence[int], round_index: int, phase: int, epochs: int) -> list[ClientUpdate]:
        def one(cid: int) -> ClientUpdate:
            try:
                handle = pool.handles[cid]
                update = numkit.client_update(
                    params,
                    pool.dataset.features,
                    pool.dataset.labels,
                    handle.train_indices,
                    handle.val_indices,
                    cid,
                    model,
                    epochs,
                    training.batch_size,
                    opt_template,
                    seed,
                    round_index,
                    phase,
                )
            except Exception as exc:
                raise RoundAbort(round_index, cid, exc) from exc
            if compressor is not None:
                rng = seeding.substream(seed, seeding.COMPRESS, cid, round_index, phase)
                update = apply_compression(update, compressor, rng)
            return update

        if workers > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                updates = list(executor.map(one, ids))
        else:
            updates = [one(cid) for cid in ids]
        updates.sort(key=lambda u: u.client_id)
        strategy.observe_losses({u.client_id: u.train_loss for u in updates})
        return updates

    records: list[RoundRecord] = []
    ledger = CommunicationLedger()
    best_val = np.inf
    best_round: int | None = None
    best_params = params.copy()

    if isinstance(scheduler, IspSchedule):
        scheduler.prime(estimator.evaluate(params, pool.all_ids))

    m_prev = min(scheduler.initial_count, pool.num_clients)
    for round_index in range(training.rounds):
        ctx = SolveContext(
            round_index=round_index,
            params=params,
            all_client_ids=pool.all_ids,
            weights=pool.weights,
            strategy=strategy,
            estimator=estimator,
            collect_updates=lambda ids, r=round_index: collect(ids, r, 1, intermediate_epochs),
            total_clients=pool.num_clients,
        )
        m_next, solve = scheduler.next_count(round_index, m_prev, ctx)
        m_next = min(max(1, m_next), pool.num_clients)

        if solve is not None:
            ledger.add(len(solve.participant_ids))
            records.append(
                RoundRecord(
                    round_index=round_index,
                    m=len(solve.participant_ids),
                    participant_ids=list(solve.participant_ids),
                    train_loss=solve.baseline,
                    val_loss=None,
                    val_accuracy=None,
                    ledger_delta=len(solve.participant_ids),
                    is_solve_round=True,
                    is_intermediate=True,
                    solve=solve,
                )
            )

        participants = strategy.sample(m_next, pool.all_ids)
        updates = collect(participants, round_index, 0, training.epochs)
        params = aggregate(params, updates, pool.weights)
        if not np.all(np.isfinite(params)):
            raise NumericError(f"non-finite global model after round {round_index}")

        train_loss = estimator.evaluate(params, participants)
        val_loss, val_accuracy = pool.validation_metrics(params)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at round {round_index}")

        ledger.add(len(participants))
        records.append(
            RoundRecord(
                round_index=round_index,
                m=m_next,
                participant_ids=participants,
                train_loss=train_loss,
                val_loss=val_loss,
                val_accuracy=val_accuracy,
                ledger_delta=len(participants),
                is_solve_round=solve is not None,
                is_intermediate=False,
            )
        )

        if val_loss < best_val:
            best_val = val_loss
            best_round = round_index
            best_params = params.copy()
        elif best_round is not None and round_index - best_round >= training.patience:
            break
        m_prev = m_next

    return RunResult(
        final_params=params,
        best_params=best_params,
        records=records,
        ledger=ledger,
        best_round=best_round,
        seed=seed,
        config_echo=config_echo,
    )
