"""Adaptive participant-count control.

The round loop asks a scheduler for the next participant count. Fixed and
linear schedules answer from arithmetic alone. The adaptive scheduler answers
by running a solve once every `solve_every` rounds: it collects an
intermediate batch of client updates, then searches for the smallest count m
whose estimated next-round loss change is negative (feasibility mode), or the
count maximizing improvement-per-client (relative-improvement mode). Loss
changes are estimated by Monte-Carlo: draw `depth` subsets of size m through
the active sampling strategy, aggregate each into a candidate model, average
the probed losses, and smooth against the history of previous solve-event
losses with an EMA. A momentum blend with the previous count damps the
greediness of single-solve decisions.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import numkit, seeding
from .errors import ConfigurationError
from .numkit import Batch, ClientUpdate, ModelSpec
from .sampling import SamplingStrategy

FEASIBILITY = "feasibility"
RELATIVE_IMPROVEMENT = "relative_improvement"


@dataclass(frozen=True)
class IspConfig:
    """Knobs of the adaptive count controller.

    solve_every: rounds between solves; depth: Monte-Carlo subsets per
    candidate count; resolution: step of the candidate grid; momentum: weight
    of the fresh solve result against the previous count (1 disables history);
    ema_window: smoothing window for solve-event losses (1 disables smoothing);
    intermediate_size: clients collected for a solve (None = everyone);
    initial_m: count used until the first solve lands.
    """

    solve_every: int = 20
    depth: int = 10
    resolution: int = 1
    momentum: float = 0.5
    ema_window: int = 5
    intermediate_size: int | None = None
    initial_m: int = 20
    mode: str = FEASIBILITY
    ri_exponent: float = 1.0
    exhaustive: bool = False
    intermediate_epochs: int | None = None

    def __post_init__(self) -> None:
        if self.solve_every < 1:
            raise ConfigurationError("solve_every must be >= 1")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.resolution < 1:
            raise ConfigurationError("resolution must be >= 1")
        if not 0.0 < self.momentum <= 1.0:
            raise ConfigurationError("momentum must lie in (0, 1]")
        if self.ema_window < 1:
            raise ConfigurationError("ema_window must be >= 1")
        if self.intermediate_size is not None and self.intermediate_size < 1:
            raise ConfigurationError("intermediate_size must be >= 1")
        if self.initial_m < 1:
            raise ConfigurationError("initial_m must be >= 1")
        if self.mode not in (FEASIBILITY, RELATIVE_IMPROVEMENT):
            raise ConfigurationError(f"unknown controller mode: {self.mode!r}")
        if self.ri_exponent <= 0:
            raise ConfigurationError("ri_exponent must be > 0")
        if self.intermediate_epochs is not None and self.intermediate_epochs < 1:
            raise ConfigurationError("intermediate_epochs must be >= 1")


def ema_step(previous: float | None, value: float, window: int) -> float:
    """One exponential-moving-average update with lambda = 2 / (window + 1).

    The first observation passes through unchanged.
    """
    if window < 1:
        raise ConfigurationError("ema window must be >= 1")
    if previous is None:
        return value
    lam = 2.0 / (window + 1.0)
    return lam * value + (1.0 - lam) * previous


class LossHistory:
    """Raw and smoothed global-loss values, one entry per solve event."""

    def __init__(self, ema_window: int):
        if ema_window < 1:
            raise ConfigurationError("ema_window must be >= 1")
        self.ema_window = ema_window
        self.raw: list[float] = []
        self.smoothed: list[float] = []

    def __len__(self) -> int:
        return len(self.raw)

    @property
    def latest_smoothed(self) -> float:
        if not self.smoothed:
            raise ConfigurationError("loss history is empty; record a baseline first")
        return self.smoothed[-1]

    def smooth(self, value: float) -> float:
        """EMA of `value` against the recorded history, without recording it."""
        previous = self.smoothed[-1] if self.smoothed else None
        return ema_step(previous, value, self.ema_window)

    def record(self, value: float) -> float:
        smoothed = self.smooth(value)
        self.raw.append(float(value))
        self.smoothed.append(float(smoothed))
        return smoothed


@dataclass(frozen=True)
class SurrogateLoss:
    """Server-held proxy dataset: lets a solve probe candidate models without
    touching clients."""

    features: np.ndarray
    labels: np.ndarray
    model: ModelSpec

    def evaluate(self, params: np.ndarray) -> float:
        return numkit.loss(params, Batch(self.features, self.labels), self.model)


def make_surrogate(
    features: np.ndarray,
    labels: np.ndarray,
    model: ModelSpec,
    size: int,
    seed: int,
    label_noise: float = 0.0,
    feature_jitter: float = 0.0,
) -> SurrogateLoss:
    """Carve a `size`-row holdout from the given pool, optionally corrupted.

    `label_noise` relabels that fraction of rows to a uniformly random other
    class; `feature_jitter` adds centered Gaussian noise of that scale.
    """
    if not 1 <= size <= len(labels):
        raise ConfigurationError("surrogate size out of range")
    if not 0.0 <= label_noise <= 1.0:
        raise ConfigurationError("label_noise must lie in [0, 1]")
    if feature_jitter < 0.0:
        raise ConfigurationError("feature_jitter must be >= 0")

    rng = seeding.substream(seed, seeding.SURROGATE)
    rows = rng.choice(len(labels), size=size, replace=False)
    x = features[rows].copy()
    y = labels[rows].copy()
    if label_noise > 0.0:
        flip = rng.random(size) < label_noise
        shift = rng.integers(1, model.num_classes, size=size)
        y[flip] = (y[flip] + shift[flip]) % model.num_classes
    if feature_jitter > 0.0:
        x += feature_jitter * rng.standard_normal(x.shape)
    return SurrogateLoss(features=x, labels=y, model=model)


class LossEstimator:
    """Global-loss probe used during solves.

    With a surrogate, evaluation is a single server-side pass and the subset
    argument is ignored. Without one, the probe is the subset-weighted client
    loss with weights renormalized over the subset, so values stay comparable
    across candidate counts. Loss probes are pure reads: they never count as
    payload exchanges.
    """

    def __init__(
        self,
        client_losses: Callable[[np.ndarray, Sequence[int]], np.ndarray],
        weights: np.ndarray,
        surrogate: SurrogateLoss | None = None,
    ):
        self._client_losses = client_losses
        self._weights = np.asarray(weights, dtype=float)
        self.surrogate = surrogate

    def evaluate(self, params: np.ndarray, subset: Sequence[int]) -> float:
        if self.surrogate is not None:
            return self.surrogate.evaluate(params)
        if len(subset) == 0:
            raise ConfigurationError("cannot estimate a loss over an empty subset")
        losses = self._client_losses(params, subset)
        w = self._weights[np.asarray(subset)]
        w = w / w.sum()
        return float(w @ losses)


@dataclass(frozen=True)
class SolveInputs:
    """Client states collected in an intermediate round, stored as deltas
    against the current global model."""

    base_params: np.ndarray
    deltas: Mapping[int, np.ndarray]
    weights: np.ndarray
    total_clients: int

    @property
    def available(self) -> list[int]:
        return sorted(self.deltas)


@dataclass(frozen=True)
class SolveOutcome:
    inner_m: int
    chosen_m: int
    candidates: list[tuple[int, float]]


@dataclass(frozen=True)
class SolveRecord:
    """Structured log of one solve event."""

    round_index: int
    participant_ids: list[int]
    baseline: float
    candidates: list[tuple[int, float]]
    inner_m: int
    chosen_m: int


def _aggregate_subset(inputs: SolveInputs, subset: Sequence[int]) -> np.ndarray:
    ids = sorted(subset)
    deltas = [inputs.deltas[i] for i in ids]
    return numkit.weighted_delta_mean(inputs.base_params, deltas, inputs.weights[ids])


def expect_estim(
    inputs: SolveInputs,
    m: int,
    strategy: SamplingStrategy,
    history: LossHistory,
    estimator: LossEstimator,
    depth: int,
    exhaustive: bool = False,
) -> float:
    """Estimated smoothed next-round loss change at participant count m.

    Draws `depth` subsets of size m through the strategy (or enumerates every
    subset in exhaustive mode), aggregates each into a candidate model, probes
    its loss, averages, smooths the average against the solve-event history,
    and returns the difference to the latest smoothed baseline.
    """
    available = inputs.available
    if not 1 <= m <= len(available):
        raise ConfigurationError(f"candidate count {m} outside available {len(available)}")
    if exhaustive:
        subsets: list[Sequence[int]] = [list(c) for c in itertools.combinations(available, m)]
    else:
        subsets = [strategy.sample(m, available) for _ in range(depth)]

    total = 0.0
    for subset in subsets:
        candidate = _aggregate_subset(inputs, subset)
        total += estimator.evaluate(candidate, subset)
    raw = total / len(subsets)
    return history.smooth(raw) - history.latest_smoothed


def candidate_grid(limit: int, resolution: int) -> list[int]:
    """1, 1+w, 1+2w, ... capped at `limit`, with `limit` always included."""
    grid = list(range(1, limit + 1, resolution))
    if grid[-1] != limit:
        grid.append(limit)
    return grid


def blend_counts(inner_m: int, previous_m: int, momentum: float, max_clients: int) -> int:
    """Momentum blend of the fresh solve result with the previous count,
    rounded half-up and clamped to [1, max_clients]."""
    value = momentum * inner_m + (1.0 - momentum) * previous_m
    return int(min(max(np.floor(value + 0.5), 1), max_clients))


def isp_select(
    inputs: SolveInputs,
    previous_m: int,
    cfg: IspConfig,
    strategy: SamplingStrategy,
    history: LossHistory,
    estimator: LossEstimator,
) -> SolveOutcome:
    """Feasibility search: smallest enumerated count with a negative estimated
    loss change, exiting early at the first hit. Falls back to the full client
    population when nothing on the grid is feasible."""
    available = inputs.available
    if not available:
        raise ConfigurationError("solve requires at least one collected client state")

    candidates: list[tuple[int, float]] = []
    inner_m: int | None = None
    for m in candidate_grid(len(available), cfg.resolution):
        delta_f = expect_estim(
            inputs, m, strategy, history, estimator, cfg.depth, cfg.exhaustive
        )
        candidates.append((m, delta_f))
        if delta_f < 0.0:
            inner_m = m
            break
    if inner_m is None:
        inner_m = inputs.total_clients
    chosen = blend_counts(inner_m, previous_m, cfg.momentum, inputs.total_clients)
    return SolveOutcome(inner_m=inner_m, chosen_m=chosen, candidates=candidates)


def isp_ri_select(
    inputs: SolveInputs,
    previous_m: int,
    cfg: IspConfig,
    strategy: SamplingStrategy,
    history: LossHistory,
    estimator: LossEstimator,
) -> SolveOutcome:
    """Relative-improvement search: maximize (-delta_f) / m^alpha over the full
    grid (no early exit); ties resolve to the smallest count."""
    available = inputs.available
    if not available:
        raise ConfigurationError("solve requires at least one collected client state")

    candidates: list[tuple[int, float]] = []
    best_m: int | None = None
    best_score = -np.inf
    for m in candidate_grid(len(available), cfg.resolution):
        delta_f = expect_estim(
            inputs, m, strategy, history, estimator, cfg.depth, cfg.exhaustive
        )
        candidates.append((m, delta_f))
        score = -delta_f / m**cfg.ri_exponent
        if score > best_score:
            best_score = score
            best_m = m
    assert best_m is not None
    chosen = blend_counts(best_m, previous_m, cfg.momentum, inputs.total_clients)
    return SolveOutcome(inner_m=best_m, chosen_m=chosen, candidates=candidates)


@dataclass
class SolveContext:
    """Everything a solve needs from the round loop: the current model, who can
    be reached, how to collect their updates, and how to probe losses."""

    round_index: int
    params: np.ndarray
    all_client_ids: list[int]
    weights: np.ndarray
    strategy: SamplingStrategy
    estimator: LossEstimator
    collect_updates: Callable[[Sequence[int]], list[ClientUpdate]]
    total_clients: int


class ParticipantScheduler:
    """Emits the participant count for the next round."""

    def prime(self, baseline_loss: float) -> None:
        """Hook called once before round 0 with the initial global loss."""

    @property
    def initial_count(self) -> int:
        raise NotImplementedError

    def next_count(
        self, round_index: int, previous_m: int, ctx: SolveContext | None = None
    ) -> tuple[int, SolveRecord | None]:
        raise NotImplementedError


class FixedSchedule(ParticipantScheduler):
    def __init__(self, m: int):
        if m < 1:
            raise ConfigurationError("fixed count must be >= 1")
        self.m = m

    @property
    def initial_count(self) -> int:
        return self.m

    def next_count(self, round_index, previous_m, ctx=None):
        return self.m, None


class LinearSchedule(ParticipantScheduler):
    """Staircase from m_start toward m_final, one unit step every `step_every`
    rounds, then a plateau."""

    def __init__(self, m_start: int, m_final: int, step_every: int):
        if m_start < 1 or m_final < 1:
            raise ConfigurationError("schedule endpoints must be >= 1")
        if step_every < 1:
            raise ConfigurationError("step_every must be >= 1")
        self.m_start = m_start
        self.m_final = m_final
        self.step_every = step_every

    @property
    def initial_count(self) -> int:
        return self.m_start

    def next_count(self, round_index, previous_m, ctx=None):
        steps = round_index // self.step_every
        if self.m_final >= self.m_start:
            return min(self.m_start + steps, self.m_final), None
        return max(self.m_start - steps, self.m_final), None


class IspSchedule(ParticipantScheduler):
    """Adaptive schedule driven by intermediate-round solves."""

    def __init__(self, cfg: IspConfig, surrogate: SurrogateLoss | None = None):
        self.cfg = cfg
        self.surrogate = surrogate
        self.history = LossHistory(cfg.ema_window)
        self.solve_records: list[SolveRecord] = []

    @property
    def initial_count(self) -> int:
        return self.cfg.initial_m

    def prime(self, baseline_loss: float) -> None:
        self.history.record(baseline_loss)

    def next_count(self, round_index, previous_m, ctx=None):
        if round_index % self.cfg.solve_every != 0:
            return previous_m, None
        if ctx is None:
            raise ConfigurationError("adaptive schedule needs a solve context on solve rounds")
        return self._solve(previous_m, ctx)

    def _solve(self, previous_m: int, ctx: SolveContext) -> tuple[int, SolveRecord]:
        total = ctx.total_clients
        size = self.cfg.intermediate_size
        if size is not None and size > total:
            raise ConfigurationError("intermediate_size exceeds the client population")
        if size is None or size >= total:
            ids = list(ctx.all_client_ids)
        else:
            ids = ctx.strategy.sample(size, ctx.all_client_ids)

        updates = ctx.collect_updates(ids)
        inputs = SolveInputs(
            base_params=ctx.params,
            deltas={u.client_id: u.payload_delta() for u in updates},
            weights=ctx.weights,
            total_clients=total,
        )
        # Fresh baseline for this solve event: loss of the current global
        # model, probed over the clients that showed up (or the surrogate).
        self.history.record(ctx.estimator.evaluate(ctx.params, ids))

        select = isp_ri_select if self.cfg.mode == RELATIVE_IMPROVEMENT else isp_select
        outcome = select(inputs, previous_m, self.cfg, ctx.strategy, self.history, ctx.estimator)
        record = SolveRecord(
            round_index=ctx.round_index,
            participant_ids=ids,
            baseline=self.history.latest_smoothed,
            candidates=outcome.candidates,
            inner_m=outcome.inner_m,
            chosen_m=outcome.chosen_m,
        )
        self.solve_records.append(record)
        return outcome.chosen_m, record


def participant_number_strategy(
    round_index: int,
    previous_m: int,
    scheduler: ParticipantScheduler,
    ctx: SolveContext | None = None,
) -> tuple[int, SolveRecord | None]:
    """Round-cadence wrapper: non-solve rounds keep the previous count; solve
    rounds delegate to the scheduler's search."""
    return scheduler.next_count(round_index, previous_m, ctx)
