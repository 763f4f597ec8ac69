"""Participant-count controller tests: smoothing, momentum, the Monte-Carlo
loss-change estimator, both search modes, and the baseline schedules."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from fedsim import (
    Batch,
    ConfigurationError,
    FixedSchedule,
    IspConfig,
    IspSchedule,
    LinearSchedule,
    LossEstimator,
    LossHistory,
    ModelSpec,
    SolveInputs,
    UniformSampling,
    blend_counts,
    ema_step,
    expect_estim,
    isp_ri_select,
    isp_select,
    make_surrogate,
)
from fedsim import numkit
from fedsim.ispcore import candidate_grid, participant_number_strategy
from fedsim.orchestrator import ClientPool
from fedsim.datasim import ClientHandle, Dataset
from fedsim.sampling import PowDSampling
from fedsim.seeding import substream


class QuadraticProbe:
    """Test double for the loss estimator: f(x) = ||x - target||^2 + offset,
    convex with a known optimum. Ignores the subset argument (surrogate-like)."""

    def __init__(self, target, offset=0.0, scale=1.0):
        self.target = np.asarray(target, dtype=float)
        self.offset = offset
        self.scale = scale
        self.calls = 0

    def evaluate(self, params, subset):
        self.calls += 1
        diff = params - self.target
        return self.scale * (float(diff @ diff) + self.offset)


class SizeKeyedProbe:
    """Test double returning baseline + table[len(subset)]."""

    def __init__(self, baseline, table):
        self.baseline = baseline
        self.table = table

    def evaluate(self, params, subset):
        if len(subset) == 0:
            return self.baseline
        return self.baseline + self.table[len(subset)]


def inputs_for(base, deltas_by_id, total=None, weights=None):
    n = max(deltas_by_id) + 1
    w = np.ones(n) / n if weights is None else np.asarray(weights, dtype=float)
    return SolveInputs(
        base_params=np.asarray(base, dtype=float),
        deltas={i: np.asarray(d, dtype=float) for i, d in deltas_by_id.items()},
        weights=w,
        total_clients=total if total is not None else n,
    )


def primed_history(window, baseline):
    history = LossHistory(window)
    history.record(baseline)
    return history


class TestEma:
    def test_first_value_passes_through(self):
        assert ema_step(None, 0.7, 5) == 0.7
        history = LossHistory(5)
        assert history.record(0.7) == 0.7

    def test_constant_stream_is_fixed_point(self):
        history = LossHistory(4)
        for _ in range(10):
            assert history.record(1.25) == 1.25

    def test_window5_formula(self):
        # lambda = 1/3: 0.6/3 + 0.9 * 2/3 = 0.8
        assert ema_step(0.9, 0.6, 5) == pytest.approx(0.8, abs=1e-15)

    def test_window1_disables_smoothing(self):
        history = primed_history(1, 3.0)
        assert history.smooth(7.5) == 7.5

    def test_smooth_does_not_record(self):
        history = primed_history(5, 1.0)
        history.smooth(100.0)
        assert history.latest_smoothed == 1.0
        assert len(history) == 1


class TestBlendCounts:
    def test_halfway_blend(self):
        assert blend_counts(10, 20, 0.5, 100) == 15

    def test_momentum_one_ignores_history(self):
        for prev in [1, 7, 50]:
            assert blend_counts(9, prev, 1.0, 100) == 9

    def test_rounds_half_up(self):
        assert blend_counts(1, 20, 0.5, 100) == 11  # 10.5 -> 11

    def test_clamped_to_population(self):
        assert blend_counts(100, 100, 1.0, 40) == 40
        assert blend_counts(1, 1, 1.0, 40) == 1

    def test_bounded_by_inputs_before_clamping(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            inner = int(rng.integers(1, 60))
            prev = int(rng.integers(1, 60))
            beta = float(rng.uniform(0.01, 1.0))
            out = blend_counts(inner, prev, beta, 1000)
            assert min(inner, prev) <= out <= max(inner, prev)


class TestCandidateGrid:
    def test_unit_resolution_is_full_range(self):
        assert candidate_grid(5, 1) == [1, 2, 3, 4, 5]

    def test_limit_always_appended(self):
        assert candidate_grid(10, 4) == [1, 5, 9, 10]
        assert candidate_grid(9, 4) == [1, 5, 9]


def small_world(num_clients=5, rows_per_client=8, seed=0, classes=3, p=4):
    """Real per-client data and a matching pool for estimator tests."""
    rng = np.random.default_rng(seed)
    n = num_clients * rows_per_client
    features = rng.standard_normal((n, p))
    labels = rng.integers(0, classes, n)
    handles = []
    for cid in range(num_clients):
        rows = np.arange(cid * rows_per_client, (cid + 1) * rows_per_client)
        handles.append(
            ClientHandle(
                client_id=cid,
                train_indices=rows,
                val_indices=np.empty(0, dtype=np.int64),
                weight=1.0 / num_clients,
            )
        )
    model = ModelSpec("softmax", classes, p)
    pool = ClientPool(Dataset(features, labels, classes), handles, model)
    return pool, model


class TestLossEstimator:
    def test_full_subset_equals_global_weighted_loss(self):
        pool, model = small_world()
        estimator = LossEstimator(pool.client_losses, pool.weights)
        params = np.random.default_rng(1).standard_normal(model.param_dim)
        expected = 0.0
        for h in pool.handles:
            batch = Batch(pool.dataset.features[h.train_indices], pool.dataset.labels[h.train_indices])
            expected += h.weight * numkit.loss(params, batch, model)
        assert estimator.evaluate(params, pool.all_ids) == pytest.approx(expected, rel=1e-12)

    def test_singleton_subset_is_that_clients_loss(self):
        pool, model = small_world()
        estimator = LossEstimator(pool.client_losses, pool.weights)
        params = np.random.default_rng(2).standard_normal(model.param_dim)
        h = pool.handles[3]
        batch = Batch(pool.dataset.features[h.train_indices], pool.dataset.labels[h.train_indices])
        assert estimator.evaluate(params, [3]) == pytest.approx(
            numkit.loss(params, batch, model), rel=1e-12
        )

    def test_surrogate_over_full_training_pool_matches_client_path(self):
        pool, model = small_world()
        surrogate = make_surrogate(
            pool.dataset.features, pool.dataset.labels, model,
            size=len(pool.dataset.labels), seed=0,
        )
        with_surrogate = LossEstimator(pool.client_losses, pool.weights, surrogate)
        without = LossEstimator(pool.client_losses, pool.weights)
        params = np.random.default_rng(3).standard_normal(model.param_dim)
        assert with_surrogate.evaluate(params, []) == pytest.approx(
            without.evaluate(params, pool.all_ids), rel=1e-12
        )

    def test_renormalized_weights_on_partial_subsets(self):
        pool, model = small_world()
        estimator = LossEstimator(pool.client_losses, pool.weights)
        params = np.zeros(model.param_dim)
        subset = [0, 2]
        losses = pool.client_losses(params, subset)
        assert estimator.evaluate(params, subset) == pytest.approx(losses.mean(), rel=1e-12)


class TestMakeSurrogate:
    def test_uncorrupted_rows_come_from_pool(self):
        pool, model = small_world()
        surrogate = make_surrogate(pool.dataset.features, pool.dataset.labels, model, size=10, seed=4)
        assert surrogate.features.shape == (10, 4)

    def test_label_noise_flips_labels(self):
        pool, model = small_world(num_clients=10, rows_per_client=20)
        clean = make_surrogate(pool.dataset.features, pool.dataset.labels, model, size=200, seed=5)
        noisy = make_surrogate(
            pool.dataset.features, pool.dataset.labels, model,
            size=200, seed=5, label_noise=1.0,
        )
        assert np.all(noisy.labels != clean.labels)
        jittered = make_surrogate(
            pool.dataset.features, pool.dataset.labels, model,
            size=200, seed=5, feature_jitter=0.5,
        )
        assert not np.array_equal(jittered.features, clean.features)


class TestExpectEstim:
    def test_full_population_count_is_exact_loss_change(self):
        pool, model = small_world()
        estimator = LossEstimator(pool.client_losses, pool.weights)
        base = np.zeros(model.param_dim)
        rng = np.random.default_rng(5)
        deltas = {i: 0.1 * rng.standard_normal(model.param_dim) for i in range(5)}
        inputs = inputs_for(base, deltas, weights=pool.weights)

        baseline = estimator.evaluate(base, pool.all_ids)
        history = primed_history(1, baseline)
        strategy = UniformSampling(5, substream(0, 3))
        delta_f = expect_estim(inputs, 5, strategy, history, estimator, depth=4)

        full_aggregate = numkit.weighted_delta_mean(base, [deltas[i] for i in range(5)], pool.weights)
        expected = estimator.evaluate(full_aggregate, pool.all_ids) - baseline
        assert delta_f == expected

    def test_exhaustive_mode_matches_enumeration_oracle(self):
        # Independent oracle: enumerate all C(5,2)=10 subsets with local
        # arithmetic and average the probed losses.
        pool, model = small_world()
        estimator = LossEstimator(pool.client_losses, pool.weights)
        base = 0.2 * np.random.default_rng(6).standard_normal(model.param_dim)
        rng = np.random.default_rng(7)
        deltas = {i: 0.3 * rng.standard_normal(model.param_dim) for i in range(5)}
        inputs = inputs_for(base, deltas, weights=pool.weights)

        baseline = estimator.evaluate(base, pool.all_ids)
        history = primed_history(1, baseline)
        strategy = UniformSampling(5, substream(1, 3))
        delta_f = expect_estim(inputs, 2, strategy, history, estimator, depth=1, exhaustive=True)

        values = []
        for subset in itertools.combinations(range(5), 2):
            w = pool.weights[list(subset)]
            w = w / w.sum()
            agg = base.copy()
            for wi, cid in zip(w, subset):
                agg = agg + wi * deltas[cid]
            values.append(estimator.evaluate(agg, list(subset)))
        assert delta_f == pytest.approx(np.mean(values) - baseline, abs=1e-12)

    def test_depth_one_singleton_bias_regression(self):
        # One improving client among four worsening ones: a single draw that
        # happens to hit the improving client reports a negative loss change
        # at count 1. The loss-ranked strategy makes the draw deterministic.
        base = np.zeros(2)
        deltas = {0: np.array([1.0, 0.0])}
        deltas.update({i: np.array([-3.0, 0.0]) for i in range(1, 5)})
        target = np.array([1.0, 0.0])  # client 0 lands exactly on the optimum
        probe = QuadraticProbe(target)
        baseline = probe.evaluate(base, [])
        history = primed_history(1, baseline)
        strategy = PowDSampling(5, pool_size=5, rng=substream(2, 3))  # ranks by id when unseen
        inputs = inputs_for(base, deltas)

        delta_f = expect_estim(inputs, 1, strategy, history, estimator=probe, depth=1)
        assert delta_f < 0
        # Yet the average singleton effect is strongly worsening.
        singles = [probe.evaluate(base + deltas[i], [i]) - baseline for i in range(5)]
        assert np.mean(singles) > 0

    def test_rejects_counts_beyond_available(self):
        inputs = inputs_for(np.zeros(2), {0: np.zeros(2), 1: np.zeros(2)})
        history = primed_history(1, 1.0)
        strategy = UniformSampling(2, substream(0, 3))
        with pytest.raises(ConfigurationError):
            expect_estim(inputs, 3, strategy, history, QuadraticProbe(np.zeros(2)), depth=1)


def simplex_inputs():
    """Four client states around the optimum: every singleton aggregate
    worsens the probed loss, every pair improves it."""
    dim = 3
    base = np.zeros(dim)
    target = np.array([1.0, 0.0, 0.0])  # distance 1 from base
    c = np.sqrt(1.5)
    side = {
        0: np.array([0.0, c, 0.0]),
        1: np.array([0.0, -c, 0.0]),
        2: np.array([0.0, 0.0, c]),
        3: np.array([0.0, 0.0, -c]),
    }
    deltas = {i: target + side[i] for i in range(4)}
    return inputs_for(base, deltas), QuadraticProbe(target)


class TestIspSelect:
    def test_momentum_formula_on_inner_result(self):
        # Population of 100, of which 4 reported for the solve.
        inputs, probe = simplex_inputs()
        inputs = SolveInputs(inputs.base_params, dict(inputs.deltas), inputs.weights, 100)
        history = primed_history(1, probe.evaluate(inputs.base_params, []))
        cfg = IspConfig(momentum=0.5, ema_window=1, depth=1, exhaustive=True)
        strategy = UniformSampling(4, substream(0, 3))
        outcome = isp_select(inputs, 20, cfg, strategy, history, probe)
        assert outcome.inner_m == 2
        assert outcome.chosen_m == 11  # round(0.5*2 + 0.5*20)

    def test_constructed_geometry_selects_two(self):
        inputs, probe = simplex_inputs()
        baseline = probe.evaluate(inputs.base_params, [])
        # Exhaustive-subset oracle: verify the construction first.
        singles = [probe.evaluate(inputs.base_params + inputs.deltas[i], [i]) for i in range(4)]
        assert min(singles) > baseline
        for i, j in itertools.combinations(range(4), 2):
            pair = inputs.base_params + 0.5 * (inputs.deltas[i] + inputs.deltas[j])
            assert probe.evaluate(pair, [i, j]) < baseline

        history = primed_history(1, baseline)
        cfg = IspConfig(momentum=1.0, ema_window=1, depth=1, exhaustive=True)
        outcome = isp_select(inputs, 4, cfg, UniformSampling(4, substream(0, 3)), history, probe)
        assert outcome.inner_m == 2
        assert outcome.chosen_m == 2

    def test_early_exit_stops_probing(self):
        inputs, probe = simplex_inputs()
        history = primed_history(1, probe.evaluate(inputs.base_params, []))
        probe.calls = 0
        cfg = IspConfig(momentum=1.0, ema_window=1, depth=1, exhaustive=True)
        outcome = isp_select(inputs, 4, cfg, UniformSampling(4, substream(0, 3)), history, probe)
        assert [m for m, _ in outcome.candidates] == [1, 2]
        # 4 singleton subsets + 6 pairs, nothing beyond count 2.
        assert probe.calls == 10

    def test_infeasible_grid_falls_back_to_population(self):
        base = np.zeros(2)
        deltas = {i: np.array([5.0, 0.0]) for i in range(3)}  # everything worsens
        inputs = inputs_for(base, deltas, total=50)
        probe = QuadraticProbe(np.zeros(2))
        history = primed_history(1, probe.evaluate(base, []))
        cfg = IspConfig(momentum=1.0, ema_window=1, depth=1, exhaustive=True)
        outcome = isp_select(inputs, 10, cfg, UniformSampling(3, substream(0, 3)), history, probe)
        assert outcome.inner_m == 50
        assert outcome.chosen_m == 50
        assert [m for m, _ in outcome.candidates] == [1, 2, 3]

    def test_scale_free_inner_choice(self):
        inputs, probe = simplex_inputs()
        cfg = IspConfig(momentum=1.0, ema_window=1, depth=1, exhaustive=True)
        strategy = UniformSampling(4, substream(0, 3))

        history_a = primed_history(1, probe.evaluate(inputs.base_params, []))
        outcome_a = isp_select(inputs, 4, cfg, strategy, history_a, probe)

        scaled = QuadraticProbe(probe.target, scale=37.5)
        history_b = primed_history(1, scaled.evaluate(inputs.base_params, []))
        outcome_b = isp_select(inputs, 4, cfg, strategy, history_b, scaled)
        assert outcome_a.inner_m == outcome_b.inner_m == 2

    def test_empty_states_raise(self):
        inputs = SolveInputs(np.zeros(2), {}, np.ones(1), 1)
        history = primed_history(1, 0.0)
        with pytest.raises(ConfigurationError):
            isp_select(inputs, 1, IspConfig(), UniformSampling(1, substream(0, 3)), history, QuadraticProbe(np.zeros(2)))


class TestIspRiSelect:
    def _run(self, table, previous=4, momentum=1.0, ri_exponent=1.0, total=4):
        baseline = 2.0
        probe = SizeKeyedProbe(baseline, table)
        deltas = {i: np.zeros(1) for i in range(total)}
        inputs = inputs_for(np.zeros(1), deltas, total=total)
        history = primed_history(1, baseline)
        cfg = IspConfig(momentum=momentum, ema_window=1, depth=1, exhaustive=True,
                        mode="relative_improvement", ri_exponent=ri_exponent)
        return isp_ri_select(inputs, previous, cfg, UniformSampling(total, substream(0, 3)), history, probe)

    def test_improvement_per_client_tradeoff(self):
        # Scores: 0.4/2 = 0.2 beats 0.6/4 = 0.15.
        outcome = self._run({1: 0.1, 2: -0.4, 3: -0.3, 4: -0.6})
        assert outcome.inner_m == 2
        assert len(outcome.candidates) == 4  # no early exit

    def test_all_nonnegative_picks_least_bad(self):
        table = {1: 0.4, 2: 0.2, 3: 0.9, 4: 0.3}
        outcome = self._run(table)
        # Enumerate-and-compare oracle, smallest count on ties.
        scores = {m: -table[m] / m for m in table}
        best = min((m for m in scores), key=lambda m: (-scores[m], m))
        assert outcome.inner_m == best

    def test_tied_scores_pin_smallest_count(self):
        outcome = self._run({1: 0.5, 2: 1.0, 3: 1.5, 4: 2.0})  # all scores -0.5
        assert outcome.inner_m == 1

    def test_vanishing_exponent_prefers_population(self):
        outcome = self._run({1: -0.1, 2: -0.2, 3: -0.3, 4: -0.4}, ri_exponent=1e-9)
        assert outcome.inner_m == 4


class TestSchedules:
    def test_fixed_schedule_is_constant(self):
        sched = FixedSchedule(20)
        for tau in range(10):
            m, solve = sched.next_count(tau, 99)
            assert m == 20 and solve is None

    def test_linear_staircase_matches_published_shape(self):
        sched = LinearSchedule(5, 20, 50)
        values = [sched.next_count(tau, 0)[0] for tau in range(1200)]
        assert values[49] == 5
        assert values[50] == 6
        assert values[749] == 19
        assert values[750] == 20
        assert values[1199] == 20
        expected = [min(5 + tau // 50, 20) for tau in range(1200)]
        assert values == expected

    def test_linear_supports_decreasing_ranges(self):
        sched = LinearSchedule(10, 2, 10)
        assert sched.next_count(0, 0)[0] == 10
        assert sched.next_count(95, 0)[0] == 2

    def test_isp_keeps_previous_count_off_cadence(self):
        sched = IspSchedule(IspConfig(solve_every=20))
        m, solve = participant_number_strategy(7, 13, sched)
        assert m == 13 and solve is None

    def test_isp_requires_context_on_solve_rounds(self):
        sched = IspSchedule(IspConfig(solve_every=20))
        with pytest.raises(ConfigurationError):
            sched.next_count(20, 13, None)

    def test_initial_counts(self):
        assert FixedSchedule(7).initial_count == 7
        assert LinearSchedule(5, 20, 50).initial_count == 5
        assert IspSchedule(IspConfig(initial_m=12)).initial_count == 12


class TestIspConfigValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"solve_every": 0},
            {"depth": 0},
            {"resolution": 0},
            {"momentum": 0.0},
            {"momentum": 1.5},
            {"ema_window": 0},
            {"intermediate_size": 0},
            {"initial_m": 0},
            {"mode": "other"},
            {"ri_exponent": 0.0},
        ],
    )
    def test_rejects_bad_fields(self, kwargs):
        with pytest.raises(ConfigurationError):
            IspConfig(**kwargs)
