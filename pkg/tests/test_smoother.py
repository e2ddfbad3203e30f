import csv

import numpy as np
import pytest

from pmsmooth import DensityDraw, ParticleCloud
from pmsmooth.errors import ConfigError, InvalidBound, WaldBudgetExceeded, ZeroNormalizer
from pmsmooth.functionals import AdditiveFunctional, cumulative_state, state_at, step_count
from pmsmooth.models import kalman_rts
from pmsmooth.smoother import (
    TRACE_COLUMNS,
    BackwardDraws,
    Method,
    SmootherConfig,
    backward_weights_wald,
    default_n_backward,
    init_filter,
    path_space_smoother,
    propagate_wald,
    sample_backward_ar,
    smooth_online,
    update_backward_stats_is,
    wald_stopped,
    write_trace_csv,
)

from conftest import signed_mock, toy_model


def cloud_of(xs, weights=None, stats=None):
    xs = np.asarray(xs, dtype=float).reshape(-1, 1)
    n = xs.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    s = np.zeros((n, 1)) if stats is None else np.asarray(stats, dtype=float).reshape(n, -1)
    return ParticleCloud(0, xs, w, s, np.arange(n))


def constant(c):
    return lambda k, x, xn, rng: DensityDraw(np.full(x.shape[0], float(c)))


def scripted(*values):
    """Estimator returning ``values[r]`` on its r-th call (then the last value)."""
    calls = []

    def est(k, x, xn, rng):
        v = values[min(len(calls), len(values) - 1)]
        calls.append(1)
        return DensityDraw(np.full(x.shape[0], float(v)))

    return est


class TestWaldStoppingRule:
    def test_rule(self):
        acc = np.array([[1.0, 2.0], [1.0, -1.0], [0.0, 2.0], [0.0, 0.0]])
        moved = np.array([[True, True], [True, True], [False, True], [False, False]])
        np.testing.assert_array_equal(wald_stopped(acc, moved), [True, False, True, False])

    def test_moved_zero_sum_keeps_going(self):
        assert not wald_stopped(np.array([0.0, 3.0]), np.array([True, True]))


class TestBackwardWeights:
    def test_positive_estimator_single_round(self, rng):
        model = toy_model(constant(2.5), True)
        d = backward_weights_wald(model, cloud_of([0, 1, 2]), np.zeros((4, 1)), SmootherConfig(3, 5), rng)
        assert d.weights.shape == (4, 5) and d.indices.shape == (4, 5)
        np.testing.assert_array_equal(d.rounds, 1)
        np.testing.assert_array_equal(d.weights, 2.5)
        assert d.estimator_calls == 20

    def test_negative_first_round_needs_second(self, rng):
        model = toy_model(scripted(-1, 3), False)
        d = backward_weights_wald(model, cloud_of([0, 1]), np.zeros((3, 1)), SmootherConfig(2, 4), rng)
        np.testing.assert_array_equal(d.rounds, 2)
        np.testing.assert_array_equal(d.weights, 2.0)

    def test_underflowed_pair_stops_in_one_round(self, rng):
        # the estimator is exactly 0 from source 0 and 1 from source 1
        est = lambda k, x, xn, rng: DensityDraw(np.where(x[:, 0] > 0.5, 1.0, 0.0))
        model = toy_model(est, False)
        # all-zero rows would never stop, so source 1 carries nearly all the mass
        cloud = cloud_of([0.0, 1.0], weights=[1.0, 50.0])
        d = backward_weights_wald(model, cloud, np.zeros((200, 1)), SmootherConfig(2, 3), rng)
        assert np.any(d.indices == 0)
        np.testing.assert_array_equal(d.rounds, 1)
        np.testing.assert_array_equal(d.weights, (d.indices == 1).astype(float))

    def test_row_of_zeros_exhausts_budget(self, rng):
        model = toy_model(constant(0.0), False)
        with pytest.raises(WaldBudgetExceeded):
            backward_weights_wald(model, cloud_of([0.0]), np.zeros((1, 1)), SmootherConfig(1, 2, wald_max_rounds=50), rng)

    def test_always_negative_exhausts_budget(self, rng):
        model = toy_model(constant(-1.0), False)
        with pytest.raises(WaldBudgetExceeded):
            backward_weights_wald(model, cloud_of([0.0]), np.zeros((2, 1)), SmootherConfig(1, 2, wald_max_rounds=50), rng)

    def test_wald_identity(self, rng):
        # E[sum] = E[rounds] * E[draw] for every slot
        model = toy_model(signed_mock(), False)
        d = backward_weights_wald(model, cloud_of([0.0]), np.zeros((100_000, 1)), SmootherConfig(1, 3), rng)
        assert np.all(d.weights > 0)
        resid = d.weights - 1.8 * d.rounds[:, None]
        for j in range(3):
            r = resid[:, j]
            assert abs(r.mean()) < 4 * r.std() / np.sqrt(r.size)

    def test_indices_follow_filter_weights(self, rng):
        model = toy_model(constant(1.0), True)
        cloud = cloud_of([0, 1, 2], weights=[1.0, 0.0, 3.0])
        d = backward_weights_wald(model, cloud, np.zeros((20_000, 1)), SmootherConfig(3, 2), rng)
        freq = np.bincount(d.indices.ravel(), minlength=3) / d.indices.size
        np.testing.assert_allclose(freq, [0.25, 0.0, 0.75], atol=0.01)


class TestStatsUpdate:
    def test_zero_functional_gives_zero(self):
        cloud = cloud_of([0, 1])
        draws = BackwardDraws(np.array([[0, 1]]), np.array([[1.0, 2.0]]), np.array([1]))
        zero = AdditiveFunctional(1, lambda k, x, xn: np.zeros((x.shape[0], 1)))
        np.testing.assert_array_equal(update_backward_stats_is(cloud, [[5.0]], draws, zero), 0.0)

    def test_single_draw_is_identity(self):
        cloud = cloud_of([0.0, 1.0, 2.0], stats=[10.0, 20.0, 30.0])
        draws = BackwardDraws(np.array([[2], [0]]), np.array([[0.3], [7.0]]), np.array([1, 1]))
        f = AdditiveFunctional(1, lambda k, x, xn: xn - x)
        out = update_backward_stats_is(cloud, [[5.0], [4.0]], draws, f)
        np.testing.assert_array_equal(out, [[30.0 + 3.0], [10.0 + 4.0]])

    def test_self_normalised_mix(self):
        cloud = cloud_of([0.0, 1.0], stats=[1.0, 3.0])
        draws = BackwardDraws(np.array([[0, 1, 1]]), np.array([[1.0, 1.0, 2.0]]), np.array([1]))
        f = AdditiveFunctional(1, lambda k, x, xn: x)
        out = update_backward_stats_is(cloud, [[0.0]], draws, f)
        np.testing.assert_allclose(out, [[0.25 * 1.0 + 0.75 * 4.0]])

    def test_common_scaling_bit_identical(self, rng):
        cloud = cloud_of(rng.standard_normal(6), stats=rng.standard_normal(6))
        idx = rng.integers(0, 6, (50, 4))
        w = rng.choice([3.0, -1.0, 2.0, 5.0, 1.0], size=(50, 4))
        w[:, 0] = 9.0
        f = cumulative_state(1)
        x_next = rng.standard_normal((50, 1))
        a = update_backward_stats_is(cloud, x_next, BackwardDraws(idx, w, np.ones(50)), f)
        b = update_backward_stats_is(cloud, x_next, BackwardDraws(idx, 7 * w, np.ones(50)), f)
        np.testing.assert_array_equal(a, b)

    def test_zero_normalizer(self):
        draws = BackwardDraws(np.array([[0, 0]]), np.array([[1.0, -1.0]]), np.array([1]))
        with pytest.raises(ZeroNormalizer):
            update_backward_stats_is(cloud_of([0.0]), [[0.0]], draws, step_count())


class TestAcceptReject:
    def bounded(self, value=0.5, bound=1.0):
        return toy_model(constant(value), True, bound=lambda k, src, xn: np.full(xn.shape[0], bound))

    def test_constant_estimator_samples_filter_weights(self, rng):
        cloud = cloud_of([0, 1, 2], weights=[2.0, 1.0, 1.0])
        idx, total = sample_backward_ar(self.bounded(), cloud, np.zeros((10_000, 1)), SmootherConfig(3, 2), rng)
        freq = np.bincount(idx.ravel(), minlength=3) / idx.size
        np.testing.assert_allclose(freq, [0.5, 0.25, 0.25], atol=0.015)
        # acceptance probability 1/2
        assert total / idx.size == pytest.approx(2.0, rel=0.03)

    def test_bound_too_small(self, rng):
        with pytest.raises(InvalidBound):
            sample_backward_ar(self.bounded(2.0, 1.0), cloud_of([0.0]), np.zeros((1, 1)), SmootherConfig(1, 1), rng)

    def test_needs_positive_estimator(self, rng):
        model = toy_model(constant(1.0), False, bound=lambda k, s, xn: np.ones(xn.shape[0]))
        with pytest.raises(ConfigError):
            sample_backward_ar(model, cloud_of([0.0]), np.zeros((1, 1)), SmootherConfig(1, 1), rng)

    def test_needs_bound(self, rng):
        with pytest.raises(ConfigError):
            sample_backward_ar(toy_model(constant(1.0), True), cloud_of([0.0]), np.zeros((1, 1)), SmootherConfig(1, 1), rng)


class TestFilter:
    def test_init_weights_include_first_observation(self, rng):
        model = toy_model(constant(1.0), True, obs_density=lambda k, x, y: np.exp(-x[:, 0] ** 2))
        c = init_filter(model, SmootherConfig(50), rng, y0=[0.0])
        np.testing.assert_allclose(c.weights, np.exp(-c.particles[:, 0] ** 2))

    def test_positive_filter_single_round(self, rng):
        model = toy_model(constant(1.0), True)
        c = propagate_wald(model, init_filter(model, SmootherConfig(20), rng), [0.0], SmootherConfig(20), rng)
        assert c.wald_rounds == 1 and c.step == 1

    def test_signed_filter_weights_positive(self, rng):
        model = toy_model(signed_mock(), False)
        cfg = SmootherConfig(500)
        c = propagate_wald(model, init_filter(model, cfg, rng), [0.0], cfg, rng)
        assert np.all(c.weights > 0)
        assert c.wald_rounds >= 1

    def test_filter_mean_matches_kalman(self, lg_spec, lg_data, lg_boot):
        _, y = lg_data
        kal = kalman_rts(lg_spec, y)
        n = y.shape[0] - 1
        est = [
            smooth_online(lg_boot, state_at(n, 1), y, SmootherConfig(400, 2), s).estimate[0]
            for s in range(30)
        ]
        se = np.std(est, ddof=1) / np.sqrt(len(est))
        assert abs(np.mean(est) - kal.filter_means[n, 0]) < 4 * se + 1e-3


class TestSmoothOnline:
    def test_step_count(self, lg_boot, lg_data):
        _, y = lg_data
        for method in Method:
            res = smooth_online(lg_boot, step_count(), y[:8], SmootherConfig(30, 3, method=method), 1)
            assert res.estimate[0] == pytest.approx(7.0)

    def test_single_particle_methods_agree(self, lg_boot, lg_data):
        _, y = lg_data
        f = cumulative_state(1)
        a = smooth_online(lg_boot, f, y, SmootherConfig(1, 4), 3).estimate
        b = path_space_smoother(lg_boot, f, y, SmootherConfig(1), 3)
        np.testing.assert_array_equal(a, b)

    def test_path_space_first_observation_only(self, lg_spec, lg_data, lg_boot):
        _, y = lg_data
        kal = kalman_rts(lg_spec, y[:1])
        est = [path_space_smoother(lg_boot, state_at(0, 1), y[:1], SmootherConfig(2000), s)[0] for s in range(20)]
        se = np.std(est, ddof=1) / np.sqrt(20)
        assert abs(np.mean(est) - kal.smooth_means[0, 0]) < 4 * se

    def test_path_space_short_horizon(self, lg_spec, lg_data, lg_boot):
        _, y = lg_data
        y = y[:6]
        kal = kalman_rts(lg_spec, y)
        est = [path_space_smoother(lg_boot, state_at(2, 1), y, SmootherConfig(2000), s)[0] for s in range(20)]
        se = np.std(est, ddof=1) / np.sqrt(20)
        assert abs(np.mean(est) - kal.smooth_means[2, 0]) < 4 * se

    def test_deterministic(self, lg_boot, lg_data):
        _, y = lg_data
        cfg = SmootherConfig(50, 3)
        a = smooth_online(lg_boot, cumulative_state(1), y, cfg, 9)
        b = smooth_online(lg_boot, cumulative_state(1), y, cfg, np.random.SeedSequence(9))
        np.testing.assert_array_equal(a.estimate, b.estimate)
        np.testing.assert_array_equal(a.cloud.weights, b.cloud.weights)

    def test_trace(self, lg_boot, lg_data, tmp_path):
        _, y = lg_data
        res = smooth_online(lg_boot, cumulative_state(1), y[:5], SmootherConfig(40, 2), 0)
        assert [t.step for t in res.trace] == list(range(5))
        assert all(1.0 <= t.ess <= 40 for t in res.trace)
        p = tmp_path / "trace.csv"
        write_trace_csv(res.trace, p)
        rows = list(csv.reader(open(p)))
        assert tuple(rows[0]) == TRACE_COLUMNS and len(rows) == 6

    def test_observation_shape_checked(self, lg_boot):
        with pytest.raises(ConfigError):
            smooth_online(lg_boot, step_count(), np.zeros((3, 2)), SmootherConfig(5), 0)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(n_particles=0), dict(n_particles=3, n_backward=0), dict(n_particles=3, wald_max_rounds=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SmootherConfig(**kw)

    def test_method_from_string(self):
        assert SmootherConfig(3, method="BackwardAR").method is Method.BACKWARD_AR

    def test_default_backward(self):
        assert default_n_backward(1000) == 64
        assert default_n_backward(1) == 1
