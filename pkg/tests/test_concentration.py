from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from finite_qkd.concentration import (DeviationTerms, Direction, EpsilonBudget, KatoParams, TrashStatistics,
                                      azuma_params, bernstein_delta, bernstein_tail, bernstein_trash, compose_bounds,
                                      delta_P, delta_ph, kato_delta, kato_optimal_params,
                                      signed_observation_delta, theta_p_bounds)

from kato_oracle import kato_objective, kato_residual

log_n = st.floats(2.0, 10.0)
frac = st.floats(0.01, 0.99)
log_eps = st.floats(-20.0, -0.5)
direction = st.sampled_from([Direction.LOWER, Direction.UPPER])


class TestKatoParams:
    def test_azuma_point(self):
        eps = 1e-10
        p = azuma_params(1e6, eps)
        assert p.a == 0.0 and p.b == math.sqrt(-math.log(eps) / 2)
        assert p.constraint_value() == pytest.approx(eps, rel=1e-12)

    def test_epsilon_one(self):
        p = kato_optimal_params(1e4, 100.0, 1.0)
        assert p.a == 0.0 and p.b == 0.0
        assert p.constraint_value() == 1.0

    def test_reference_point_is_grid_optimal(self):
        n, x, eps = 1e6, 1e3, 1e-10
        for d in Direction:
            p = kato_optimal_params(n, x, eps, d)
            assert kato_residual(p.a, p.b, n, eps, d) <= 1e-9
            best = float(kato_objective(p.a, n, x, eps, d))
            for width in (10.0, 1.0, 0.01):
                grid = np.linspace(p.a - width, p.a + width, 20001)
                assert kato_objective(grid, n, x, eps, d).min() >= best * (1 - 1e-6)

    @given(log_n, frac, log_eps, direction)
    def test_residual_and_sign(self, ln, fr, le, d):
        n = 10 ** ln
        p = kato_optimal_params(n, fr * n, 10 ** le, d)
        assert p.b >= 0
        assert kato_residual(p.a, p.b, n, 10 ** le, d) <= 1e-9

    @given(log_n, frac, log_eps, direction)
    def test_no_better_grid_point(self, ln, fr, le, d):
        n, eps = 10 ** ln, 10 ** le
        x = fr * n
        p = kato_optimal_params(n, x, eps, d)
        best = float(kato_objective(p.a, n, x, eps, d))
        scale = max(abs(p.a), 1.0)
        grid = p.a + scale * np.linspace(-1, 1, 4001)
        assert kato_objective(grid, n, x, eps, d).min() >= best * (1 - 1e-6)

    def test_validation(self):
        with pytest.raises(ValueError):
            kato_optimal_params(0.0, 0.0, 0.1)
        with pytest.raises(ValueError):
            kato_optimal_params(10.0, 11.0, 0.1)
        with pytest.raises(ValueError):
            kato_optimal_params(10.0, 1.0, 0.0)
        with pytest.raises(ValueError):
            KatoParams(0.0, -1.0, Direction.LOWER, 10.0, 0.1, 1.0)


class TestKatoDelta:
    def test_azuma_branch_independent_of_x(self):
        n, eps = 1e5, 1e-6
        p = azuma_params(n, eps)
        ref = math.sqrt(-n * math.log(eps) / 2)
        for x in (0.0, 10.0, n / 3, n):
            assert kato_delta(p, x) == pytest.approx(ref, rel=1e-15)

    def test_centered(self):
        p = kato_optimal_params(1e4, 5e3, 1e-5)
        assert kato_delta(p, 5e3) == pytest.approx(p.b * 100.0, rel=1e-15)

    @pytest.mark.parametrize("d", list(Direction))
    def test_bernoulli_coverage(self, d):
        n, prob, eps, trials = 100_000, 0.01, 0.01, 2000
        rng = np.random.default_rng(20 + (d is Direction.UPPER))
        x = rng.binomial(n, prob, size=trials)
        p = kato_optimal_params(float(n), n * prob, eps, d)
        dev = (n * prob - x) if d is Direction.LOWER else (x - n * prob)
        freq = np.mean([dv > kato_delta(p, xv) for dv, xv in zip(dev, x)])
        assert freq <= eps + 3 * math.sqrt(eps * (1 - eps) / trials)

    @given(st.floats(3.0, 9.0), frac, st.floats(-15.0, -1.0), direction)
    def test_monotone_in_epsilon_and_n(self, ln, fr, le, d):
        n, eps = 10 ** ln, 10 ** le
        lo = kato_delta(kato_optimal_params(n, fr * n, eps, d), fr * n)
        hi_eps = kato_delta(kato_optimal_params(n, fr * n, eps * 2, d), fr * n)
        more_n = kato_delta(kato_optimal_params(2 * n, fr * 2 * n, eps, d), fr * 2 * n)
        assert hi_eps <= lo * (1 + 1e-12)
        assert more_n >= lo * (1 - 1e-12)


class TestBernstein:
    def test_epsilon_one(self):
        assert bernstein_delta(1e6, 1.0, 0.01, 1.0) == 0.0

    def test_reference_substitution(self):
        n, m, e, eps = 1e6, 1.0, 0.01, 1e-10
        d = bernstein_delta(n, m, e, eps)
        dp = d / n
        assert abs(math.exp(-n * dp ** 2 / (2 * e + 2 * dp / 3)) - eps) <= 1e-9 * eps

    @given(st.floats(2.0, 12.0), st.floats(-3.0, 1.0), st.floats(-6.0, 0.0), st.floats(-20.0, -0.05))
    def test_substitute_back(self, ln, lm, le, leps):
        n, m, eps = 10 ** ln, 10 ** lm, 10 ** leps
        e = 10 ** le * m * m
        d = bernstein_delta(n, m, e, eps)
        assert abs(bernstein_tail(n, m, e, d) - eps) <= 1e-9 * eps

    @given(st.floats(2.0, 10.0), st.floats(-5.0, -1.0), st.floats(-12.0, -1.0))
    def test_monotone_in_second_moment(self, ln, le, leps):
        n, e = 10 ** ln, 10 ** le
        assert bernstein_delta(n, 1.0, 2 * e, 10 ** leps) > bernstein_delta(n, 1.0, e, 10 ** leps)

    def test_validation(self):
        with pytest.raises(ValueError):
            bernstein_delta(10, 0.0, 0.1, 0.1)
        with pytest.raises(ValueError):
            bernstein_delta(10, 1.0, -0.1, 0.1)
        with pytest.raises(ValueError):
            bernstein_delta(10, 1.0, 0.1, 0.0)

    def test_coverage(self):
        rng = np.random.default_rng(5)
        n, trials, eps = 20_000, 2000, 0.05
        values = np.array([-0.4, 0.0, 0.7])
        probs = np.array([0.1, 0.7, 0.2])
        mean = values @ probs
        second = values ** 2 @ probs
        d = bernstein_delta(n, values.max() - values.min(), second, eps)
        sums = rng.multinomial(n, probs, size=trials) @ values
        for freq in (np.mean(sums - n * mean > d), np.mean(n * mean - sums > d)):
            assert freq <= eps + 3 * math.sqrt(eps * (1 - eps) / trials)


class TestPhaseErrorDeviation:
    def test_azuma_branch(self):
        n, eps = 1e8, 1e-10
        # few anticipated signal rounds -> a1 <= 0
        p = kato_optimal_params(n, 0.9 * n, eps, Direction.UPPER)
        assert p.a <= 0
        assert delta_ph(n, 0.9 * n, 0.9 * n, eps) == math.sqrt(-n * math.log(eps) / 2)

    def test_kato_branch(self):
        n, x, eps = 1e8, 1e4, 1e-10
        p = kato_optimal_params(n, x, eps, Direction.UPPER)
        assert p.a > 0
        assert delta_ph(n, x, x, eps) == pytest.approx((p.b + p.a * (2 * x / n - 1)) * math.sqrt(n), rel=1e-15)

    def test_branch_continuity(self):
        n, eps = 1e8, 1e-10
        xs = np.linspace(0.3, 0.7, 4001) * n
        signs = np.array([kato_optimal_params(n, float(x), eps, Direction.UPPER).a > 0 for x in xs])
        flip = int(np.flatnonzero(signs[:-1] != signs[1:])[0])
        left = delta_ph(n, float(xs[flip]), float(xs[flip]), eps)
        right = delta_ph(n, float(xs[flip + 1]), float(xs[flip + 1]), eps)
        assert abs(left - right) <= 0.05 * max(left, right)

    def test_rejects_bad_counts(self):
        with pytest.raises(ValueError):
            delta_ph(10, 11, 5, 0.1)


STATS = TrashStatistics(mean=-0.02, second_moment=0.05, omega_max=0.3, omega_min=-0.9)


class TestTrash:
    def test_degenerate_spectrum(self):
        with pytest.raises(ValueError):
            TrashStatistics(mean=0.0, second_moment=0.0, omega_max=0.0, omega_min=0.0)

    def test_range_contains_zero(self):
        with pytest.raises(ValueError):
            TrashStatistics(mean=0.5, second_moment=0.5, omega_max=1.0, omega_min=0.2)

    def test_no_bernstein_width(self):
        n, eps7 = 1e6, 1e-6
        nom, up, lo = theta_p_bounds(n, STATS, 1.0)
        assert up == lo == nom
        p = kato_optimal_params(n, nom, eps7, Direction.UPPER)
        assert delta_P(n, STATS, 1.0, eps7) == pytest.approx(STATS.width * kato_delta(p, nom), rel=1e-15)

    def test_positive(self):
        assert delta_P(1e8, STATS, 1e-10, 1e-10) > 0
        assert bernstein_trash(1e8, STATS, 1e-10) > 0


class TestBudget:
    def test_uniform_default(self):
        b = EpsilonBudget.uniform()
        assert b.eps_ph_count == 2.0 ** -66 / 14
        assert b.kato_total == pytest.approx(2.0 ** -67, rel=1e-15)
        assert b.eps[5] == b.eps[6] + b.eps[7]

    def test_security_arithmetic(self):
        b = EpsilonBudget.uniform()
        assert b.eps_PA == 2.0 ** -32
        assert b.eps_tot == 2.0 ** -31
        assert b.eps_tot < 1e-9

    def test_overspent_budget(self):
        with pytest.raises(ValueError):
            EpsilonBudget(1e-3, 1e-3, (1e-3,) * 4, 1e-3, 1e-3, 10, 10)

    def test_entries_in_range(self):
        with pytest.raises(ValueError):
            EpsilonBudget.relaxed(0.0)
        EpsilonBudget.relaxed(1.0)

    def test_dict_round_trip(self):
        b = EpsilonBudget.uniform(2.0 ** -50, 50, 30)
        assert EpsilonBudget.from_dict(b.to_dict()) == b


class TestCompose:
    def test_all_epsilon_one(self):
        b = EpsilonBudget.relaxed(1.0)
        dev = compose_bounds(b, [0.3, -0.2, 0.1, -0.4], 1e6, 1e4, 1e4, [10, 20, 30, 40], [0.1, 0.2, 0.1, 0.2],
                             [1.0, 4.0, 3.0, 8.0], 0.05, STATS)
        assert dev.delta1 == 0.0 and dev.delta2 == 0.0

    def test_delta1_combination(self):
        dev = DeviationTerms(3.0, (1.0, 2.0), 5.0, 7.0, 0.25)
        assert dev.delta1 == (3.0 + 3.0) / 0.75 + 5.0 / 0.25
        assert dev.delta2 == 7.0

    def test_observation_normalization_and_sign(self):
        n, eps, norm, n_obs, nom = 1e9, 1e-10, 0.81 * 0.1, 5e4, 4e3
        theta = norm * n_obs
        up = signed_observation_delta(2.0, n, theta, nom, norm, eps)
        lo = signed_observation_delta(-2.0, n, theta, nom, norm, eps)
        pu = kato_optimal_params(n, nom, eps, Direction.UPPER)
        pl = kato_optimal_params(n, nom, eps, Direction.LOWER)
        assert up == pytest.approx(2.0 * kato_delta(pu, theta) / norm, rel=1e-15)
        assert lo == pytest.approx(2.0 * kato_delta(pl, theta) / norm, rel=1e-15)
        assert signed_observation_delta(0.0, n, theta, nom, norm, eps) == 0.0

    def test_recomputable(self):
        b = EpsilonBudget.uniform()
        eta = [0.5, -0.3, 0.0, 1.2]
        norms = [0.09, 0.01, 0.09, 0.01]
        n_l = [1e5, 2e5, 3e6, 4e7]
        th = [9e3, 2e3, 2.7e5, 4e5]
        dev = compose_bounds(b, eta, 1e12, 1e8, 1e8, n_l, norms, th, 0.01, STATS)
        assert dev.delta_ph == delta_ph(1e12, 1e8, 1e8, b.eps_ph_count)
        for l in range(4):
            assert dev.delta_Q[l] == signed_observation_delta(eta[l], 1e12, norms[l] * n_l[l], th[l], norms[l],
                                                              b.eps_q[l])
        assert dev.delta_P == delta_P(1e12, STATS, b.eps_bern, b.eps_kato_p)
        assert dev.delta_bern == bernstein_trash(1e12, STATS, b.eps_bern)
