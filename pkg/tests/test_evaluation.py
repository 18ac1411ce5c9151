import math

import numpy as np
import pytest
from scipy import stats

from cdg.distrib import cdf_percentile_batch, make_grid
from cdg.errors import BadParams, DegenerateSigma, LengthMismatch, WindowTooShort
from cdg.evaluation import (
    CONSTANT,
    IID_GAUSS,
    TWO_STATE_MRP,
    SyntheticMarket,
    analytic_return,
    gamma_consistency_residual,
    gamma_curve,
    indicator,
    mrp_values,
    percentile_counts,
    realized_G,
    synth_generate,
    truncation_horizon,
    z_statistic,
)


class TestRealizedG:
    def test_zero_rewards(self):
        g = realized_G(np.zeros(10), 0.9, 3)
        np.testing.assert_array_equal(g, np.zeros(8))

    def test_constant_rewards_geometric(self):
        horizon = truncation_horizon(0.5)
        g = realized_G(np.ones(100), 0.5, horizon)
        assert g[0] == pytest.approx(2.0, abs=2e-3)

    def test_hand_computed(self):
        g = realized_G(np.array([1.0, 2.0, 4.0]), 0.5, 3)
        assert g.shape == (1,)
        assert g[0] == pytest.approx(3.0)

    def test_window_too_short(self):
        with pytest.raises(WindowTooShort):
            realized_G(np.ones(2), 0.9, 3)

    def test_recursion_identity(self):
        rng = np.random.default_rng(0)
        r = rng.normal(0, 0.01, size=50)
        gamma = 0.9
        g_full = np.zeros(51)
        for t in range(49, -1, -1):
            g_full[t] = r[t] + gamma * g_full[t + 1]
        g = realized_G(r, gamma, 5)
        for t in range(len(g) - 1):
            assert g[t] == r[t] + gamma * g_full[t + 1]

    def test_truncation_horizon_values(self):
        assert truncation_horizon(0.9) == 66
        assert truncation_horizon(0.9975) == 2760
        assert truncation_horizon(0.0) == 1


class TestIndicator:
    def test_zero_estimate(self):
        assert indicator(100.0, 0.0, "log_return") == 100.0
        assert indicator(100.0, 0.0, "cash_return") == 100.0

    def test_log_kind(self):
        assert indicator(100.0, 0.01, "log_return") == pytest.approx(100.0 * math.exp(0.01))

    def test_cash_kind(self):
        assert indicator(100.0, 0.01, "cash_return") == pytest.approx(101.0)

    def test_small_gamma_tracks_next_price(self):
        # single-asset log rewards: as gamma -> 0, G ~ log(z_{t+1}/z_t)
        rng = np.random.default_rng(1)
        prices = 100 * np.exp(rng.normal(0, 0.01, size=30).cumsum())
        r = np.diff(np.log(prices))
        g = realized_G(r, 0.0, 1)
        for t in range(10):
            assert indicator(prices[t], g[t], "log_return") == pytest.approx(prices[t + 1], rel=1e-12)


class TestZStatistic:
    def test_zero_error(self):
        assert z_statistic(0.05, 0.05, 0.1) == 0.0

    def test_unit(self):
        assert z_statistic(0.1, 0.05, 0.05) == pytest.approx(1.0)

    def test_degenerate_sigma(self):
        with pytest.raises(DegenerateSigma):
            z_statistic(0.1, 0.05, 0.0)


class TestPercentileCounts:
    def test_perfect_calibration_uniform_cdf_values(self):
        rng = np.random.default_rng(2)
        report = percentile_counts(rng.uniform(size=20_000))
        assert report.max_abs_gap() < 0.02
        assert report.fractions[-1] == pytest.approx(1.0, abs=1e-3)

    def test_overshooting_point_mass(self):
        # estimates entirely below every realization -> CDF at realization = 1
        report = percentile_counts(np.ones(100), np.array([0.25, 0.5, 1.0]))
        np.testing.assert_array_equal(report.fractions, [0.0, 0.0, 1.0])

    def test_q_one_is_one(self):
        rng = np.random.default_rng(3)
        report = percentile_counts(rng.uniform(size=500))
        assert report.fractions[-1] == 1.0

    def test_monotone(self):
        rng = np.random.default_rng(4)
        report = percentile_counts(rng.beta(2, 5, size=1000))
        assert np.all(np.diff(report.fractions) >= 0)

    def test_analytic_oracle_diagonal(self):
        # the acceptance-style check: CDF of the true sampling distribution
        gamma, sigma, n = 0.8, 0.01, 10_000
        market = SyntheticMarket(IID_GAUSS, mu=0.0, sigma=sigma, seed=7)
        horizon = truncation_horizon(gamma)
        series = synth_generate(market, n + horizon)
        g = realized_G(series.rewards, gamma, horizon)[:n]
        ana = analytic_return(market, gamma)
        cdf_vals = stats.norm.cdf(g, loc=ana["mean"], scale=ana["std"])
        report = percentile_counts(cdf_vals)
        assert report.max_abs_gap() <= 0.05

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            from cdg.evaluation import CalibrationReport

            CalibrationReport(np.array([0.5]), np.array([0.5, 1.0]), 2)


class TestGammaCurve:
    def test_sorted_output(self):
        curve = gamma_curve(np.array([0.9, 0.5]), np.array([2.0, 1.0]), np.array([0.2, 0.1]))
        assert curve == [(0.5, 1.0, 0.1), (0.9, 2.0, 0.2)]

    def test_single_point(self):
        assert gamma_curve(np.array([0.9]), np.array([1.0]), np.array([0.0])) == [(0.9, 1.0, 0.0)]

    def test_constant_reward_increasing_in_gamma(self):
        market = SyntheticMarket(CONSTANT, c=0.01)
        gammas = np.array([0.5, 0.8, 0.9])
        means = []
        for gamma in gammas:
            horizon = truncation_horizon(gamma)
            series = synth_generate(market, horizon + 10)
            means.append(realized_G(series.rewards, gamma, horizon)[0])
        curve = gamma_curve(gammas, np.array(means), np.zeros(3))
        vals = [m for _, m, _ in curve]
        assert vals == sorted(vals)
        for (gamma, m, _), k in zip(curve, [truncation_horizon(g) for g in gammas]):
            assert m == pytest.approx(0.01 * (1 - gamma ** (k + 10)) / (1 - gamma), rel=1e-6)


class TestGammaConsistency:
    def test_realized_residual_is_zero(self):
        rng = np.random.default_rng(5)
        r = rng.normal(0, 0.01, size=6000)
        for gi, gj in [(0.5, 0.9), (0.8, 0.9975), (0.9, 0.9)]:
            ki, kj = truncation_horizon(gi), truncation_horizon(gj)
            n = len(r) - max(ki, kj) + 1
            g_i = realized_G(r, gi, ki)[:n]
            g_j = realized_G(r, gj, kj)[:n]
            res = gamma_consistency_residual(g_i, g_j, gi, gj)
            assert np.abs(res).max() <= 1e-10

    def test_model_estimates_nonzero_ok(self):
        rng = np.random.default_rng(6)
        res = gamma_consistency_residual(rng.normal(size=10), rng.normal(size=10), 0.5, 0.9)
        assert res.shape == (9,)
        assert np.abs(res).max() > 0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            gamma_consistency_residual(np.ones(3), np.ones(4), 0.5, 0.9)


class TestSyntheticMarkets:
    def test_constant_zero(self):
        series = synth_generate(SyntheticMarket(CONSTANT, c=0.0), 50)
        np.testing.assert_array_equal(series.rewards, 0.0)
        g = realized_G(series.rewards, 0.9, 10)
        np.testing.assert_array_equal(g, 0.0)

    def test_gauss_analytic_std(self):
        ana = analytic_return(SyntheticMarket(IID_GAUSS, mu=0.0, sigma=0.01), 0.9)
        assert ana["std"] == pytest.approx(0.01 / math.sqrt(0.19), rel=1e-9)
        assert ana["std"] == pytest.approx(0.022942, abs=1e-6)

    def test_two_state_symmetric(self):
        p = np.array([[0.5, 0.5], [0.5, 0.5]])
        values = mrp_values(p, np.array([1.0, 1.0]), 0.5)
        np.testing.assert_allclose(values, [2.0, 2.0])

    def test_mrp_empirical_matches_solve(self):
        p = np.array([[0.7, 0.3], [0.4, 0.6]])
        r = np.array([1.0, -0.5])
        market = SyntheticMarket(TWO_STATE_MRP, transition=p, state_rewards=r, seed=11)
        gamma = 0.9
        horizon = truncation_horizon(gamma)
        series = synth_generate(market, 60_000)
        g = realized_G(series.rewards, gamma, horizon)
        values = mrp_values(p, r, gamma)
        for s in (0, 1):
            mask = series.states[: len(g)] == s
            assert g[mask].mean() == pytest.approx(values[s], abs=0.05)

    def test_seed_reproducibility(self):
        a = synth_generate(SyntheticMarket(IID_GAUSS, seed=3), 100)
        b = synth_generate(SyntheticMarket(IID_GAUSS, seed=3), 100)
        np.testing.assert_array_equal(a.rewards, b.rewards)

    def test_bad_sigma(self):
        with pytest.raises(BadParams):
            SyntheticMarket(IID_GAUSS, sigma=-0.1)

    def test_bad_length(self):
        with pytest.raises(BadParams):
            synth_generate(SyntheticMarket(CONSTANT), 0)

    def test_discretized_oracle_calibrates_with_step_cdf(self):
        # same diagonal check but through the categorical CDF machinery
        gamma, sigma, n = 0.8, 0.01, 10_000
        market = SyntheticMarket(IID_GAUSS, mu=0.0, sigma=sigma, seed=13)
        horizon = truncation_horizon(gamma)
        series = synth_generate(market, n + horizon)
        g = realized_G(series.rewards, gamma, horizon)[:n]
        ana = analytic_return(market, gamma)
        grid = make_grid(-6 * ana["std"], 6 * ana["std"], 201)
        edges = np.concatenate([[-np.inf], grid.atoms[:-1] + grid.delta_z / 2, [np.inf]])
        probs = np.diff(stats.norm.cdf(edges, loc=ana["mean"], scale=ana["std"]))
        cdf_vals = cdf_percentile_batch(grid, np.tile(probs, (n, 1)), g)
        report = percentile_counts(cdf_vals)
        assert report.max_abs_gap() <= 0.05
