"""Tests for pseudo-outcome regression and the confidence machinery."""

import numpy as np
import pytest
from scipy import stats

from budgex.core import FeatureMap, PropensityBounds, RctRecord
from budgex.estimator import (AlignmentWeight, ConfidenceParams, InfoMatrix,
                              SingularDesignError, beta_bound,
                              compute_alignment_weights, confidence_width,
                              default_sigma, ellipsoid_radius, fit_ridge,
                              fit_ridge_arrays, fit_weighted_ridge,
                              pointwise_ci, predict_cate, pseudo_outcome,
                              pseudo_outcome_values, sandwich_from_arrays,
                              sandwich_variance, solution_from_json,
                              solution_to_json)
from budgex.acquisition import PropensityModel
from budgex._rng import rng_for

ONE_HOT_2 = FeatureMap(kind="segment-one-hot", output_dim=2, norm_bound=1.0)
ONE_HOT_1 = FeatureMap(kind="segment-one-hot", output_dim=1, norm_bound=1.0)


def rct(x, t, y, p, seq):
    return RctRecord(x=x, t=t, y=y, p=p, seq=seq)


class TestPseudoOutcome:
    def test_treated_branch(self):
        assert pseudo_outcome(rct([0.0], 1, 1.0, 0.5, 1)).value == 2.0

    def test_control_branch(self):
        assert pseudo_outcome(rct([0.0], 0, 1.0, 0.5, 1)).value == -2.0

    def test_value_respects_envelope(self):
        po = pseudo_outcome(rct([0.0], 1, 0.7, 0.2, 1))
        assert po.value == pytest.approx(3.5)
        bounds = PropensityBounds(0.2, 0.8)
        assert abs(po.value) <= bounds.pseudo_outcome_bound
        assert bounds.pseudo_outcome_bound == pytest.approx(5.0)

    def test_invalid_probability_rejected(self):
        bad = rct([0.0], 1, 1.0, 0.5, 1)
        object.__setattr__(bad, "p", 1.0)
        with pytest.raises(ValueError):
            pseudo_outcome(bad)

    def test_sampled_values_never_exceed_bound(self):
        bounds = PropensityBounds(0.2, 0.8)
        rng = rng_for(17)
        ps = rng.uniform(bounds.f_min, bounds.f_max, size=5000)
        ts = (rng.random(5000) < ps).astype(int)
        ys = rng.random(5000)
        vals = pseudo_outcome_values(ts, ys, ps)
        assert np.all(np.abs(vals) <= bounds.pseudo_outcome_bound + 1e-12)


class TestFitRidge:
    def test_single_record_hand_solution(self):
        recs = [rct([0.0], 1, 1.0, 0.5, 1)]  # phi = e1, pseudo-outcome 2
        sol = fit_ridge(recs, ONE_HOT_2, lam=1.0)
        np.testing.assert_allclose(sol.info.V, np.diag([2.0, 1.0]))
        np.testing.assert_allclose(sol.moment, [2.0, 0.0])
        np.testing.assert_allclose(sol.theta_hat, [1.0, 0.0])

    def test_ols_is_sample_mean(self):
        recs = [rct([0.0], 1, 1.0, 0.5, s) for s in (1, 2)]
        sol = fit_ridge(recs, ONE_HOT_1, lam=0.0)
        np.testing.assert_allclose(sol.theta_hat, [2.0])

    def test_singular_design_rejected(self):
        recs = [rct([0.0], 1, 1.0, 0.5, 1)]  # spans only e1 of d=2
        with pytest.raises(SingularDesignError, match="rank 1"):
            fit_ridge(recs, ONE_HOT_2, lam=0.0)

    def test_normal_equation_residual(self):
        rng = rng_for(23)
        for trial in range(20):
            phis = rng.standard_normal((30, 3))
            yts = rng.standard_normal(30)
            lam = float(rng.uniform(0.01, 2.0))
            sol = fit_ridge_arrays(phis, yts, lam)
            resid = np.linalg.norm(sol.info.V @ sol.theta_hat - sol.moment)
            assert resid / (1.0 + np.linalg.norm(sol.moment)) < 1e-10


class TestWeightedRidge:
    def test_unit_weights_reduce_to_ridge(self):
        recs = [rct([0.0], 1, 1.0, 0.5, 1), rct([1.0], 0, 0.5, 0.4, 2)]
        a = fit_weighted_ridge(recs, [1.0, 1.0], ONE_HOT_2, lam=0.7)
        b = fit_ridge(recs, ONE_HOT_2, lam=0.7)
        np.testing.assert_array_equal(a.theta_hat, b.theta_hat)

    def test_downweighted_conflict(self):
        # phi = e1 twice with pseudo-outcomes +2 (weight 1) and -2 (weight 0.2):
        # theta = (2 - 0.4) / 1.2 = 4/3
        recs = [rct([0.0], 1, 1.0, 0.5, 1), rct([0.0], 0, 1.0, 0.5, 2)]
        sol = fit_weighted_ridge(recs, [1.0, 0.2], ONE_HOT_1, lam=0.0)
        np.testing.assert_allclose(sol.theta_hat, [4.0 / 3.0])

    def test_nonpositive_weight_rejected(self):
        recs = [rct([0.0], 1, 1.0, 0.5, 1)]
        with pytest.raises(ValueError):
            fit_weighted_ridge(recs, [0.0], ONE_HOT_1, lam=1.0)

    def test_weight_length_mismatch_rejected(self):
        recs = [rct([0.0], 1, 1.0, 0.5, 1)]
        with pytest.raises(ValueError):
            fit_weighted_ridge(recs, [1.0, 1.0], ONE_HOT_1, lam=1.0)


class TestAlignmentWeights:
    def model(self, e_hat):
        # bias chosen so the head predicts e_hat for the all-zero feature
        logit = np.log(e_hat / (1.0 - e_hat))
        return PropensityModel(weights=np.zeros(1), bias=logit)

    def test_large_gap_is_gold(self):
        recs = [rct([0.0], 0, 1.0, 0.5, 1)]
        fmap = FeatureMap(kind="identity", output_dim=1, norm_bound=1.0)
        (w,) = compute_alignment_weights(recs, self.model(0.9), fmap)
        assert w.gap == pytest.approx(0.9)
        assert w.weight == 1.0

    def test_small_gap_is_silver(self):
        recs = [rct([0.0], 1, 1.0, 0.5, 1)]
        fmap = FeatureMap(kind="identity", output_dim=1, norm_bound=1.0)
        (w,) = compute_alignment_weights(recs, self.model(0.6), fmap)
        assert w.gap == pytest.approx(0.4)
        assert w.weight == 0.2

    def test_boundary_gap_is_silver(self):
        """gap = 0.5 exactly: strict inequality keeps the 0.2 weight."""
        recs = [rct([0.0], 1, 1.0, 0.5, 1)]
        fmap = FeatureMap(kind="identity", output_dim=1, norm_bound=1.0)
        (w,) = compute_alignment_weights(recs, self.model(0.5), fmap)
        assert w.gap == pytest.approx(0.5)
        assert w.weight == 0.2

    def test_gold_weight_enters_fit(self):
        recs = [rct([0.0], 0, 1.0, 0.5, 1)]
        fmap = FeatureMap(kind="identity", output_dim=1, norm_bound=1.0)
        ws = [w.weight for w in
              compute_alignment_weights(recs, self.model(0.9), fmap)]
        assert ws == [1.0]


class TestPredictCate:
    def test_one_hot_lookup(self):
        sol = fit_ridge_arrays(np.array([[1.0, 0.0]]), np.array([2.0]), 1.0)
        assert predict_cate(sol, ONE_HOT_2, [0.0]) == pytest.approx(1.0)
        assert predict_cate(sol, ONE_HOT_2, [1.0]) == 0.0

    def test_zero_theta(self):
        sol = fit_ridge_arrays(np.zeros((0, 2)), np.zeros(0), 1.0)
        np.testing.assert_array_equal(sol.theta_hat, [0.0, 0.0])
        assert predict_cate(sol, ONE_HOT_2, [1.0]) == 0.0

    def test_dot_product(self):
        fmap = FeatureMap(kind="identity", output_dim=2, norm_bound=2.0)
        sol = solution_from_json({"theta_hat": [0.3, -0.2], "lambda": 1.0,
                                  "n": 0, "V": [1.0, 0.0, 0.0, 1.0]})
        assert predict_cate(sol, fmap, [1.0, 1.0]) == pytest.approx(0.1)


class TestBetaBound:
    def test_empty_design_closed_form(self):
        info = InfoMatrix(2, lam=1.0)
        params = ConfidenceParams(sigma=1.0, S=1.0, delta=np.exp(-0.5), lam=1.0)
        assert beta_bound(params, info) == pytest.approx(2.0)

    def test_monotone_in_delta(self):
        info = InfoMatrix.build(rng_for(5).standard_normal((10, 2)), 1.0)
        widths = [beta_bound(ConfidenceParams(1.0, 1.0, d, 1.0), info)
                  for d in (0.01, 0.05, 0.1, 0.2, 0.4, 0.8)]
        assert all(a > b for a, b in zip(widths, widths[1:]))

    def test_scalar_one_record(self):
        # V = 2, det ratio sqrt(2), S = 0:
        # beta = sqrt(2 (0.5 ln 2 + 0.5)) = sqrt(ln 2 + 1)
        info = InfoMatrix.build(np.array([[1.0]]), 1.0)
        params = ConfidenceParams(sigma=1.0, S=0.0, delta=np.exp(-0.5), lam=1.0)
        assert beta_bound(params, info) == pytest.approx(np.sqrt(np.log(2.0) + 1.0))

    def test_lambda_zero_unsupported(self):
        info = InfoMatrix.build(np.array([[1.0]]), 0.0)
        with pytest.raises(ValueError):
            beta_bound(ConfidenceParams(1.0, 1.0, 0.1, 0.0), info)

    def test_delta_domain(self):
        with pytest.raises(ValueError):
            ConfidenceParams(sigma=1.0, S=1.0, delta=1.0, lam=1.0)


class TestConfidenceWidth:
    def test_empty_design_width(self):
        sol = fit_ridge_arrays(np.zeros((0, 2)), np.zeros(0), 1.0)
        params = ConfidenceParams(sigma=1.0, S=1.0, delta=np.exp(-0.5), lam=1.0)
        assert confidence_width(sol, params, ONE_HOT_2, [0.0]) == pytest.approx(2.0)

    def test_width_shrinks_with_data(self):
        params = ConfidenceParams(sigma=1.0, S=1.0, delta=0.1, lam=1.0)
        fmap = ONE_HOT_1
        # leverage shrinks linearly while beta grows only logarithmically
        prev = np.inf
        for n in (1, 2, 4, 8, 16):
            phis = np.ones((n, 1))
            sol = fit_ridge_arrays(phis, np.full(n, 2.0), 1.0)
            width = confidence_width(sol, params, fmap, [0.0])
            assert width < prev
            prev = width

    def test_zero_feature_zero_width(self):
        fmap = FeatureMap(kind="identity", output_dim=2, norm_bound=2.0)
        sol = fit_ridge_arrays(np.eye(2), np.ones(2), 1.0)
        params = ConfidenceParams(sigma=1.0, S=1.0, delta=0.1, lam=1.0)
        assert confidence_width(sol, params, fmap, [0.0, 0.0]) == 0.0


class TestSandwich:
    def test_scalar_monte_carlo_avar(self):
        """Bernoulli(1/2) arms at p = 0.5: asymptotic variance 2."""
        rng = rng_for(31)
        n = 100_000
        ts = (rng.random(n) < 0.5).astype(int)
        ys = (rng.random(n) < 0.5).astype(float)
        yts = pseudo_outcome_values(ts, ys, np.full(n, 0.5))
        phis = np.ones((n, 1))
        sol = fit_ridge_arrays(phis, yts, 0.0)
        sw = sandwich_from_arrays(phis, yts, sol)
        assert abs(float(sw.avar[0, 0]) - 2.0) < 0.1

    def test_zero_residuals_zero_omega(self):
        phis = np.ones((5, 1))
        yts = np.full(5, 2.0)
        sol = fit_ridge_arrays(phis, yts, 0.0)
        sw = sandwich_from_arrays(phis, yts, sol)
        np.testing.assert_allclose(sw.omega_hat, 0.0, atol=1e-12)

    def test_avar_symmetric_psd(self):
        rng = rng_for(37)
        phis = rng.standard_normal((50, 3))
        yts = rng.standard_normal(50)
        sol = fit_ridge_arrays(phis, yts, 0.0)
        sw = sandwich_from_arrays(phis, yts, sol)
        np.testing.assert_allclose(sw.avar, sw.avar.T, atol=1e-10)
        assert np.linalg.eigvalsh(sw.avar).min() > -1e-10

    def test_too_few_records_rejected(self):
        phis = np.ones((1, 2))
        sol = fit_ridge_arrays(phis, np.ones(1), 1.0)
        with pytest.raises(ValueError):
            sandwich_from_arrays(phis, np.ones(1), sol)

    def test_record_interface(self):
        recs = [rct([0.0], 1, 1.0, 0.5, s + 1) for s in range(3)]
        sol = fit_ridge(recs, ONE_HOT_1, lam=0.0)
        sw = sandwich_variance(recs, sol, ONE_HOT_1)
        assert sw.avar.shape == (1, 1)


class TestPointwiseCi:
    def solution(self, theta):
        return solution_from_json({"theta_hat": list(theta), "lambda": 0.0,
                                   "n": 0, "V": list(np.eye(len(theta)).ravel())})

    def sandwich(self, avar):
        from budgex.estimator import SandwichEstimate
        a = np.atleast_2d(np.asarray(avar, dtype=float))
        return SandwichEstimate(sigma_hat=np.eye(len(a)), omega_hat=a, avar=a)

    def test_half_width_arithmetic(self):
        fmap = FeatureMap(kind="identity", output_dim=1, norm_bound=1.0)
        lo, hi = pointwise_ci(self.solution([0.0]), self.sandwich([[2.0]]),
                              fmap, [1.0], level=0.95, n=200)
        half = stats.norm.ppf(0.975) * np.sqrt(2.0 / 200)
        assert hi == pytest.approx(half)
        assert hi == pytest.approx(0.196, abs=1e-3)
        assert lo == -hi

    def test_median_level_quantile(self):
        fmap = FeatureMap(kind="identity", output_dim=1, norm_bound=1.0)
        lo, hi = pointwise_ci(self.solution([0.0]), self.sandwich([[1.0]]),
                              fmap, [1.0], level=0.5, n=1)
        assert hi == pytest.approx(0.6745, abs=1e-4)

    def test_zero_feature_degenerate(self):
        fmap = FeatureMap(kind="identity", output_dim=2, norm_bound=2.0)
        lo, hi = pointwise_ci(self.solution([0.4, 0.1]), self.sandwich(np.eye(2)),
                              fmap, [0.0, 0.0], level=0.95, n=10)
        assert lo == hi == 0.0


class TestInfoMatrix:
    def test_incremental_matches_rebuild(self):
        rng = rng_for(41)
        phis = rng.standard_normal((25, 3))
        inc = InfoMatrix(3, lam=0.5)
        for phi in phis:
            inc.update(phi)
        assert inc.rebuild_check(phis)
        assert inc.n == 25

    def test_minimum_eigenvalue_floor(self):
        rng = rng_for(43)
        phis = rng.standard_normal((10, 3))
        info = InfoMatrix.build(phis, lam=2.0)
        assert np.linalg.eigvalsh(info.V).min() >= 2.0 - 1e-9

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            InfoMatrix(2, lam=-1.0)


class TestSerialization:
    def test_solution_round_trip(self):
        rng = rng_for(47)
        phis = rng.standard_normal((12, 2))
        sol = fit_ridge_arrays(phis, rng.standard_normal(12), 1.0)
        doc = solution_to_json(sol, 1.0)
        back = solution_from_json(doc)
        np.testing.assert_allclose(back.theta_hat, sol.theta_hat)
        np.testing.assert_allclose(back.info.V, sol.info.V)

    def test_default_sigma(self):
        assert default_sigma(PropensityBounds(0.2, 0.8)) == pytest.approx(10.0)

    def test_ellipsoid_radius(self):
        sol = solution_from_json({"theta_hat": [1.0, 0.0], "lambda": 0.0,
                                  "n": 0, "V": [4.0, 0.0, 0.0, 1.0]})
        assert ellipsoid_radius(sol, [0.0, 0.0]) == pytest.approx(2.0)
