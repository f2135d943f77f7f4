import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.stats import ortho_group

from conftest import make_studies
from transpoint import (
    ConditionViolation,
    EnsembleWeights,
    NoCrossingError,
    RandomEffectsStructure,
    RidgeConfig,
    StudyData,
    excess_mspe_ls_ensemble,
    excess_mspe_ls_merged,
    excess_mspe_ridge_ensemble,
    optimal_transition_point,
    optimal_weights_ls,
    optimal_weights_ridge,
    tau_ls,
)


def simplex_points(rng, K, n):
    return rng.dirichlet(np.ones(K), size=n)


def affine_points(rng, K, n, spread=1.0):
    """Weights summing to one with unrestricted signs."""
    u = rng.standard_normal((n, K)) * spread
    return 1.0 / K + u - u.mean(axis=1, keepdims=True)


class TestLeastSquaresWeights:
    def test_identical_studies_equal_weights(self, rng):
        X = rng.standard_normal((20, 3))
        studies = [StudyData(X, np.zeros(20)) for _ in range(4)]
        sol = optimal_weights_ls(studies, RandomEffectsStructure((0,), [0.5]), 1.0, rng.standard_normal((5, 3)))
        assert_allclose(sol.w, 0.25, rtol=1e-12)

    def test_inverse_noise_proportionality(self, rng):
        X = rng.standard_normal((20, 3))
        studies = [StudyData(X, np.zeros(20)), StudyData(X / np.sqrt(2.0), np.zeros(20))]
        sol = optimal_weights_ls(studies, RandomEffectsStructure((0,), [0.0]), 1.0, rng.standard_normal((6, 3)))
        assert sol.w[0] / sol.w[1] == pytest.approx(2.0, rel=1e-12)

    def test_beats_grid(self, rng):
        studies = make_studies(rng, 4, [15, 20, 30, 60], 4)
        X0 = rng.standard_normal((10, 4))
        re = RandomEffectsStructure((0, 1), [0.3, 0.3])
        sol = optimal_weights_ls(studies, re, 1.0, X0)
        f = lambda w: excess_mspe_ls_ensemble(studies, re, 1.0, w, X0).excess_mspe
        assert sol.objective == pytest.approx(f(sol.w), rel=1e-12)
        assert sol.objective <= f(EnsembleWeights.equal(4))
        grid = simplex_points(rng, 4, 10_000)
        assert sol.objective <= min(f(w) for w in grid) + 1e-12
        assert np.all(sol.w > 0)
        assert sol.kkt_residual <= 1e-8 * np.linalg.norm(sol.C, 2)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_smaller_noise_trace_gets_larger_weight(self, seed):
        rng = np.random.default_rng(seed)
        studies = make_studies(rng, 3, [12, 20, 35], 3)
        X0 = rng.standard_normal((6, 3))
        sol = optimal_weights_ls(studies, RandomEffectsStructure((1,), [0.4]), 1.0, X0)
        R0 = X0.T @ X0
        tr = [np.trace(np.linalg.solve(s.X.T @ s.X, R0)) for s in studies]
        order = np.argsort(tr)
        assert np.all(np.diff(sol.w[order]) < 0) or len(set(np.round(tr, 12))) < 3


class TestRidgeWeights:
    def test_no_bias_reduces_to_inverse_variance(self, rng):
        studies = make_studies(rng, 3, [10, 15, 25], 5, intercept=True)
        X0 = rng.standard_normal((7, 5))
        re = RandomEffectsStructure((1, 2), [0.2, 0.2])
        cfg = RidgeConfig.uniform(1.0, 3)
        sol = optimal_weights_ridge(studies, re, 1.0, np.zeros(5), cfg, X0)
        v = np.diag(sol.C)
        assert_allclose(sol.w, (1 / v) / np.sum(1 / v), rtol=1e-12)

    def test_identical_studies(self, rng):
        X = rng.standard_normal((12, 4))
        studies = [StudyData(X, np.zeros(12)) for _ in range(3)]
        cfg = RidgeConfig.uniform(2.0, 3, intercept=False)
        sol = optimal_weights_ridge(studies, RandomEffectsStructure((0,), [1.0]), 1.0, rng.standard_normal(4), cfg, rng.standard_normal((5, 4)))
        assert_allclose(sol.w, 1 / 3, rtol=1e-10)

    def test_beats_random_affine_weights(self, rng):
        studies = make_studies(rng, 3, [10, 14, 30], 8, intercept=True)
        X0 = rng.standard_normal((9, 8))
        X0[:, 0] = 1.0
        beta = rng.standard_normal(8)
        cfg = RidgeConfig(1.0, (0.5, 3.0, 1.0))
        re = RandomEffectsStructure((1, 2, 3), [0.1, 0.1, 0.1])
        sol = optimal_weights_ridge(studies, re, 1.0, beta, cfg, X0)
        f = lambda w: excess_mspe_ridge_ensemble(studies, re, 1.0, beta, cfg, w, X0).excess_mspe
        assert sol.objective == pytest.approx(f(sol.w), rel=1e-10)
        W = affine_points(rng, 3, 10_000)
        best = min(float(w @ sol.C @ w) for w in W)
        assert sol.objective <= best
        lhs = 2 * sol.C @ sol.w
        assert np.max(np.abs(lhs - sol.multiplier)) <= 1e-8 * np.linalg.norm(sol.C, 2)

    def test_negative_weights_kept_and_flagged(self):
        from transpoint.weights import _solve_quadratic

        # strongly aligned biases: the cross term exceeds the first diagonal entry
        sol = _solve_quadratic(np.array([[1.0, 1.2], [1.2, 2.0]]))
        assert_allclose(sol.w, [0.8 / 0.6, -0.2 / 0.6], rtol=1e-12)
        assert sol.has_negative


class TestOptimalTransition:
    def test_identical_studies_no_crossing(self, rng):
        X = rng.standard_normal((20, 3))
        studies = [StudyData(X, np.zeros(20)) for _ in range(3)]
        with pytest.raises(ConditionViolation):
            optimal_transition_point(studies, (0, 1), 1.0, rng.standard_normal((5, 3)))

    def test_symmetric_studies_match_equal_weights(self, rng):
        p = 3
        X = rng.standard_normal((25, p))
        studies = [StudyData(X @ ortho_group.rvs(p, random_state=k), np.zeros(25)) for k in range(3)]
        X0 = np.eye(p)
        cols = tuple(range(p))
        tau_eq = tau_ls(studies, cols, 1.0, EnsembleWeights.equal(3), X0).tau
        star = optimal_transition_point(studies, cols, 1.0, X0)
        assert star == pytest.approx(tau_eq, abs=1e-6)

    def test_asymmetric_below_equal_and_self_consistent(self, rng):
        studies = make_studies(rng, 3, [12, 25, 60], 4)
        X0 = rng.standard_normal((10, 4))
        cols = (0, 1)
        tau_eq = tau_ls(studies, cols, 1.0, EnsembleWeights.equal(3), X0).tau
        star = optimal_transition_point(studies, cols, 1.0, X0)
        assert star < tau_eq
        re = RandomEffectsStructure.from_sigma_bar2(cols, 4, star)
        w = optimal_weights_ls(studies, re, 1.0, X0).weights
        m = excess_mspe_ls_merged(studies, re, 1.0, X0).excess_mspe
        e = excess_mspe_ls_ensemble(studies, re, 1.0, w, X0).excess_mspe
        assert e == pytest.approx(m, rel=1e-7)
        # fixed-weight transition at the optimal weights lands on the same point
        assert tau_ls(studies, cols, 1.0, w, X0).tau == pytest.approx(star, abs=1e-8)

    def test_ridge_bound(self, rng):
        studies = make_studies(rng, 3, [10, 20, 40], 5, intercept=True)
        X0 = rng.standard_normal((8, 5))
        X0[:, 0] = 1.0
        beta = rng.standard_normal(5) * 0.1
        cfg = RidgeConfig.uniform(0.5, 3)
        from transpoint import tau_ridge

        tau_eq = tau_ridge(studies, (1, 2), 1.0, beta, cfg, EnsembleWeights.equal(3), X0)
        try:
            star = optimal_transition_point(studies, (1, 2), 1.0, X0, "ridge", beta, cfg)
        except NoCrossingError as exc:
            assert exc.prevailing in ("merge", "ensemble")
        else:
            assert star <= tau_eq.tau
