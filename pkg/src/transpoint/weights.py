"""Optimal ensemble weights and the transition point they induce."""

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import error_theory as et
from ._linalg import solve_symmetric
from .estimators import EnsembleWeights
from .exceptions import ConditionViolation, DegenerateError, InputError, NoCrossingError
from .model import RandomEffectsStructure, check_collection
from .transition import tau_ls, tau_ridge

REL_GAP = 1e-12


@dataclass(frozen=True)
class OptimalWeightSolution:
    """Minimizer of the ensemble excess MSPE subject to ``sum(w) == 1``.

    ``C`` is the quadratic form of the objective (``w^T C w``): diagonal for
    least squares, ``diag(v) + B^T B`` for ridge where column ``k`` of ``B`` is
    study ``k``'s test-set bias.
    """

    weights: EnsembleWeights
    objective: float
    kkt_residual: float
    C: np.ndarray
    multiplier: float

    @property
    def w(self):
        return self.weights.w

    @property
    def has_negative(self):
        return bool(np.any(self.w < 0))


def _solve_quadratic(C):
    K = C.shape[0]
    x = solve_symmetric(C, np.ones(K), what="optimal-weight system C")
    total = x.sum()
    if not np.isfinite(total) or total == 0:
        raise DegenerateError("optimal-weight system has no normalizable solution")
    w = x / total
    alpha = 2.0 / total
    kkt = float(np.max(np.abs(2.0 * C @ w - alpha)))
    return OptimalWeightSolution(EnsembleWeights(w), float(w @ C @ w), kkt, C, alpha)


def _re(re, sigma_eps2):
    if not isinstance(re, RandomEffectsStructure):
        raise InputError("re must be a RandomEffectsStructure")
    if sigma_eps2 < 0:
        raise InputError("sigma_eps2 must be >= 0")


def optimal_weights_ls(studies, re, sigma_eps2, X0):
    """Least squares ensemble weights inversely proportional to each study's MSPE.

    ``w_k ∝ 1 / (tr(G Z0^T Z0) + sigma_eps2 tr(R_k^-1 R0))``.
    """
    _re(re, sigma_eps2)
    studies = list(studies)
    check_collection(studies)
    c = np.array(
        [et.ls_study_components(s, re.re_columns, X0).excess(re.variances, sigma_eps2) for s in studies]
    )
    if np.any(c <= 0):
        raise DegenerateError("a study has zero prediction error; optimal weights undefined")
    inv = 1.0 / c
    w = inv / inv.sum()
    C = np.diag(c)
    alpha = 2.0 / inv.sum()
    kkt = float(np.max(np.abs(2.0 * c * w - alpha)))
    return OptimalWeightSolution(EnsembleWeights(w), float(1.0 / inv.sum()), kkt, C, alpha)


def ridge_weight_system(studies, re, sigma_eps2, beta, ridge_cfg, X0):
    """The ``K x K`` matrix ``C`` with ``C_kk = v_k + b_k^T b_k`` and ``C_jk = b_j^T b_k``."""
    parts = et.ridge_study_components_all(list(studies), re.re_columns, beta, ridge_cfg, X0)
    v = np.array([c.variance_term(re.variances, sigma_eps2) for c in parts])
    B = np.column_stack([c.bias for c in parts])
    return np.diag(v) + B.T @ B


def optimal_weights_ridge(studies, re, sigma_eps2, beta, ridge_cfg, X0):
    """Ridge ensemble weights ``w = C^-1 1 / (1^T C^-1 1)``.

    Weights are not constrained to be positive; check ``has_negative``.
    """
    _re(re, sigma_eps2)
    C = ridge_weight_system(studies, re, sigma_eps2, beta, ridge_cfg, X0)
    return _solve_quadratic(C)


def optimal_transition_point(
    studies, re_indices, sigma_eps2, X0, learner="ls", beta=None, ridge_cfg=None, xtol=1e-12
):
    """Heterogeneity level at which merging and the optimally weighted ensemble tie.

    Works on the equal-variance ray (every random effect gets ``sigma_bar2 * p / q``).
    Because the optimal weights move with ``sigma_bar2`` the crossing has no
    closed form; it is bracketed by ``[0, tau_equal]``, where ``tau_equal`` is
    the equal-weights transition point, and found by bisection.

    Raises
    ------
    ConditionViolation
        The equal-weights transition point does not exist.
    NoCrossingError
        The bracket shows no sign change.
    """
    studies = list(studies)
    p = check_collection(studies)
    cols = tuple(int(i) for i in re_indices)
    K = len(studies)
    eq = EnsembleWeights.equal(K)
    if learner == "ls":
        base = tau_ls(studies, cols, sigma_eps2, eq, X0)
        merged = et.ls_merged_components(studies, cols, X0)
        parts = [et.ls_study_components(s, cols, X0) for s in studies]
    elif learner == "ridge":
        if beta is None or ridge_cfg is None:
            raise InputError("ridge learner needs beta and ridge_cfg")
        base = tau_ridge(studies, cols, sigma_eps2, beta, ridge_cfg, eq, X0)
        merged = et.ridge_merged_components(studies, cols, beta, ridge_cfg, X0)
        parts = et.ridge_study_components_all(studies, cols, beta, ridge_cfg, X0)
    else:
        raise InputError(f"unknown learner {learner!r}")
    if not base.valid:
        raise ConditionViolation(
            f"equal-weights transition point does not exist ({base.status}); no bracket"
        )
    tau_eq = base.tau
    if tau_eq <= 0:
        raise NoCrossingError("equal-weights transition point is not positive", prevailing="ensemble")

    q = len(cols)
    B = np.column_stack([c.bias for c in parts])
    BtB = B.T @ B

    def gap(s):
        var = np.full(q, s * p / q)
        v = np.array([c.variance_term(var, sigma_eps2) for c in parts])
        sol = _solve_quadratic(np.diag(v) + BtB)
        return merged.excess(var, sigma_eps2) - sol.objective

    g0, g1 = gap(0.0), gap(tau_eq)
    scale = abs(merged.excess(np.zeros(q), sigma_eps2)) + 1e-300
    if g0 >= -REL_GAP * scale:
        raise NoCrossingError(
            "optimally weighted ensemble already matches merging at zero heterogeneity",
            prevailing="ensemble",
        )
    # optimal weights never do worse than equal ones, so g1 >= 0 up to rounding
    tol1 = REL_GAP * abs(merged.excess(np.full(q, tau_eq * p / q), sigma_eps2))
    if abs(g1) <= tol1:
        return float(tau_eq)
    if g1 < 0:
        raise NoCrossingError("no sign change up to the equal-weights transition point", prevailing="merge")
    return float(optimize.bisect(gap, 0.0, tau_eq, xtol=xtol * max(1.0, tau_eq), maxiter=500))


def weighted_tau(studies, re_indices, sigma_eps2, X0, w, learner="ls", beta=None, ridge_cfg=None):
    """Fixed-weight transition point; convenience wrapper used by checks and the CLI."""
    if learner == "ls":
        return tau_ls(studies, re_indices, sigma_eps2, w, X0)
    return tau_ridge(studies, re_indices, sigma_eps2, beta, ridge_cfg, w, X0)
