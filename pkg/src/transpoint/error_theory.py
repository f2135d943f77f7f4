"""Closed-form excess mean squared prediction error of merged and ensemble learners.

The *excess* MSPE is ``E||X0 beta_hat - X0 beta||^2``: the variance of the
test-set predictions plus their squared bias. The irreducible part
``E||Z0 gamma0 + eps0||^2`` is shared by every learner and is left out; use
:func:`irreducible_error` to add it back.

Every excess MSPE here is affine in the random-effect variances:

    mspe = sum_i re_slopes[i] * sigma_i^2 + noise_coef * sigma_eps2 + ||bias||^2

:class:`MSPEComponents` holds those coefficients so callers can evaluate the
error along any variance allocation without refitting anything.
"""

from dataclasses import dataclass

import numpy as np

from ._linalg import SPDSolver
from .estimators import as_weights, penalized_gram
from .exceptions import InputError
from .model import check_collection


@dataclass(frozen=True)
class ErrorDecomposition:
    variance_term: float
    bias_sq_term: float

    @property
    def excess_mspe(self):
        return self.variance_term + self.bias_sq_term


@dataclass(frozen=True)
class MSPEComponents:
    """Coefficients of the excess MSPE as an affine function of ``G``."""

    re_slopes: np.ndarray
    noise_coef: float
    bias: np.ndarray

    @property
    def bias_sq(self):
        return float(self.bias @ self.bias)

    def variance_term(self, variances, sigma_eps2):
        return float(self.re_slopes @ np.asarray(variances, float)) + sigma_eps2 * self.noise_coef

    def decomposition(self, variances, sigma_eps2):
        return ErrorDecomposition(self.variance_term(variances, sigma_eps2), self.bias_sq)

    def excess(self, variances, sigma_eps2):
        return self.variance_term(variances, sigma_eps2) + self.bias_sq

    def group_slopes(self, groups):
        return np.array([self.re_slopes[list(g)].sum() for g in groups])


def _prep(studies, re_columns, X0):
    studies = list(studies)
    p = check_collection(studies)
    X0 = np.asarray(X0, dtype=float)
    if X0.ndim != 2 or X0.shape[1] != p:
        raise InputError(f"X0 has shape {X0.shape}, expected (n0, {p})")
    cols = list(re_columns)
    if cols and max(cols) >= p:
        raise InputError(f"random-effect columns {cols} out of range for p={p}")
    return studies, p, X0, cols


def _columns(re):
    return re.re_columns


def _re_slopes(solved_X0, studies, cols, coef=None):
    """sum_k coef_k * ||(M^-1 X0^T)^T X_k^T z_{k,i}||^2 for each random effect i."""
    out = np.zeros(len(cols))
    if not cols:
        return out
    for k, s in enumerate(studies):
        A = s.X.T @ s.X[:, cols]  # X_k^T Z_k
        proj = solved_X0.T @ A  # n0 x q
        c = 1.0 if coef is None else coef[k]
        out += c * np.einsum("ij,ij->j", proj, proj)
    return out


# ---------------------------------------------------------------- least squares


def ls_study_components(study, re_columns, X0):
    """Excess MSPE of one study's least squares fit."""
    studies, p, X0, cols = _prep([study], re_columns, X0)
    s = studies[0]
    B = SPDSolver(s.X.T @ s.X, what=f"X^T X for study {s.id!r}").solve(X0.T)
    Z0 = X0[:, cols]
    return MSPEComponents(
        np.einsum("ij,ij->j", Z0, Z0), float(np.einsum("ij,ji->", X0, B)), np.zeros(X0.shape[0])
    )


def ls_ensemble_components(studies, re_columns, w, X0):
    studies, p, X0, cols = _prep(studies, re_columns, X0)
    w = as_weights(w, len(studies)).w
    w2 = w @ w
    Z0 = X0[:, cols]
    # tr(Gamma_(i)^T Z0^T Z0 Gamma_(i)) is the i-th diagonal entry of Z0^T Z0
    slopes = w2 * np.einsum("ij,ij->j", Z0, Z0)
    noise = 0.0
    for wk, s in zip(w, studies):
        B = SPDSolver(s.X.T @ s.X, what=f"X^T X for study {s.id!r}").solve(X0.T)
        noise += wk**2 * float(np.einsum("ij,ji->", X0, B))
    return MSPEComponents(slopes, noise, np.zeros(X0.shape[0]))


def ls_merged_components(studies, re_columns, X0):
    studies, p, X0, cols = _prep(studies, re_columns, X0)
    R = sum(s.X.T @ s.X for s in studies)
    B = SPDSolver(R, what="merged X^T X").solve(X0.T)
    slopes = _re_slopes(B, studies, cols)
    noise = float(np.einsum("ij,ji->", X0, B))
    return MSPEComponents(slopes, noise, np.zeros(X0.shape[0]))


def excess_mspe_ls_ensemble(studies, re, sigma_eps2, w, X0):
    """Excess MSPE of the least squares ensemble with weights ``w``.

    ``sum_j sigma_(j)^2 tr(Gamma_(j)^T Z0^T Z0 Gamma_(j)) sum_k w_k^2
    + sigma_eps2 sum_k w_k^2 tr(R_k^-1 R0)``; the bias term is zero.
    """
    return ls_ensemble_components(studies, _columns(re), w, X0).decomposition(
        re.variances, sigma_eps2
    )


def excess_mspe_ls_merged(studies, re, sigma_eps2, X0):
    """Excess MSPE of least squares on the merged data (unbiased)."""
    return ls_merged_components(studies, _columns(re), X0).decomposition(re.variances, sigma_eps2)


# ---------------------------------------------------------------- ridge


def ridge_study_components(study, re_columns, beta, lam, X0, scaling="inverse-sd", intercept=True):
    """Excess MSPE components of one study's ridge fit.

    ``bias`` is the test-set bias ``-lam X0 M^-1 I_p^- S^-2 beta``.
    """
    studies, p, X0, cols = _prep([study], re_columns, X0)
    s = studies[0]
    M, S = penalized_gram(s.X, lam, scaling, intercept)
    solver = SPDSolver(M, what=f"penalized Gram matrix for study {s.id!r}")
    B = solver.solve(X0.T)
    slopes = _re_slopes(B, [s], cols)
    XB = s.X @ B
    noise = float(np.einsum("ij,ij->", XB, XB))
    bias = _bias(solver, X0, M - s.X.T @ s.X, beta)
    return MSPEComponents(slopes, noise, bias)


def _bias(solver, X0, penalty, beta):
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.shape[0] != X0.shape[1]:
        raise InputError(f"beta has length {beta.shape[0]}, expected {X0.shape[1]}")
    return -(X0 @ solver.solve(np.diag(penalty) * beta))


def ridge_study_components_all(studies, re_columns, beta, ridge_cfg, X0):
    studies = list(studies)
    ridge_cfg.check_K(len(studies))
    return [
        ridge_study_components(s, re_columns, beta, lam, X0, ridge_cfg.scaling, ridge_cfg.intercept)
        for s, lam in zip(studies, ridge_cfg.lambda_per_study)
    ]


def combine_study_components(parts, w):
    """Ensemble components from per-study components (studies are independent)."""
    w = as_weights(w, len(parts)).w
    slopes = sum(wk**2 * c.re_slopes for wk, c in zip(w, parts))
    noise = sum(wk**2 * c.noise_coef for wk, c in zip(w, parts))
    bias = sum(wk * c.bias for wk, c in zip(w, parts))
    return MSPEComponents(np.asarray(slopes, float), float(noise), np.asarray(bias, float))


def ridge_ensemble_components(studies, re_columns, beta, ridge_cfg, w, X0):
    _prep(studies, re_columns, X0)
    parts = ridge_study_components_all(studies, re_columns, beta, ridge_cfg, X0)
    return combine_study_components(parts, w)


def ridge_merged_components(studies, re_columns, beta, ridge_cfg, X0):
    studies, p, X0, cols = _prep(studies, re_columns, X0)
    X = np.vstack([s.X for s in studies])
    M, S = penalized_gram(X, ridge_cfg.lambda_merged, ridge_cfg.scaling, ridge_cfg.intercept)
    solver = SPDSolver(M, what="merged penalized Gram matrix")
    B = solver.solve(X0.T)
    slopes = _re_slopes(B, studies, cols)
    XB = X @ B
    noise = float(np.einsum("ij,ij->", XB, XB))
    bias = _bias(solver, X0, M - X.T @ X, beta)
    return MSPEComponents(slopes, noise, bias)


def excess_mspe_ridge_ensemble(studies, re, sigma_eps2, beta, ridge_cfg, w, X0):
    """Excess MSPE of the ridge ensemble: prediction variance plus ``||b_E||^2``."""
    return ridge_ensemble_components(studies, _columns(re), beta, ridge_cfg, w, X0).decomposition(
        re.variances, sigma_eps2
    )


def excess_mspe_ridge_merged(studies, re, sigma_eps2, beta, ridge_cfg, X0):
    """Excess MSPE of ridge on the merged data: prediction variance plus ``||b_M||^2``."""
    return ridge_merged_components(studies, _columns(re), beta, ridge_cfg, X0).decomposition(
        re.variances, sigma_eps2
    )


# ---------------------------------------------------------------- absolute error


def irreducible_error(re, sigma_eps2, X0):
    """``E||Z0 gamma0 + eps0||^2 = tr(G Z0^T Z0) + n0 sigma_eps2``."""
    X0 = np.asarray(X0, dtype=float)
    Z0 = X0[:, list(re.re_columns)]
    return float(re.variances @ np.einsum("ij,ij->j", Z0, Z0)) + X0.shape[0] * sigma_eps2


def absolute_mspe(decomposition, re, sigma_eps2, X0):
    """Total expected squared test error ``E||Y0 - X0 beta_hat||^2``."""
    return decomposition.excess_mspe + irreducible_error(re, sigma_eps2, X0)
