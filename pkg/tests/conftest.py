"""Shared fixtures and independent oracles.

The oracles build every learner as an explicit linear map ``beta_hat = H Y``
and evaluate prediction error from the full block-diagonal covariance of
``Y``. They share no code with the trace formulas under test.
"""

import numpy as np
import pytest
from scipy.linalg import block_diag

from transpoint import StudyData


def make_studies(rng, K, n, p, intercept=False, spread=True):
    """K Gaussian designs; column scales differ by study when ``spread``."""
    out = []
    ns = [n] * K if np.isscalar(n) else list(n)
    for k in range(K):
        scale = rng.uniform(0.5, 2.0, p) if spread else np.ones(p)
        X = rng.standard_normal((ns[k], p)) * scale
        if intercept:
            X[:, 0] = 1.0
        out.append(StudyData(X, rng.standard_normal(ns[k]), id=f"s{k}"))
    return out


def inverse_sd_scaling(X, intercept):
    s = 1.0 / np.std(X, axis=0, ddof=1) if not intercept else np.r_[1.0, 1.0 / np.std(X[:, 1:], axis=0, ddof=1)]
    return np.diag(s)


def ridge_hat(X, lam, scaling="inverse-sd", intercept=True):
    """``S (Xt^T Xt + lam I^-)^-1 Xt^T`` with ``Xt = X S``; the scaled form."""
    p = X.shape[1]
    S = inverse_sd_scaling(X, intercept) if scaling == "inverse-sd" else np.eye(p)
    Xt = X @ S
    Iminus = np.eye(p)
    if intercept:
        Iminus[0, 0] = 0.0
    return S @ np.linalg.solve(Xt.T @ Xt + lam * Iminus, Xt.T)


def ls_hat(X):
    return np.linalg.pinv(X)


def merged_hat(designs, learner="ls", lam=0.0, scaling="inverse-sd", intercept=True):
    X = np.vstack(designs)
    return ls_hat(X) if learner == "ls" else ridge_hat(X, lam, scaling, intercept)


def ensemble_hat(designs, w, learner="ls", lams=None, scaling="inverse-sd", intercept=True):
    blocks = []
    for k, D in enumerate(designs):
        H = ls_hat(D) if learner == "ls" else ridge_hat(D, lams[k], scaling, intercept)
        blocks.append(w[k] * H)
    return np.hstack(blocks)


def oracle_excess(H, designs, cols, variances, sigma_eps2, beta, X0):
    """``E || X0 (H Y - beta) ||^2`` from the explicit covariance of stacked ``Y``."""
    G = np.diag(variances)
    covs = [D[:, cols] @ G @ D[:, cols].T + sigma_eps2 * np.eye(D.shape[0]) for D in designs]
    Sigma = block_diag(*covs)
    X = np.vstack(designs)
    A = X0 @ H
    bias = A @ X @ beta - X0 @ beta
    return float(np.trace(A @ Sigma @ A.T) + bias @ bias)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
