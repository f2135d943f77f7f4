"""Moment estimates of the variance components, and bootstrap test error.

Random-effect variances are estimated per coefficient with the
DerSimonian-Laird estimator applied to the per-study least squares
coefficients; the residual variance is pooled across studies.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from ._linalg import SPDSolver
from .estimators import predict
from .exceptions import InputError, InsufficientStudiesError
from .model import RandomEffectsStructure, check_collection

FEW_STUDIES = 5


class FewStudiesWarning(UserWarning):
    pass


@dataclass(frozen=True)
class VarCompEstimate:
    """Estimated variance components.

    Attributes
    ----------
    sigma_hat2 : ndarray (p,)
        Random-effect variance per coefficient; 0 for columns without a
        declared random effect and truncated at 0 elsewhere.
    sigma_eps_hat2 : float
        Pooled residual variance ``sum RSS_k / sum (n_k - p)``.
    sigma_bar2_hat : float
        ``sum(sigma_hat2) / p``.
    coefficients : ndarray (K, p)
        Per-study least squares estimates.
    sampling_variances : ndarray (K, p)
        Their estimated sampling variances.
    q_statistics : ndarray (p,)
        Cochran's Q per coefficient (nan where not estimated).
    re_columns : tuple
    """

    sigma_hat2: np.ndarray
    sigma_eps_hat2: float
    sigma_bar2_hat: float
    coefficients: np.ndarray
    sampling_variances: np.ndarray
    q_statistics: np.ndarray
    re_columns: tuple

    def random_effects(self, groups="singleton"):
        """Estimated ``G`` as a :class:`RandomEffectsStructure` on ``re_columns``.

        ``groups="singleton"`` puts every random effect in its own group
        (the widest, always-valid transition interval); ``"value"`` groups
        equal estimates together.
        """
        v = self.sigma_hat2[list(self.re_columns)]
        if groups == "singleton":
            g = tuple((i,) for i in range(len(self.re_columns)))
        else:
            g = None
        return RandomEffectsStructure(self.re_columns, v, groups=g)


def dersimonian_laird(estimates, variances):
    """Between-study variance of one effect from ``K`` estimates.

    Returns ``(tau2, Q)`` with ``tau2 = max(0, (Q - (K-1)) / (S1 - S2/S1))``,
    ``S1 = sum u``, ``S2 = sum u^2``, ``u = 1/variances``.
    """
    y = np.asarray(estimates, float)
    u = 1.0 / np.asarray(variances, float)
    S1 = u.sum()
    ybar = (u @ y) / S1
    Q = float(u @ (y - ybar) ** 2)
    denom = S1 - (u @ u) / S1
    if denom <= 0:
        return 0.0, Q
    return max(0.0, (Q - (len(y) - 1)) / denom), Q


def estimate_varcomp(studies, re_indices):
    """Estimate ``G``'s diagonal and the residual variance from training studies.

    Each study needs ``n_k > p`` and a full-rank design. Warns when there are
    fewer than five studies, where moment estimates are imprecise.
    """
    studies = list(studies)
    p = check_collection(studies)
    K = len(studies)
    if K < 2:
        raise InsufficientStudiesError(f"variance components need at least 2 studies, got {K}")
    cols = tuple(int(i) for i in re_indices)
    if cols and (max(cols) >= p or min(cols) < 0):
        raise InputError(f"random-effect columns {cols} out of range for p={p}")
    if K < FEW_STUDIES:
        warnings.warn(
            f"only {K} studies: variance component estimates will be imprecise",
            FewStudiesWarning,
            stacklevel=2,
        )
    coefs = np.empty((K, p))
    svar = np.empty((K, p))
    rss_total, df_total = 0.0, 0
    for k, s in enumerate(studies):
        if s.n <= p:
            raise InputError(f"study {s.id!r} has n={s.n} <= p={p}; per-study least squares impossible")
        solver = SPDSolver(s.X.T @ s.X, what=f"X^T X for study {s.id!r}")
        b = solver.solve(s.X.T @ s.Y)
        resid = s.Y - s.X @ b
        rss = float(resid @ resid)
        df = s.n - p
        rinv_diag = np.diag(solver.solve(np.eye(p)))
        coefs[k] = b
        svar[k] = (rss / df) * rinv_diag
        rss_total += rss
        df_total += df
    sigma_hat2 = np.zeros(p)
    qstat = np.full(p, np.nan)
    for i in cols:
        if np.any(svar[:, i] <= 0):
            # a perfect per-study fit gives no information about between-study spread
            continue
        sigma_hat2[i], qstat[i] = dersimonian_laird(coefs[:, i], svar[:, i])
    sigma_eps = rss_total / df_total
    return VarCompEstimate(
        sigma_hat2, sigma_eps, float(sigma_hat2.sum() / p), coefs, svar, qstat, cols
    )


@dataclass(frozen=True)
class BootstrapRMSPE:
    rmspe: float
    ci_lower: float
    ci_upper: float
    B: int


def bootstrap_residuals(residuals, B=1000, seed=0, level=0.95):
    """Root mean squared error of ``residuals`` with a percentile bootstrap interval.

    Rows are resampled with replacement ``B`` times. The result depends only
    on ``(residuals, B, seed, level)``.
    """
    r2 = np.asarray(residuals, float).ravel() ** 2
    n = r2.shape[0]
    if n == 0:
        raise InputError("empty test set")
    if B < 100:
        raise InputError(f"B must be at least 100, got {B}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(B, n))
    boot = np.sqrt(r2[idx].mean(axis=1))
    alpha = (1.0 - level) / 2
    lo, hi = np.quantile(boot, [alpha, 1.0 - alpha])
    return BootstrapRMSPE(float(np.sqrt(r2.mean())), float(lo), float(hi), int(B))


def bootstrap_rmspe(fit_procedure, studies, test_study, B=1000, seed=0, level=0.95):
    """Fit on ``studies`` with ``fit_procedure`` and bootstrap the test RMSPE.

    ``fit_procedure(studies)`` must return a :class:`~transpoint.estimators.LearnerFit`.
    """
    fit = fit_procedure(list(studies))
    resid = test_study.Y - predict(fit, test_study.X)
    return bootstrap_residuals(resid, B, seed, level)
