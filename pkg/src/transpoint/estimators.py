"""Least squares and ridge learners for merged, per-study, and ensembled data."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._linalg import SPDSolver
from .exceptions import DegenerateError, InputError
from .model import StudyData, check_collection, stack_studies

KINDS = ("LS-merged", "LS-study", "LS-ensemble", "Ridge-merged", "Ridge-study", "Ridge-ensemble")
SCALINGS = ("none", "inverse-sd")


@dataclass(frozen=True)
class RidgeConfig:
    """Ridge hyperparameters, fixed ahead of fitting.

    Parameters
    ----------
    lambda_merged : float
        Penalty for the merged fit.
    lambda_per_study : sequence of float
        One penalty per training study.
    scaling : {"none", "inverse-sd"}
        Whether predictors are rescaled to unit standard deviation before
        penalizing. Predictors are never centered.
    intercept : bool
        Column 0 is an intercept and is left unpenalized (and unscaled).
    """

    lambda_merged: float
    lambda_per_study: tuple
    scaling: str = "inverse-sd"
    intercept: bool = True

    def __post_init__(self):
        lam_k = tuple(float(v) for v in np.atleast_1d(self.lambda_per_study))
        if not (np.isfinite(self.lambda_merged) and self.lambda_merged >= 0):
            raise InputError("lambda_merged must be finite and >= 0")
        if not all(np.isfinite(v) and v >= 0 for v in lam_k):
            raise InputError("lambda_per_study entries must be finite and >= 0")
        if self.scaling not in SCALINGS:
            raise InputError(f"scaling must be one of {SCALINGS}, got {self.scaling!r}")
        object.__setattr__(self, "lambda_per_study", lam_k)
        object.__setattr__(self, "lambda_merged", float(self.lambda_merged))

    @classmethod
    def uniform(cls, lam, K, scaling="inverse-sd", intercept=True):
        return cls(lam, (lam,) * K, scaling, intercept)

    def check_K(self, K):
        if len(self.lambda_per_study) != K:
            raise InputError(
                f"lambda_per_study has {len(self.lambda_per_study)} entries for {K} studies"
            )


@dataclass(frozen=True)
class LearnerFit:
    """Coefficients on the original predictor scale, with provenance."""

    coefficients: np.ndarray
    kind: str
    scaling_used: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float).ravel()
        if not np.all(np.isfinite(c)):
            raise DegenerateError(f"{self.kind} fit produced non-finite coefficients")
        if self.kind not in KINDS:
            raise InputError(f"unknown learner kind {self.kind!r}")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    @property
    def p(self):
        return self.coefficients.shape[0]


@dataclass(frozen=True)
class EnsembleWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=float).ravel()
        if w.size == 0 or not np.all(np.isfinite(w)):
            raise InputError("ensemble weights must be finite and non-empty")
        if abs(w.sum() - 1.0) > 1e-12 * max(1.0, np.abs(w).sum()):
            raise InputError(f"ensemble weights must sum to 1 (sum = {w.sum()!r})")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @classmethod
    def equal(cls, K):
        return cls(np.full(K, 1.0 / K))

    @classmethod
    def normalized(cls, raw):
        raw = np.asarray(raw, dtype=float)
        return cls(raw / raw.sum())

    @property
    def K(self):
        return self.w.shape[0]


def as_weights(w, K=None):
    if w is None:
        if K is None:
            raise InputError("weights or K required")
        return EnsembleWeights.equal(K)
    if not isinstance(w, EnsembleWeights):
        w = EnsembleWeights(w)
    if K is not None and w.K != K:
        raise InputError(f"{w.K} weights for {K} studies")
    return w


def scaling_matrix(X, intercept=True, mode="inverse-sd"):
    """Diagonal scaling matrix S for ridge regression.

    With ``mode="inverse-sd"`` each column is scaled by the inverse of its
    sample standard deviation (``ddof=1``); an intercept column keeps scale 1.
    ``mode="none"`` gives the identity.
    """
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    if mode == "none":
        return np.eye(p)
    if mode != "inverse-sd":
        raise InputError(f"unknown scaling mode {mode!r}")
    if X.shape[0] < 2:
        raise DegenerateError("inverse-sd scaling needs at least two rows")
    sd = X.std(axis=0, ddof=1)
    s = np.empty(p)
    start = 1 if intercept else 0
    if intercept:
        s[0] = 1.0
    scaled = sd[start:]
    if np.any(scaled <= 0):
        bad = [int(j) + start for j in np.flatnonzero(scaled <= 0)]
        raise DegenerateError(f"degenerate scaling: column(s) {bad} have zero standard deviation")
    s[start:] = 1.0 / scaled
    return np.diag(s)


def penalty_diagonal(X, lam, scaling="inverse-sd", intercept=True):
    """Diagonal of ``lam * I_p^- S^-2`` for design ``X``."""
    p = X.shape[1]
    if lam == 0:
        return np.zeros(p), np.eye(p)
    S = scaling_matrix(X, intercept, scaling)
    d = lam / np.diag(S) ** 2
    if intercept:
        d[0] = 0.0
    return d, S


def penalized_gram(X, lam, scaling="inverse-sd", intercept=True):
    """Return ``(M, S)`` with ``M = X^T X + lam I_p^- S^-2``."""
    d, S = penalty_diagonal(X, lam, scaling, intercept)
    M = X.T @ X
    M[np.diag_indices_from(M)] += d
    return M, S


def fit_ols(data: StudyData, kind="LS-study"):
    """Least squares fit by the normal equations."""
    X, Y = data.X, data.Y
    solver = SPDSolver(X.T @ X, what=f"X^T X for study {data.id!r}")
    beta = solver.solve(X.T @ Y)
    return LearnerFit(beta, kind, np.eye(data.p))


def fit_ridge(data: StudyData, lam, scaling="inverse-sd", intercept=True, kind="Ridge-study"):
    """Ridge fit returned on the original predictor scale.

    Solves ``(X^T X + lam I_p^- S^-2) beta = X^T Y``, which equals
    ``S (Xs^T Xs + lam I_p^-)^-1 Xs^T Y`` for the scaled design ``Xs = X S``.
    """
    if lam < 0 or not np.isfinite(lam):
        raise InputError("lambda must be finite and >= 0")
    X, Y = data.X, data.Y
    M, S = penalized_gram(X, lam, scaling, intercept)
    solver = SPDSolver(M, what=f"penalized Gram matrix for study {data.id!r}")
    return LearnerFit(solver.solve(X.T @ Y), kind, S)


def fit_merged(studies, learner="ls", ridge_cfg=None):
    merged = stack_studies(studies).data
    if learner == "ls":
        return fit_ols(merged, kind="LS-merged")
    cfg = _need_ridge(ridge_cfg)
    return fit_ridge(merged, cfg.lambda_merged, cfg.scaling, cfg.intercept, kind="Ridge-merged")


def fit_per_study(studies, learner="ls", ridge_cfg=None):
    studies = list(studies)
    check_collection(studies)
    if learner == "ls":
        return [fit_ols(s) for s in studies]
    cfg = _need_ridge(ridge_cfg)
    cfg.check_K(len(studies))
    return [
        fit_ridge(s, lam, cfg.scaling, cfg.intercept)
        for s, lam in zip(studies, cfg.lambda_per_study)
    ]


def fit_ensemble(studies, w=None, learner="ls", ridge_cfg=None):
    fits = fit_per_study(studies, learner, ridge_cfg)
    return ensemble_combine(fits, as_weights(w, len(fits)))


def _need_ridge(cfg):
    if cfg is None:
        raise InputError("ridge learner needs a RidgeConfig")
    return cfg


def ensemble_combine(fits, w):
    """Weighted average of coefficient vectors.

    For linear learners this is the same as averaging their predictions.
    """
    fits = list(fits)
    w = as_weights(w, len(fits))
    p = {f.p for f in fits}
    if len(p) != 1:
        raise InputError(f"fits have different lengths: {sorted(p)}")
    coef = w.w @ np.vstack([f.coefficients for f in fits])
    kind = fits[0].kind.split("-")[0] + "-ensemble"
    return LearnerFit(coef, kind, None)


def predict(fit, X0):
    X0 = np.asarray(X0, dtype=float)
    if X0.ndim != 2 or X0.shape[1] != fit.p:
        raise InputError(f"X0 has shape {X0.shape}, expected (n0, {fit.p})")
    return X0 @ fit.coefficients
