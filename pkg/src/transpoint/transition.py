"""Transition points between the merging and ensembling regimes.

For fixed ensemble weights the difference ``ensemble - merged`` in excess MSPE
is affine in the random-effect variances. Per variance group ``j`` define

    den_j = (merged slope) - (ensemble slope)      summed over the group
    num   = sigma_eps2 * (ensemble noise - merged noise) + ||b_E||^2 - ||b_M||^2

With a single group the ensemble wins exactly when ``sigma_bar2 >= (q/p) num / den``.
With several groups, merging is guaranteed to win below
``num / (p max_j den_j/m_j)`` and ensembling above ``num / (p min_j den_j/m_j)``;
between the two bounds nothing is claimed.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import error_theory as et
from .exceptions import InputError
from .model import RandomEffectsStructure, check_collection

REL_TOL = 1e-10

OK = "ok"
VIOLATED = "condition-violated"
DEGENERATE = "degenerate"


@dataclass(frozen=True)
class TransitionResult:
    """A transition point (``kind="point"``) or interval (``kind="interval"``).

    All tau values are on the variance scale of ``sigma_bar2``. For a point
    result ``tau_lower == tau_upper == tau``. A bound whose positivity
    condition fails is ``None`` and its status says why.
    """

    kind: str
    learner: str
    tau_lower: Optional[float]
    tau_upper: Optional[float]
    numerator: float
    group_denominators: tuple
    group_sizes: tuple
    status_lower: str
    status_upper: str
    lower_group: Optional[int] = None
    upper_group: Optional[int] = None
    p: int = 0

    @property
    def tau(self):
        if self.kind != "point":
            raise AttributeError("interval results have tau_lower / tau_upper, not tau")
        return self.tau_lower

    @property
    def valid_lower(self):
        return self.status_lower == OK

    @property
    def valid_upper(self):
        return self.status_upper == OK

    @property
    def valid(self):
        return self.valid_lower and self.valid_upper

    @property
    def status(self):
        if self.valid:
            return OK
        if DEGENERATE in (self.status_lower, self.status_upper):
            return DEGENERATE
        return VIOLATED

    @property
    def bounds(self):
        return self.tau_lower, self.tau_upper

    @property
    def sqrt_bounds(self):
        return tuple(None if t is None else float(np.sqrt(max(t, 0.0))) for t in self.bounds)

    def region(self, sigma_bar2):
        """Which learner the theory favors at heterogeneity ``sigma_bar2``."""
        if self.valid_lower and sigma_bar2 < self.tau_lower:
            return "merge"
        if self.valid_upper:
            if self.kind == "point" and sigma_bar2 >= self.tau_upper:
                return "ensemble"
            if sigma_bar2 > self.tau_upper:
                return "ensemble"
        return "indeterminate"

    def as_dict(self):
        lo, hi = self.sqrt_bounds
        return {
            "kind": self.kind,
            "learner": self.learner,
            "tau_lower": self.tau_lower,
            "tau_upper": self.tau_upper,
            "sqrt_tau_lower": lo,
            "sqrt_tau_upper": hi,
            "status_lower": self.status_lower,
            "status_upper": self.status_upper,
            "numerator": self.numerator,
            "group_denominators": list(self.group_denominators),
            "group_sizes": list(self.group_sizes),
        }


def _status(den, scale):
    tol = REL_TOL * max(scale, np.finfo(float).tiny)
    if abs(den) <= tol:
        return DEGENERATE
    return OK if den > 0 else VIOLATED


def transition_from_components(merged, ensemble, groups, p, sigma_eps2, kind, learner):
    """Build a :class:`TransitionResult` from two sets of affine MSPE coefficients."""
    groups = tuple(tuple(g) for g in groups)
    sizes = np.array([len(g) for g in groups], dtype=float)
    sM = merged.group_slopes(groups)
    sE = ensemble.group_slopes(groups)
    den = sM - sE
    scale = np.abs(sM) + np.abs(sE)
    num = sigma_eps2 * (ensemble.noise_coef - merged.noise_coef) + ensemble.bias_sq - merged.bias_sq

    if kind == "point":
        q = sizes.sum()
        d = den.sum()
        st = _status(d, scale.sum())
        tau = float(q / p * num / d) if st == OK else None
        return TransitionResult(
            "point", learner, tau, tau, float(num), tuple(float(d) for d in den), tuple(int(m) for m in sizes),
            st, st, p=p,
        )

    ratio = den / sizes
    jmax, jmin = int(np.argmax(ratio)), int(np.argmin(ratio))
    st_lo = _status(den[jmax], scale[jmax])
    st_hi = _status(den[jmin], scale[jmin])
    lo = float(num / (p * ratio[jmax])) if st_lo == OK else None
    hi = float(num / (p * ratio[jmin])) if st_hi == OK else None
    return TransitionResult(
        "interval", learner, lo, hi, float(num), tuple(float(d) for d in den), tuple(int(m) for m in sizes),
        st_lo, st_hi, jmax, jmin, p,
    )


def _single_group(re_indices):
    cols = tuple(int(i) for i in re_indices)
    if not cols:
        raise InputError("at least one random-effect column is required")
    return cols, (tuple(range(len(cols))),)


def tau_ls(studies, re_indices, sigma_eps2, w, X0):
    """Transition point for least squares when all random effects share one variance."""
    studies = list(studies)
    p = check_collection(studies)
    cols, groups = _single_group(re_indices)
    merged = et.ls_merged_components(studies, cols, X0)
    ens = et.ls_ensemble_components(studies, cols, w, X0)
    return transition_from_components(merged, ens, groups, p, sigma_eps2, "point", "ls")


def tau_ls_interval(studies, re: RandomEffectsStructure, sigma_eps2, w, X0):
    """Transition interval for least squares with grouped, unequal variances."""
    studies = list(studies)
    p = check_collection(studies)
    merged = et.ls_merged_components(studies, re.re_columns, X0)
    ens = et.ls_ensemble_components(studies, re.re_columns, w, X0)
    return transition_from_components(merged, ens, re.groups, p, sigma_eps2, "interval", "ls")


def tau_ridge(studies, re_indices, sigma_eps2, beta, ridge_cfg, w, X0):
    """Transition point for ridge regression (equal variances).

    Depends on ``beta`` through the squared-bias gap ``||b_E||^2 - ||b_M||^2``.
    """
    studies = list(studies)
    p = check_collection(studies)
    cols, groups = _single_group(re_indices)
    merged = et.ridge_merged_components(studies, cols, beta, ridge_cfg, X0)
    ens = et.ridge_ensemble_components(studies, cols, beta, ridge_cfg, w, X0)
    return transition_from_components(merged, ens, groups, p, sigma_eps2, "point", "ridge")


def tau_ridge_interval(studies, re, sigma_eps2, beta, ridge_cfg, w, X0):
    studies = list(studies)
    p = check_collection(studies)
    merged = et.ridge_merged_components(studies, re.re_columns, beta, ridge_cfg, X0)
    ens = et.ridge_ensemble_components(studies, re.re_columns, beta, ridge_cfg, w, X0)
    return transition_from_components(merged, ens, re.groups, p, sigma_eps2, "interval", "ridge")


def tau_asymptotic(A1, A2, Aj_list, re, sigma_eps2, X0, Z0=None):
    """Limits of the least squares transition bounds as the number of studies grows.

    Parameters
    ----------
    A1, A2 : ndarray (p, p)
        Limits of the average of ``R_k`` and of ``R_k^-1``.
    Aj_list : list of ndarray (p, p)
        Per group ``j``, the limit of the average ``X_k^T Z_k Gamma_(j) Gamma_(j)^T Z_k^T X_k``.
    re : RandomEffectsStructure
        Supplies the columns and grouping.
    X0 : ndarray (n0, p)
        Test design; ``Z0`` defaults to its random-effect columns.

    Returns
    -------
    TransitionResult
        ``kind="interval"``; ``bounds`` gives ``(tau1_limit, tau2_limit)``.
    """
    A1 = np.atleast_2d(np.asarray(A1, float))
    A2 = np.atleast_2d(np.asarray(A2, float))
    X0 = np.asarray(X0, float)
    p = A1.shape[0]
    if len(Aj_list) != re.r:
        raise InputError(f"{len(Aj_list)} A_(j) matrices for {re.r} groups")
    Z0 = X0[:, list(re.re_columns)] if Z0 is None else np.asarray(Z0, float)
    R0 = X0.T @ X0
    A1_inv_R0 = np.linalg.solve(A1, R0)
    num = sigma_eps2 * (np.trace(A2 @ R0) - np.trace(A1_inv_R0))
    z0_diag = np.einsum("ij,ij->j", Z0, Z0)
    dens, scales = [], []
    A1_inv = np.linalg.inv(A1)
    for g, Aj in zip(re.groups, Aj_list):
        a = float(np.trace(A1_inv @ np.atleast_2d(Aj) @ A1_inv @ R0))
        b = float(z0_diag[list(g)].sum())
        dens.append(a - b)
        scales.append(abs(a) + abs(b))
    den = np.array(dens)
    sizes = np.array(re.group_sizes, float)
    ratio = den / sizes
    jmax, jmin = int(np.argmax(ratio)), int(np.argmin(ratio))
    st_lo, st_hi = _status(den[jmax], scales[jmax]), _status(den[jmin], scales[jmin])
    lo = float(num / (p * ratio[jmax])) if st_lo == OK else None
    hi = float(num / (p * ratio[jmin])) if st_hi == OK else None
    return TransitionResult(
        "interval", "ls-asymptotic", lo, hi, float(num), tuple(den), re.group_sizes,
        st_lo, st_hi, jmax, jmin, p,
    )


def extreme_allocation(result, re, sigma_bar2, bound="lower"):
    """Variance vector that puts all of ``p * sigma_bar2`` on the extreme group.

    The lower bound is attained when the whole variance budget sits in the
    group with the largest ``den_j / m_j``; the upper bound with the smallest.
    Used to check the dominance claims deterministically.
    """
    j = result.lower_group if bound == "lower" else result.upper_group
    if j is None:
        raise InputError("result carries no extreme group (point result?)")
    g = re.groups[j]
    v = np.zeros(re.q)
    v[list(g)] = result.p * sigma_bar2 / len(g)
    return v
