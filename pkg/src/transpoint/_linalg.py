"""Guarded symmetric solves and trace helpers shared by every module."""

import warnings

import numpy as np
from scipy import linalg

from .exceptions import DegenerateError, SingularDesignError

COND_WARN = 1e12
COND_ERROR = 1e15


class IllConditionedWarning(RuntimeWarning):
    pass


def condition_number(A):
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= 0 or not np.isfinite(s[-1]):
        return np.inf
    return float(s[0] / s[-1])


def check_condition(A, what="matrix", error_cls=SingularDesignError):
    """Raise above ``COND_ERROR`` and warn above ``COND_WARN``; return cond(A)."""
    cond = condition_number(A)
    if cond > COND_ERROR:
        raise error_cls(
            f"{what} is singular or nearly so (condition number {cond:.3e} > {COND_ERROR:.0e})",
            condition_number=cond,
        )
    if cond > COND_WARN:
        warnings.warn(
            f"{what} is ill-conditioned (condition number {cond:.3e})",
            IllConditionedWarning,
            stacklevel=3,
        )
    return cond


class SPDSolver:
    """Cholesky factorization of a symmetric positive definite matrix.

    The condition guard runs once at construction so repeated solves against
    the same Gram matrix stay cheap.
    """

    def __init__(self, A, what="Gram matrix"):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"{what} must be square, got shape {A.shape}")
        A = 0.5 * (A + A.T)
        self.cond = check_condition(A, what)
        try:
            self._factor = linalg.cho_factor(A, lower=True, check_finite=True)
        except linalg.LinAlgError as exc:
            raise SingularDesignError(
                f"{what} is not positive definite (condition number {self.cond:.3e})",
                condition_number=self.cond,
            ) from exc
        self.n = A.shape[0]

    def solve(self, B):
        return linalg.cho_solve(self._factor, B, check_finite=False)


def solve_symmetric(A, b, what="linear system"):
    """Solve a symmetric, possibly indefinite system (LDL^T) behind the guard."""
    A = np.asarray(A, dtype=float)
    check_condition(A, what, error_cls=_degenerate)
    return linalg.solve(A, b, assume_a="sym")


def _degenerate(message, condition_number=None):
    exc = DegenerateError(message)
    exc.condition_number = condition_number
    return exc


def trace_product(A, B):
    """tr(A @ B) without forming the product."""
    return float(np.einsum("ij,ji->", A, B))
