"""Dense linear algebra shared by the estimators.

Matrices are plain ``float64`` numpy arrays. Every routine rejects non-finite
input so NaN/Inf never propagate silently into a fit.
"""

from typing import NamedTuple

import numpy as np
import scipy.linalg


class NumericFailure(RuntimeError):
    """A factorization or iterative routine failed to produce a finite answer."""


class SingularSystemError(NumericFailure):
    """A linear system that must be solved is singular or not positive definite."""


class SvdResult(NamedTuple):
    left: np.ndarray
    singulars: np.ndarray
    right_t: np.ndarray


def as_matrix(m, name="matrix"):
    a = np.asarray(m, dtype=float)
    if a.ndim == 1:
        a = a.reshape(1, -1) if a.size else a.reshape(0, 0)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {a.shape}")
    check_finite(a, name)
    return a


def check_finite(a, name="array"):
    if not np.all(np.isfinite(a)):
        raise NumericFailure(f"{name} contains non-finite entries")
    return a


def svd(m):
    """Thin singular value decomposition.

    Returns ``SvdResult(left, singulars, right_t)`` with ``k = min(rows, cols)``
    singular values sorted in descending order.
    """
    a = as_matrix(m)
    try:
        left, s, right_t = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"SVD did not converge: {exc}") from exc
    return SvdResult(left, s, right_t)


def ridge_solve(design, response, lam, penalty=None):
    """Solve ``(A^T A + lam * P) w = A^T y`` by Cholesky.

    Parameters
    ----------
    design : (n, d) array
    response : (n,) array
    lam : float
        Nonnegative penalty level.
    penalty : (d, d) array, optional
        Symmetric PSD penalty matrix; identity when omitted.

    Raises
    ------
    SingularSystemError
        If the normal-equation matrix is not positive definite, e.g. ``lam = 0``
        with a rank-deficient design.
    """
    a = as_matrix(design, "design")
    y = check_finite(np.asarray(response, dtype=float).ravel(), "response")
    if y.shape[0] != a.shape[0]:
        raise ValueError(f"response length {y.shape[0]} != design rows {a.shape[0]}")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    d = a.shape[1]
    p = np.eye(d) if penalty is None else as_matrix(penalty, "penalty")
    if p.shape != (d, d):
        raise ValueError(f"penalty must be {d}x{d}, got {p.shape}")
    if not np.allclose(p, p.T, atol=1e-12 * (1.0 + np.abs(p).max(initial=0.0))):
        raise ValueError("penalty must be symmetric")
    gram = a.T @ a + lam * p
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"ridge system is singular: {exc}") from exc
    w = scipy.linalg.cho_solve(factor, a.T @ y, check_finite=False)
    return check_finite(w, "ridge solution")


def nuclear_norm(m):
    return float(svd(m).singulars.sum())


def svt(m, tau):
    """Singular value soft-thresholding, the prox of ``tau * ||.||_*``."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    left, s, right_t = svd(m)
    shrunk = np.maximum(s - tau, 0.0)
    return (left * shrunk) @ right_t


def numerical_rank(m, rel_tol=1e-8):
    s = svd(m).singulars
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))
