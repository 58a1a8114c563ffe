"""Kernel specifications, Gram matrices, Nystrom factors and kernel ridge regression.

Conventions
-----------
- gaussian: ``k(a, b) = exp(-||a - b||^2 / (2 * lengthscale^2))``
- linear:   ``k(a, b) = a^T b``
- kernel ridge regression minimizes ``(1/2n) sum (y_i - f(z_i))^2 + (lam/2) ||f||^2``,
  i.e. the weights solve ``(K + n * lam * I) alpha = y``.
"""

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg
from scipy.spatial.distance import pdist

from .numerics import NumericFailure, SingularSystemError, check_finite

FAMILIES = ("gaussian", "linear")
DEFAULT_JITTER = 1e-8


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus its lengthscale.

    A gaussian spec with ``lengthscale=None`` is resolved by the median
    heuristic against the training points (see :func:`resolve`).
    """

    family: str = "gaussian"
    lengthscale: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if self.lengthscale is not None and not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")

    def to_dict(self):
        return {"family": self.family, "lengthscale": self.lengthscale}

    @classmethod
    def from_dict(cls, d):
        return cls(family=d.get("family", "gaussian"), lengthscale=d.get("lengthscale"))


@dataclass(frozen=True)
class GramMatrix:
    values: np.ndarray
    spec: KernelSpec
    symmetric: bool


@dataclass(frozen=True)
class KrrModel:
    points: np.ndarray
    weights: np.ndarray
    spec: KernelSpec
    lam: float


def as_points(a, name="points"):
    pts = np.asarray(a, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array of row vectors")
    return check_finite(pts, name)


def median_lengthscale(points):
    """Median pairwise Euclidean distance; 1.0 if every point coincides."""
    pts = as_points(points)
    if pts.shape[0] < 2:
        return 1.0
    d = pdist(pts)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def resolve(spec, points):
    """Fill in a missing gaussian lengthscale from ``points``."""
    if spec.family == "gaussian" and spec.lengthscale is None:
        return replace(spec, lengthscale=median_lengthscale(points))
    return spec


def sq_distances(a, b, same=False):
    """Pairwise squared distances through one matrix product (BLAS), clipped at zero."""
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    if same:
        np.fill_diagonal(sq, 0.0)
    return sq


def _kernel_values(spec, a, b):
    if spec.family == "linear":
        return a @ b.T
    if spec.lengthscale is None:
        raise ValueError("gaussian kernel needs a lengthscale; call resolve() first")
    sq = sq_distances(a, b, same=a is b)
    return np.exp(-sq / (2.0 * spec.lengthscale**2))


def gram(spec, a, b=None):
    """Kernel matrix between the rows of ``a`` and ``b`` (``b = a`` when omitted)."""
    pa = as_points(a, "a")
    symmetric = b is None
    pb = pa if symmetric else as_points(b, "b")
    if pa.shape[1] != pb.shape[1]:
        raise ValueError(f"dimension mismatch: {pa.shape[1]} vs {pb.shape[1]}")
    values = _kernel_values(spec, pa, pb)
    if symmetric:
        values = 0.5 * (values + values.T)
    return GramMatrix(values, spec, symmetric)


def jitter(g, delta_scale=DEFAULT_JITTER):
    """Add ``delta_scale * trace / n`` to the diagonal of a symmetric Gram."""
    v = g.values if isinstance(g, GramMatrix) else np.asarray(g, dtype=float)
    if v.ndim != 2 or v.shape[0] != v.shape[1] or not np.allclose(v, v.T, atol=1e-12):
        raise ValueError("jitter requires a symmetric square Gram matrix")
    n = v.shape[0]
    shift = delta_scale * np.trace(v) / n if n else 0.0
    out = v + shift * np.eye(n)
    if isinstance(g, GramMatrix):
        return GramMatrix(out, g.spec, g.symmetric)
    return out


def nystrom(spec, points, m_landmarks, seed=None, delta_scale=DEFAULT_JITTER):
    """Low-rank factor ``F`` (n x m) with ``F @ F.T`` approximating the Gram of ``points``.

    Landmarks are the first ``m_landmarks`` entries of a seeded permutation, so
    growing ``m_landmarks`` under a fixed seed nests the landmark sets.
    """
    pts = as_points(points)
    n = pts.shape[0]
    if not 1 <= m_landmarks <= n:
        raise ValueError(f"m_landmarks must be in [1, {n}]")
    spec = resolve(spec, pts)
    order = np.random.default_rng(seed).permutation(n)
    idx = np.sort(order[:m_landmarks])
    land = pts[idx]
    k_mm = jitter(gram(spec, land).values, delta_scale)
    k_nm = gram(spec, pts, land).values
    try:
        chol = np.linalg.cholesky(k_mm)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"landmark Gram is singular after jitter: {exc}") from exc
    # F = K_nm L^{-T}, so F F^T = K_nm K_mm^{-1} K_mn
    return scipy.linalg.solve_triangular(chol, k_nm.T, lower=True).T


def krr_fit(x, y, spec, lam):
    """Kernel ridge regression, ``(K + n * lam * I) alpha = y``."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    pts = as_points(x, "x")
    yv = check_finite(np.asarray(y, dtype=float).ravel(), "y")
    n = pts.shape[0]
    if yv.shape[0] != n:
        raise ValueError(f"y length {yv.shape[0]} != number of points {n}")
    spec = resolve(spec, pts)
    k = gram(spec, pts).values
    weights = solve_shifted(k, n * lam, yv)
    return KrrModel(pts, weights, spec, float(lam))


def solve_shifted(k, shift, rhs):
    """Solve ``(K + shift * I) w = rhs`` for symmetric PSD ``K``."""
    a = k + shift * np.eye(k.shape[0])
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
        w = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"kernel system is singular: {exc}") from exc
    if not np.all(np.isfinite(w)):
        raise NumericFailure("kernel ridge solve produced non-finite weights")
    return w


def krr_predict(model, query):
    q = as_points(query, "query")
    if q.shape[1] != model.points.shape[1]:
        raise ValueError(f"query dimension {q.shape[1]} != training dimension {model.points.shape[1]}")
    return gram(model.spec, q, model.points).values @ model.weights
