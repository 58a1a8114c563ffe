"""Semi-synthetic data: basis designs, planted interaction matrices, sampling, embeddings I/O."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import check_finite, svd

NOISE_FAMILIES = ("gaussian", "laplace")
THETA_VARIANTS = ("low_rank", "decay", "lq_ball")


class EmptyInputError(ValueError):
    pass


@dataclass
class FixedBasisDesign:
    """Treatment basis ``z_basis`` (p x d1) and covariate basis ``x_basis`` (q x d2).

    Columns are the basis vectors. ``gamma_star`` is the optional ground truth
    (d1 x d2) with ``|gamma_star| <= entry_bound`` entrywise.
    """

    z_basis: np.ndarray
    x_basis: np.ndarray
    entry_bound: float = 0.0
    gamma_star: np.ndarray | None = None
    theta_star: np.ndarray | None = None

    def __post_init__(self):
        self.z_basis = check_finite(np.asarray(self.z_basis, dtype=float), "z_basis")
        self.x_basis = check_finite(np.asarray(self.x_basis, dtype=float), "x_basis")
        if self.z_basis.ndim != 2 or self.x_basis.ndim != 2:
            raise ValueError("bases must be 2-d")
        if self.d1 < 1 or self.d2 < 1:
            raise ValueError("bases need at least one column")
        if self.gamma_star is not None:
            self.gamma_star = check_finite(np.asarray(self.gamma_star, dtype=float), "gamma_star")
            if self.gamma_star.shape != (self.d1, self.d2):
                raise ValueError(f"gamma_star must be {self.d1}x{self.d2}")
            if np.abs(self.gamma_star).max() > self.entry_bound + 1e-12:
                raise ValueError("gamma_star exceeds entry_bound")

    @property
    def p(self):
        return self.z_basis.shape[0]

    @property
    def q(self):
        return self.x_basis.shape[0]

    @property
    def d1(self):
        return self.z_basis.shape[1]

    @property
    def d2(self):
        return self.x_basis.shape[1]

    @property
    def treatments(self):
        """Treatment basis vectors as rows (d1 x p)."""
        return self.z_basis.T

    @property
    def users(self):
        """Covariate basis vectors as rows (d2 x q)."""
        return self.x_basis.T


@dataclass(frozen=True)
class ThetaSpec:
    """Recipe for a planted p x q interaction matrix.

    ``variant`` is ``low_rank`` (uses ``rank``), ``decay`` (singular values
    ``i ** -q_exponent``) or ``lq_ball`` (decay profile rescaled so that
    ``sum(s ** lq) == radius``).
    """

    variant: str
    dims: tuple
    rank: int = 2
    q_exponent: float = 1.0
    lq: float = 0.5
    radius: float = 1.0
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in THETA_VARIANTS:
            raise ValueError(f"unknown theta variant {self.variant!r}")
        p, q = self.dims
        if p < 1 or q < 1:
            raise ValueError("dims must be positive")
        if self.variant == "low_rank" and not 1 <= self.rank <= min(p, q):
            raise ValueError("low_rank requires 1 <= rank <= min(p, q)")
        if self.variant == "decay" and self.q_exponent < 0:
            raise ValueError("q_exponent must be nonnegative")
        if self.variant == "lq_ball":
            if not 0 <= self.lq < 1:
                raise ValueError("lq must lie in [0, 1)")
            if not self.radius > 0:
                raise ValueError("radius must be positive")
            if self.lq == 0 and self.radius < 1:
                raise ValueError("lq=0 counts nonzero singular values; radius must be >= 1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    family: str = "gaussian"
    sigma: float = 0.1

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def draw(self, rng, size):
        if self.sigma == 0:
            return np.zeros(size)
        if self.family == "gaussian":
            return rng.normal(0.0, self.sigma, size)
        # unit-variance parametrization: Laplace(b) has variance 2 b^2
        return rng.laplace(0.0, self.sigma / np.sqrt(2.0), size)


@dataclass
class SampleIndices:
    e_z: np.ndarray
    e_x: np.ndarray


@dataclass
class Dataset:
    z: np.ndarray
    x: np.ndarray
    y: np.ndarray
    indices: SampleIndices
    gamma_star: np.ndarray
    m_values: np.ndarray = field(default=None)


def gen_design(p, q, d1, d2, seed, center_users=False):
    """Gaussian bases with unit-norm columns.

    ``center_users=True`` then subtracts the mean covariate vector, so every
    row of ``Z^T theta X`` sums to zero and no arm is best on average.
    """
    if min(p, q, d1, d2) < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((p, d1))
    x = rng.standard_normal((q, d2))
    z /= np.linalg.norm(z, axis=0, keepdims=True)
    x /= np.linalg.norm(x, axis=0, keepdims=True)
    if center_users:
        x -= x.mean(axis=1, keepdims=True)
    return FixedBasisDesign(z, x)


def _random_orthonormal(rng, n, k):
    qm, r = np.linalg.qr(rng.standard_normal((n, k)))
    return qm * np.sign(np.diag(r))


def gen_theta(spec):
    """Planted p x q matrix; returns ``(theta, singular_values)``."""
    rng = np.random.default_rng(spec.seed)
    p, q = spec.dims
    k = min(p, q)
    if spec.variant == "low_rank":
        a = rng.standard_normal((p, spec.rank))
        b = rng.standard_normal((q, spec.rank))
        theta = spec.scale * (a @ b.T)
        return theta, svd(theta).singulars
    left = _random_orthonormal(rng, p, k)
    right = _random_orthonormal(rng, q, k)
    idx = np.arange(1, k + 1, dtype=float)
    if spec.variant == "decay":
        s = spec.scale * idx ** (-spec.q_exponent)
    else:
        profile = idx ** (-1.0)
        if spec.lq == 0:
            # sum s^0 counts nonzeros: keep floor(radius) leading directions
            keep = min(k, int(np.floor(spec.radius)))
            profile[keep:] = 0.0
            s = profile
        else:
            s = profile * (spec.radius / np.sum(profile**spec.lq)) ** (1.0 / spec.lq)
    theta = (left * s) @ right.T
    return theta, s


def lq_membership(singulars, lq, radius):
    """Whether singular values lie in the l_q ball ``sum s^q <= radius``."""
    if not 0 <= lq < 1:
        raise ValueError("lq must lie in [0, 1)")
    s = np.asarray(singulars, dtype=float)
    if np.any(s < 0):
        raise ValueError("singular values must be nonnegative")
    if lq == 0:
        total = float(np.count_nonzero(s))
    else:
        total = float(np.sum(s**lq))
    return total <= radius + 1e-12


def attach_truth(design, theta, entry_bound=1.0):
    """Set ``gamma_star = Z^T theta X``; rescale theta so max |gamma| equals ``entry_bound``.

    Pass ``entry_bound=None`` to keep theta's scale as given.
    """
    gamma = design.z_basis.T @ theta @ design.x_basis
    peak = np.abs(gamma).max()
    if entry_bound is not None:
        if peak == 0:
            raise ValueError("gamma_star is identically zero; cannot rescale")
        theta = theta * (entry_bound / peak)
        # recompute so gamma is bit-identical to what sample_dataset derives from theta
        gamma = design.z_basis.T @ theta @ design.x_basis
        bound = float(max(entry_bound, np.abs(gamma).max()))
    else:
        bound = float(peak)
    return FixedBasisDesign(design.z_basis, design.x_basis, bound, gamma, theta)


def sample_dataset(design, theta, n, noise, m_fn=None, seed=0):
    """Draw ``n`` observations ``y = m(x) + gamma[e_z, e_x] + eps`` with uniform indices."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gamma = design.z_basis.T @ theta @ design.x_basis
    rng = np.random.default_rng(seed)
    e_z = rng.integers(0, design.d1, n)
    e_x = rng.integers(0, design.d2, n)
    z = design.treatments[e_z]
    x = design.users[e_x]
    m_vals = np.zeros(n) if m_fn is None else np.asarray(m_fn(x), dtype=float).ravel()
    y = m_vals + gamma[e_z, e_x] + noise.draw(rng, n)
    return Dataset(z, x, y, SampleIndices(e_z, e_x), gamma, m_vals)


def load_embeddings(path, header=False):
    """Read a numeric CSV (one item per row) into a 2-d array."""
    rows = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: cannot parse number ({exc})") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ValueError(f"{path}:{lineno}: ragged row with {len(vals)} fields, expected {width}")
            if not all(np.isfinite(vals)):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise EmptyInputError(f"{path}: no data rows")
    return np.array(rows, dtype=float)


def write_matrix(path, m):
    """Write a matrix (or vector, as one column) as RFC-4180 CSV with round-trip floats."""
    a = np.asarray(m, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in a:
            writer.writerow([repr(float(v)) for v in row])


# Upworthy-style dimensions (50 headlines, 384-d embeddings, 500 simulated
# 200-d covariate vectors); embeddings here are synthetic Gaussian stand-ins.
PRESETS = {
    "upworthy": {"p": 384, "q": 200, "d1": 50, "d2": 500, "n": 500, "rank": 2, "sigma": 0.1,
                 "center_users": False},
    # same treatment side with a 50-user pool, dense enough to learn every rank up to 7
    "lowrank": {"p": 384, "q": 200, "d1": 50, "d2": 50, "n": 2000, "rank": 2, "sigma": 0.1,
                "center_users": False},
    "bandit": {"p": 6, "q": 6, "d1": 10, "d2": 10, "n": 20000, "rank": 2, "sigma": 0.1,
               "center_users": True},
}


def child_seeds(seed, k):
    """``k`` independent integer seeds derived from one root seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def planted_design(p, q, d1, d2, rank, seed, center_users=False, entry_bound=1.0):
    """Random bases plus a rank-``rank`` truth scaled to ``max |gamma| = entry_bound``."""
    s_design, s_theta = child_seeds(seed, 2)
    design = gen_design(p, q, d1, d2, s_design, center_users=center_users)
    theta, _ = gen_theta(ThetaSpec("low_rank", (p, q), rank=rank, seed=s_theta))
    return attach_truth(design, theta, entry_bound)
