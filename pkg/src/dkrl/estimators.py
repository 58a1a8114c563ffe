"""Double kernel representation learning and its convex counterpart.

The treatment effect is modelled as ``tau(z, x) = g(z)^T h(x)`` with
``g(z) = K_g(z, Z_train) U`` and ``h(x) = K_h(x, X_train) V``. The factors
minimize

    L(U, V) = 1/(2n) sum_k (y_k - (K_g U)[iz_k] . (K_h V)[ix_k])^2
              + lam * sum_l (U_l^T K_g U_l + V_l^T K_h V_l)

where ``iz``/``ix`` map each observation to its treatment/covariate point.
With the identity maps this is the textbook n x n formulation; collapsing
duplicate points into shared rows gives the same optimum with smaller systems,
which is what fixed-basis designs use.
"""

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import kernels
from .kernels import KernelSpec, as_points, gram, jitter, resolve
from .numerics import NumericFailure, SingularSystemError, check_finite, svd, svt


class StepSizeError(NumericFailure):
    """Proximal-gradient objective increased: the step size is too large."""


@dataclass(frozen=True)
class DkrlConfig:
    rank: int = 2
    lam: float = 1e-3
    max_iter: int = 500
    tol: float = 1e-6
    inner_sweeps: int = 1
    init_scale: float | None = None
    seed: int = 0
    jitter: float = kernels.DEFAULT_JITTER

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.inner_sweeps < 1:
            raise ValueError("inner_sweeps must be >= 1")
        if self.init_scale is not None and not self.init_scale > 0:
            raise ValueError("init_scale must be positive")


@dataclass(frozen=True)
class OutcomeConfig:
    mode: str = "none"
    spec: KernelSpec = field(default_factory=KernelSpec)
    lam_m: float = 1e-3
    folds: int = 1

    def __post_init__(self):
        if self.mode not in ("none", "kernel_ridge"):
            raise ValueError(f"unknown outcome mode {self.mode!r}")
        if self.folds < 1:
            raise ValueError("folds must be >= 1")
        if self.mode == "kernel_ridge" and not self.lam_m > 0:
            raise ValueError("kernel_ridge outcome model needs lam_m > 0")


@dataclass(frozen=True)
class NuclearConfig:
    lam: float = 1e-2
    max_iter: int = 20000
    tol: float = 1e-12
    step: float | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass
class DkrlProblem:
    """Data of one factorized fit: Grams over distinct points plus observation maps."""

    kg: np.ndarray
    kh: np.ndarray
    iz: np.ndarray
    ix: np.ndarray
    y: np.ndarray
    lam: float

    @property
    def n(self):
        return self.y.shape[0]

    def predictions(self, u, v):
        return np.sum((self.kg @ u)[self.iz] * (self.kh @ v)[self.ix], axis=1)

    def objective(self, u, v):
        resid = self.y - self.predictions(u, v)
        penalty = np.sum(u * (self.kg @ u)) + np.sum(v * (self.kh @ v))
        return float(resid @ resid / (2 * self.n) + self.lam * penalty)

    def swapped(self):
        return DkrlProblem(self.kh, self.kg, self.ix, self.iz, self.y, self.lam)


@dataclass
class DkrlModel:
    u: np.ndarray
    v: np.ndarray
    gram_g: kernels.GramMatrix
    gram_h: kernels.GramMatrix
    train_z: np.ndarray
    train_x: np.ndarray
    spec_g: KernelSpec
    spec_h: KernelSpec
    lam: float
    loss_trace: np.ndarray
    iterations_run: int
    offset: float = 0.0
    jitter: float = kernels.DEFAULT_JITTER
    # training observations, kept for diagnostics; not serialized
    iz: np.ndarray | None = None
    ix: np.ndarray | None = None
    train_y: np.ndarray | None = None

    @property
    def rank(self):
        return self.u.shape[1]

    def problem(self):
        if self.train_y is None:
            raise ValueError("model carries no training observations")
        return DkrlProblem(self.gram_g.values, self.gram_h.values, self.iz, self.ix, self.train_y, self.lam)


# ---------------------------------------------------------------------------
# residualization


def _folds(n, k):
    return np.array_split(np.arange(n), k)


def residualize(x, y, cfg):
    """Subtract a kernel-ridge outcome model ``m(x) = E[y | x]`` from ``y``.

    With ``cfg.folds > 1`` each fold's residual uses a model fit on the other
    folds (cross-fitting). The returned model is fit on all the data.
    """
    yv = check_finite(np.asarray(y, dtype=float).ravel(), "y")
    if cfg.mode == "none":
        return yv.copy(), None
    pts = as_points(x, "x")
    n = yv.shape[0]
    if cfg.folds > n:
        raise ValueError(f"folds={cfg.folds} exceeds sample size {n}")
    full = kernels.krr_fit(pts, yv, cfg.spec, cfg.lam_m)
    if cfg.folds == 1:
        return yv - kernels.krr_predict(full, pts), full
    resid = np.empty(n)
    for held in _folds(n, cfg.folds):
        keep = np.setdiff1d(np.arange(n), held)
        m_hat = kernels.krr_fit(pts[keep], yv[keep], cfg.spec, cfg.lam_m)
        resid[held] = yv[held] - kernels.krr_predict(m_hat, pts[held])
    return resid, full


# ---------------------------------------------------------------------------
# alternating minimization


def _sweep_columns(prob, w, other, sweeps):
    """Exact block-coordinate updates of the columns of ``w`` with ``other`` fixed."""
    k, idx = prob.kg, prob.iz
    m, r = w.shape
    n = prob.n
    w = w.copy()
    a = k @ w
    s_all = (prob.kh @ other)[prob.ix]
    pred = np.sum(a[idx] * s_all, axis=1)
    shift = 2.0 * n * prob.lam
    eye = np.eye(m)
    for _ in range(sweeps):
        for col in range(r):
            s = s_all[:, col]
            partial = prob.y - pred + a[idx, col] * s
            weights = np.bincount(idx, weights=s * s, minlength=m)
            rhs = np.bincount(idx, weights=s * partial, minlength=m)
            if not np.any(weights) and shift > 0:
                new = np.zeros(m)
            else:
                # stationarity: K [(W K u - rhs) / n + 2 lam u] = 0
                system = weights[:, None] * k + shift * eye
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                        new = scipy.linalg.solve(system, rhs, check_finite=False)
                except np.linalg.LinAlgError as exc:
                    raise SingularSystemError(f"column {col} system is singular: {exc}") from exc
                if not np.all(np.isfinite(new)):
                    raise SingularSystemError(f"column {col} solve produced non-finite values")
            new_a = k @ new
            pred += (new_a[idx] - a[idx, col]) * s
            w[:, col] = new
            a[:, col] = new_a
    return w


def u_step(prob, u, v, sweeps=1):
    """Update U with V fixed; each column update is an exact minimization."""
    return _sweep_columns(prob, u, v, sweeps)


def v_step(prob, u, v, sweeps=1):
    """Update V with U fixed."""
    return _sweep_columns(prob.swapped(), v, u, sweeps)


def _rel_change(old, new, tol):
    return np.linalg.norm(old - new) <= tol * np.linalg.norm(old)


def solve_factorized(prob, cfg, u0=None, v0=None):
    """Run the alternating solver; returns ``(U, V, loss_trace, iterations)``."""
    m1, m2 = prob.kg.shape[0], prob.kh.shape[0]
    rng = np.random.default_rng(cfg.seed)
    if u0 is None:
        scale_u = cfg.init_scale if cfg.init_scale is not None else 1.0 / np.sqrt(m1)
        u0 = rng.normal(0.0, scale_u, (m1, cfg.rank))
    if v0 is None:
        scale_v = cfg.init_scale if cfg.init_scale is not None else 1.0 / np.sqrt(m2)
        v0 = rng.normal(0.0, scale_v, (m2, cfg.rank))
    u, v = np.array(u0, dtype=float), np.array(v0, dtype=float)
    trace = [prob.objective(u, v)]
    if np.ptp(prob.y) == 0:
        # zero-variance outcomes carry no interaction signal
        u, v = np.zeros_like(u), np.zeros_like(v)
        trace.append(prob.objective(u, v))
        return u, v, np.array(trace), 1
    iters = 0
    for iters in range(1, cfg.max_iter + 1):
        u_new = u_step(prob, u, v, cfg.inner_sweeps)
        v_new = v_step(prob, u_new, v, cfg.inner_sweeps)
        loss = prob.objective(u_new, v_new)
        if not np.isfinite(loss):
            raise NumericFailure(f"objective became non-finite at iteration {iters}")
        trace.append(loss)
        done = _rel_change(u, u_new, cfg.tol) and _rel_change(v, v_new, cfg.tol)
        u, v = u_new, v_new
        if done:
            break
    return u, v, np.array(trace), iters


def _unique_rows(pts):
    uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
    return uniq, inverse.ravel()


def dkrl_fit(z, x, y, cfg, spec_g=None, spec_h=None, collapse=False, center=False):
    """Fit the double-kernel model on observations ``(z_i, x_i, y_i)``.

    ``y`` should already be residualized. With ``collapse=True`` duplicate
    treatment/covariate points share one coefficient row, which leaves the
    fitted function unchanged but shrinks every linear system to the number
    of distinct points. ``center=True`` stores an offset that makes the
    training predictions average to zero.
    """
    zp, xp = as_points(z, "z"), as_points(x, "x")
    yv = check_finite(np.asarray(y, dtype=float).ravel(), "y")
    n = yv.shape[0]
    if zp.shape[0] != n or xp.shape[0] != n:
        raise ValueError("z, x and y must have the same number of samples")
    spec_g = spec_g or KernelSpec()
    spec_h = spec_h or KernelSpec()
    if collapse:
        train_z, iz = _unique_rows(zp)
        train_x, ix = _unique_rows(xp)
    else:
        train_z, iz = zp, np.arange(n)
        train_x, ix = xp, np.arange(n)
    return _fit_on_points(train_z, train_x, iz, ix, yv, cfg, spec_g, spec_h, center)


def dkrl_fit_design(design, e_z, e_x, y, cfg, spec_g=None, spec_h=None, center=False):
    """Fit on fixed-basis observations given as basis indices."""
    yv = check_finite(np.asarray(y, dtype=float).ravel(), "y")
    return _fit_on_points(
        design.treatments, design.users, np.asarray(e_z), np.asarray(e_x), yv, cfg,
        spec_g or KernelSpec(), spec_h or KernelSpec(), center,
    )


def _fit_on_points(train_z, train_x, iz, ix, y, cfg, spec_g, spec_h, center):
    spec_g = resolve(spec_g, train_z)
    spec_h = resolve(spec_h, train_x)
    gg = jitter(gram(spec_g, train_z), cfg.jitter)
    gh = jitter(gram(spec_h, train_x), cfg.jitter)
    prob = DkrlProblem(gg.values, gh.values, iz, ix, y, cfg.lam)
    u, v, trace, iters = solve_factorized(prob, cfg)
    offset = float(np.mean(prob.predictions(u, v))) if center else 0.0
    return DkrlModel(u, v, gg, gh, train_z, train_x, spec_g, spec_h, float(cfg.lam), trace, iters,
                     offset, cfg.jitter, iz, ix, y)


def dkrl_predict(model, z, x):
    """``tau(z_i, x_i) = K_g(z_i, Z) U V^T K_h(x_i, X)^T`` for paired queries."""
    zq, xq = as_points(z, "z"), as_points(x, "x")
    if zq.shape[0] != xq.shape[0]:
        raise ValueError("z and x queries must pair up")
    g = gram(model.spec_g, zq, model.train_z).values @ model.u
    h = gram(model.spec_h, xq, model.train_x).values @ model.v
    return np.sum(g * h, axis=1) - model.offset


def representations(model, z=None, x=None):
    """Learned r-dimensional features ``g(z)`` and ``h(x)`` (training points by default)."""
    zq = model.train_z if z is None else as_points(z, "z")
    xq = model.train_x if x is None else as_points(x, "x")
    g = gram(model.spec_g, zq, model.train_z).values @ model.u
    h = gram(model.spec_h, xq, model.train_x).values @ model.v
    return g, h


def trim_rank(model, rel=1e-3):
    """Drop factor columns whose contribution falls below ``rel`` of the largest."""
    contrib = np.linalg.norm(model.gram_g.values @ model.u, axis=0) * np.linalg.norm(
        model.gram_h.values @ model.v, axis=0
    )
    if contrib.max(initial=0.0) == 0:
        keep = np.array([0])
    else:
        keep = np.flatnonzero(contrib >= rel * contrib.max())
    return DkrlModel(model.u[:, keep], model.v[:, keep], model.gram_g, model.gram_h, model.train_z,
                     model.train_x, model.spec_g, model.spec_h, model.lam, model.loss_trace,
                     model.iterations_run, model.offset, model.jitter, model.iz, model.ix, model.train_y)


# ---------------------------------------------------------------------------
# fixed-basis extraction


def extract_gamma(model, design):
    """Estimated d1 x d2 response matrix over every (treatment, user) basis pair."""
    g, h = representations(model, design.treatments, design.users)
    return g @ h.T - model.offset


class DegenerateBasisError(ValueError):
    pass


def _spd_solve(m, rhs, name):
    try:
        factor = scipy.linalg.cho_factor(m, lower=True)
    except np.linalg.LinAlgError:
        raise DegenerateBasisError(f"{name} is singular; the basis does not span its space") from None
    return scipy.linalg.cho_solve(factor, rhs)


def extract_theta(gamma_hat, design):
    """Feature-level interaction ``(Z Z^T)^-1 Z Gamma X^T (X X^T)^-1``."""
    z, x = design.z_basis, design.x_basis
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    if gamma_hat.shape != (design.d1, design.d2):
        raise ValueError(f"gamma_hat must be {design.d1}x{design.d2}")
    left = _spd_solve(z @ z.T, z @ gamma_hat, "Z Z^T")
    return _spd_solve(x @ x.T, x @ left.T, "X X^T").T


# ---------------------------------------------------------------------------
# nuclear-norm program


def _cells_arrays(cells, dims):
    if isinstance(cells, tuple) and len(cells) == 3:
        rows, cols, y = (np.asarray(c) for c in cells)
    else:
        arr = list(cells)
        rows = np.array([c[0] for c in arr], dtype=int)
        cols = np.array([c[1] for c in arr], dtype=int)
        y = np.array([c[2] for c in arr], dtype=float)
    rows, cols, y = rows.astype(int), cols.astype(int), y.astype(float)
    d1, d2 = dims
    if rows.size == 0:
        raise ValueError("no observed cells")
    if rows.min() < 0 or rows.max() >= d1 or cols.min() < 0 or cols.max() >= d2:
        raise ValueError("cell index out of range")
    return rows, cols, check_finite(y, "y")


def _cell_stats(rows, cols, y, dims):
    d1, d2 = dims
    flat = rows * d2 + cols
    counts = np.bincount(flat, minlength=d1 * d2).reshape(d1, d2).astype(float)
    sums = np.bincount(flat, weights=y, minlength=d1 * d2).reshape(d1, d2)
    return counts, sums


def nuclear_objective(gamma, cells, dims, lam):
    rows, cols, y = _cells_arrays(cells, dims)
    resid = y - gamma[rows, cols]
    return float(resid @ resid / (2 * y.size) + lam * svd(gamma).singulars.sum())


def nuclear_lambda_max(cells, dims):
    """Smallest penalty at which the nuclear program's solution is zero."""
    rows, cols, y = _cells_arrays(cells, dims)
    _, sums = _cell_stats(rows, cols, y, dims)
    return float(svd(sums / y.size).singulars[0])


def nuclear_fit(cells, dims, cfg, trace=None):
    """Minimize ``1/(2n) sum (y_i - Gamma[r_i, c_i])^2 + lam ||Gamma||_*`` by proximal gradient.

    ``cells`` is either an iterable of ``(row, col, y)`` or a tuple of three
    arrays. Pass a list as ``trace`` to collect objective values.
    """
    rows, cols, y = _cells_arrays(cells, dims)
    n = y.size
    counts, sums = _cell_stats(rows, cols, y, dims)
    if cfg.lam > 0 and cfg.lam >= svd(sums / n).singulars[0]:
        # zero is optimal: its subgradient condition holds exactly
        if trace is not None:
            trace.append(float(y @ y / (2 * n)))
        return np.zeros(dims)
    step = cfg.step if cfg.step is not None else n / counts.max()
    sq = float(y @ y)

    def objective(g):
        # sum (y - g)^2 expanded per cell
        fit = sq - 2.0 * np.sum(sums * g) + np.sum(counts * g * g)
        return fit / (2 * n) + cfg.lam * svd(g).singulars.sum()

    gamma = np.zeros(dims)
    obj = objective(gamma)
    slack = 1e-9 * (1.0 + abs(obj))
    if trace is not None:
        trace.append(obj)
    for it in range(cfg.max_iter):
        grad = (counts * gamma - sums) / n
        new = svt(gamma - step * grad, step * cfg.lam)
        new_obj = objective(new)
        if new_obj > obj + slack:
            raise StepSizeError(f"objective increased at iteration {it + 1}; step {step} is too large")
        if trace is not None:
            trace.append(new_obj)
        change = abs(obj - new_obj)
        gamma, obj = new, new_obj
        if change <= cfg.tol * max(abs(obj), 1e-300):
            break
    return gamma


# ---------------------------------------------------------------------------
# kernelized PMF view


def pmf_reparam(model):
    """Intrinsic representations ``R = K_g U`` and ``S = K_h V``."""
    return model.gram_g.values @ model.u, model.gram_h.values @ model.v


def pmf_objective(r, s, model):
    """Objective written in ``(R, S)``; penalties use ``K^-1`` via Cholesky solves."""
    prob = model.problem()
    pred = np.sum(r[prob.iz] * s[prob.ix], axis=1)
    resid = prob.y - pred
    pen_r = np.sum(r * _spd_solve(prob.kg, r, "K_g"))
    pen_s = np.sum(s * _spd_solve(prob.kh, s, "K_h"))
    return float(resid @ resid / (2 * prob.n) + prob.lam * (pen_r + pen_s))


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CvResult:
    lam: float
    rank: int
    table: dict


def cross_validate(z, x, y, lambda_grid, rank_grid, folds=5, seed=0, spec_g=None, spec_h=None,
                   base_cfg=None, collapse=True):
    """Grid search over ``(lam, rank)`` by k-fold held-out MSE.

    Ties in mean MSE go to the larger ``lam``, then the smaller rank.
    ``table`` maps ``(lam, rank)`` to the list of per-fold MSEs.
    """
    lambda_grid, rank_grid = list(lambda_grid), list(rank_grid)
    if not lambda_grid or not rank_grid:
        raise ValueError("lambda_grid and rank_grid must be non-empty")
    if folds < 2:
        raise ValueError("cross-validation needs folds >= 2")
    zp, xp = as_points(z, "z"), as_points(x, "x")
    yv = np.asarray(y, dtype=float).ravel()
    n = yv.shape[0]
    if folds > n:
        raise ValueError(f"folds={folds} exceeds sample size {n}")
    base = base_cfg or DkrlConfig()
    spec_g = resolve(spec_g or KernelSpec(), zp)
    spec_h = resolve(spec_h or KernelSpec(), xp)
    perm = np.random.default_rng(seed).permutation(n)
    splits = np.array_split(perm, folds)
    table = {}
    for lam in lambda_grid:
        for rank in rank_grid:
            cfg = DkrlConfig(rank=rank, lam=lam, max_iter=base.max_iter, tol=base.tol,
                             inner_sweeps=base.inner_sweeps, init_scale=base.init_scale,
                             seed=base.seed, jitter=base.jitter)
            errs = []
            for held in splits:
                keep = np.setdiff1d(perm, held)
                model = dkrl_fit(zp[keep], xp[keep], yv[keep], cfg, spec_g, spec_h, collapse=collapse)
                pred = dkrl_predict(model, zp[held], xp[held])
                errs.append(float(np.mean((yv[held] - pred) ** 2)))
            table[(lam, rank)] = errs
    best = min(table, key=lambda key: (np.mean(table[key]), -key[0], key[1]))
    return CvResult(best[0], best[1], table)


# ---------------------------------------------------------------------------
# serialization


def matrix_to_json(m):
    a = np.asarray(m, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "data": [float(v) for v in a.ravel()]}


def matrix_from_json(d):
    data = np.asarray(d["data"], dtype=float)
    if data.size != d["rows"] * d["cols"]:
        raise ValueError("matrix data length does not match its dims")
    return data.reshape(d["rows"], d["cols"])


def model_to_dict(model):
    return {
        "kind": "dkrl",
        "spec_g": model.spec_g.to_dict(),
        "spec_h": model.spec_h.to_dict(),
        "lambda": model.lam,
        "rank": model.rank,
        "jitter": model.jitter,
        "offset": model.offset,
        "iterations_run": model.iterations_run,
        "train_z": matrix_to_json(model.train_z),
        "train_x": matrix_to_json(model.train_x),
        "u": matrix_to_json(model.u),
        "v": matrix_to_json(model.v),
        "loss_trace": [float(v) for v in model.loss_trace],
    }


def model_from_dict(d):
    if d.get("kind", "dkrl") != "dkrl":
        raise ValueError(f"not a dkrl model document (kind={d.get('kind')!r})")
    spec_g = KernelSpec.from_dict(d["spec_g"])
    spec_h = KernelSpec.from_dict(d["spec_h"])
    train_z = matrix_from_json(d["train_z"])
    train_x = matrix_from_json(d["train_x"])
    delta = d.get("jitter", kernels.DEFAULT_JITTER)
    return DkrlModel(
        matrix_from_json(d["u"]), matrix_from_json(d["v"]),
        jitter(gram(spec_g, train_z), delta), jitter(gram(spec_h, train_x), delta),
        train_z, train_x, spec_g, spec_h, float(d["lambda"]), np.asarray(d["loss_trace"], dtype=float),
        int(d.get("iterations_run", len(d["loss_trace"]) - 1)), float(d.get("offset", 0.0)), delta,
    )


def save_model(model, path):
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
