"""Seeded experiment pipelines shared by the command line and the acceptance suite.

Each pipeline fans seeds out over worker processes (capped by ``DKRL_WORKERS``)
and reduces results sorted by seed, so output never depends on scheduling.
"""

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .bandit import EtcConfig, etc_run, etc_treatment_only, regret_slope
from .baselines import baseline_fit, baseline_predict
from .estimators import DkrlConfig, dkrl_fit, dkrl_predict
from .kernels import KernelSpec
from .simdata import PRESETS, NoiseSpec, child_seeds, planted_design, sample_dataset

WORKERS_ENV = "DKRL_WORKERS"
BAND_QUANTILES = (0.15, 0.5, 0.85)


class SeedFailure(RuntimeError):
    """A replicate failed; keeps the seed and the original exception."""

    def __init__(self, seed, cause):
        super().__init__(f"seed {seed}: {type(cause).__name__}: {cause}")
        self.seed = seed
        self.cause = cause

    def __reduce__(self):
        return (SeedFailure, (self.seed, self.cause))


def worker_count(n_jobs):
    """Workers to use: ``DKRL_WORKERS`` (default 1), never more than the job count."""
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1")
    return max(1, min(cap, n_jobs))


def fan_out(fn, jobs):
    """``[fn(j) for j in jobs]``, possibly in parallel; order follows ``jobs``."""
    jobs = list(jobs)
    workers = worker_count(len(jobs))
    if workers == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def split_indices(n, train_fraction, seed):
    """Seeded permutation split; both parts are non-empty."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    if n < 2:
        raise ValueError("need at least two samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def mse(a, b):
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


# ---------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class BenchConfig:
    preset: str = "lowrank"
    ranks: tuple = (2, 3, 5, 7)
    seeds: tuple = tuple(range(50))
    train_fraction: float = 0.8
    dkrl_lam: float = 3e-5
    prod_lam: float = 1e-5
    max_iter: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}")
        if not self.ranks or any(int(r) < 1 for r in self.ranks):
            raise ValueError("ranks must be a non-empty list of positive integers")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")


def bench_one(args):
    """One (rank, seed) cell: planted data, DKRL and product-kernel fits."""
    cfg, rank, seed = args
    pre = PRESETS[cfg.preset]
    s_design, s_sample, s_split = child_seeds(seed, 3)
    design = planted_design(pre["p"], pre["q"], pre["d1"], pre["d2"], rank, s_design,
                            center_users=pre["center_users"])
    data = sample_dataset(design, design.theta_star, pre["n"], NoiseSpec("gaussian", pre["sigma"]),
                          seed=s_sample)
    tr, te = split_indices(pre["n"], cfg.train_fraction, s_split)
    rows = []

    t0 = time.perf_counter()
    dcfg = DkrlConfig(rank=rank, lam=cfg.dkrl_lam, max_iter=cfg.max_iter, tol=cfg.tol, seed=seed)
    model = dkrl_fit(data.z[tr], data.x[tr], data.y[tr], dcfg, collapse=True)
    train_p = dkrl_predict(model, data.z[tr], data.x[tr])
    test_p = dkrl_predict(model, data.z[te], data.x[te])
    rows.append(("DKRL", mse(train_p, data.y[tr]), mse(test_p, data.y[te]), time.perf_counter() - t0))

    t0 = time.perf_counter()
    base = baseline_fit(data.z[tr], data.x[tr], data.y[tr], "prod_kernel", KernelSpec(), KernelSpec(),
                        cfg.prod_lam)
    train_p = baseline_predict(base, data.z[tr], data.x[tr])
    test_p = baseline_predict(base, data.z[te], data.x[te])
    rows.append(("ProdKernel", mse(train_p, data.y[tr]), mse(test_p, data.y[te]), time.perf_counter() - t0))
    return [(rank, seed, method, tr_mse, te_mse, secs) for method, tr_mse, te_mse, secs in rows]


def run_bench(cfg):
    """Per-seed rows ``(rank, seed, method, train_mse, test_mse, seconds)`` sorted by rank, seed."""
    jobs = [(cfg, int(r), int(s)) for r in cfg.ranks for s in sorted(cfg.seeds)]
    out = [row for rows in fan_out(bench_one, jobs) for row in rows]
    return sorted(out, key=lambda row: (row[0], row[1], row[2]))


def bench_table(per_seed):
    """Mean and population std per (rank, method); DKRL listed before ProdKernel."""
    table = []
    order = {"DKRL": 0, "ProdKernel": 1}
    keys = sorted({(r[0], r[2]) for r in per_seed}, key=lambda k: (k[0], order.get(k[1], 2), k[1]))
    for rank, method in keys:
        vals = np.array([r[3:] for r in per_seed if r[0] == rank and r[2] == method], dtype=float)
        mean, std = vals.mean(axis=0), vals.std(axis=0)
        table.append({
            "rank": rank, "method": method,
            "train_mean": mean[0], "train_std": std[0],
            "test_mean": mean[1], "test_std": std[1],
            "time_mean": mean[2], "time_std": std[2],
        })
    return table


# ---------------------------------------------------------------- bandit


def bandit_design(preset, seed):
    pre = PRESETS[preset]
    return planted_design(pre["p"], pre["q"], pre["d1"], pre["d2"], pre["rank"], seed,
                          center_users=pre["center_users"])


@dataclass
class BanditReplicate:
    seed: int
    full: object
    treatment_only: object
    slope_full: float
    slope_treatment: float


def bandit_one(args):
    """Both policies on one seed; a preset draws a fresh design from that seed."""
    design, preset, etc, seed, window = args
    if design is None:
        design = bandit_design(preset, seed)
    cfg = replace(etc, seed=seed)
    try:
        full, _ = etc_run(design, cfg)
        base = etc_treatment_only(design, cfg)
    except Exception as exc:
        raise SeedFailure(seed, exc) from exc
    return BanditReplicate(seed, full, base, regret_slope(full, window), regret_slope(base, window))


def run_bandit(etc, seeds, design=None, preset="bandit", window=0.5):
    """Replicates sorted by seed. Pass ``design`` to hold it fixed across seeds."""
    if not isinstance(etc, EtcConfig):
        raise TypeError("etc must be an EtcConfig")
    if design is None and preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    jobs = [(design, preset, etc, int(s), window) for s in sorted(seeds)]
    return fan_out(bandit_one, jobs)


def regret_bands(curves, quantiles=BAND_QUANTILES):
    """Pointwise quantiles across seeds of cumulative regret curves (rows = seeds)."""
    c = np.atleast_2d(np.asarray(curves, dtype=float))
    return np.quantile(c, quantiles, axis=0)
