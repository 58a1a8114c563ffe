"""Explore-then-commit adaptive experimentation over a fixed basis design."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels
from .estimators import (
    DkrlConfig,
    NuclearConfig,
    OutcomeConfig,
    dkrl_fit_design,
    extract_gamma,
    nuclear_fit,
    residualize,
)
from .kernels import KernelSpec
from .simdata import FixedBasisDesign, NoiseSpec

__all__ = [
    "BanditTrace",
    "commit_policy",
    "EtcConfig",
    "FixedBasisDesign",
    "EstimatorFailure",
    "etc_run",
    "etc_treatment_only",
    "regret_slope",
    "suggest_explore_rounds",
    "treatment_scores",
]

TRACE_HEADER = ("t", "arm", "user", "reward", "instant_regret", "cumulative_regret")


class EstimatorFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class EtcConfig:
    horizon: int = 20000
    explore_rounds: int | None = None
    seed: int = 0
    estimator: str = "factorized"
    dkrl: DkrlConfig = field(default_factory=lambda: DkrlConfig(rank=2, lam=1e-4, max_iter=300, tol=1e-6))
    spec_g: KernelSpec = field(default_factory=KernelSpec)
    spec_h: KernelSpec = field(default_factory=KernelSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    outcome: OutcomeConfig = field(default_factory=OutcomeConfig)
    nuclear: NuclearConfig = field(default_factory=lambda: NuclearConfig(lam=1e-3))
    treatment_lam: float = 1e-3
    kappa: float = 8.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.explore_rounds is not None and not 1 <= self.explore_rounds <= self.horizon:
            raise ValueError("explore_rounds must lie in [1, horizon]")
        if self.estimator not in ("factorized", "nuclear"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if not self.treatment_lam > 0:
            raise ValueError("treatment_lam must be positive")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")

    def resolved_explore_rounds(self, design, rank=None):
        if self.explore_rounds is not None:
            return self.explore_rounds
        return suggest_explore_rounds(self.horizon, design.d1, design.d2, rank or self.dkrl.rank, self.kappa)


@dataclass
class BanditTrace:
    arm: np.ndarray
    user: np.ndarray
    reward: np.ndarray
    instant_regret: np.ndarray
    explore_rounds: int = 0

    @property
    def t(self):
        return np.arange(1, self.arm.size + 1)

    @property
    def cumulative_regret(self):
        return np.cumsum(self.instant_regret)

    @property
    def rounds(self):
        return list(zip(self.t.tolist(), self.arm.tolist(), self.user.tolist(), self.reward.tolist(),
                        self.instant_regret.tolist(), self.cumulative_regret.tolist()))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_HEADER)
            for t, a, u, rew, inst, cum in self.rounds:
                writer.writerow([t, a, u, repr(rew), repr(inst), repr(cum)])


def suggest_explore_rounds(horizon, d1, d2, rank, kappa=8.0):
    """Exploration length ``(T^2 d1 d2 log(d1+d2) r (d1+d2))^(1/3) / kappa`` clamped to [1, T/2]."""
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    d = d1 + d2
    raw = (horizon**2 * d1 * d2 * math.log(d) * rank * d) ** (1.0 / 3.0) / kappa
    return int(min(max(math.ceil(raw), 1), horizon // 2))


def _streams(seed):
    explore, commit = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(explore), np.random.default_rng(commit)


def _check_truth(design):
    if design.gamma_star is None:
        raise ValueError("design has no ground truth attached")
    return design.gamma_star


def _explore(design, cfg, rng, m_fn):
    gamma = design.gamma_star
    te = cfg.resolved_explore_rounds(design)
    arms = rng.integers(0, design.d1, te)
    users = rng.integers(0, design.d2, te)
    base = _baseline(design, users, m_fn)
    rewards = base + gamma[arms, users] + cfg.noise.draw(rng, te)
    return arms, users, rewards


def _baseline(design, users, m_fn):
    if m_fn is None:
        return np.zeros(users.size)
    return np.asarray(m_fn(design.users[users]), dtype=float).ravel()


def _commit(design, cfg, rng, policy, m_fn, n_rounds):
    """Play ``policy[user]`` for uniformly drawn users."""
    gamma = design.gamma_star
    users = rng.integers(0, design.d2, n_rounds)
    arms = policy[users]
    rewards = _baseline(design, users, m_fn) + gamma[arms, users] + cfg.noise.draw(rng, n_rounds)
    return arms, users, rewards


def _assemble(design, arms, users, rewards, te):
    gamma = design.gamma_star
    regret = gamma.max(axis=0)[users] - gamma[arms, users]
    return BanditTrace(arms.astype(int), users.astype(int), rewards, regret, te)


def estimate_gamma(design, arms, users, rewards, cfg):
    """Fit the outcome response matrix from exploration data."""
    y, _ = residualize(design.users[users], rewards, cfg.outcome)
    if cfg.estimator == "nuclear":
        return nuclear_fit((arms, users, y), (design.d1, design.d2), cfg.nuclear)
    model = dkrl_fit_design(design, arms, users, y, cfg.dkrl, cfg.spec_g, cfg.spec_h,
                            center=cfg.outcome.mode != "none")
    return extract_gamma(model, design)


def commit_policy(gamma_hat):
    """Best estimated arm per user (column); ties go to the lowest arm index."""
    return np.argmax(np.asarray(gamma_hat), axis=0)


def etc_run(design, cfg, m_fn=None):
    """Explore uniformly for ``T_e`` rounds, fit once, then commit per user.

    Returns ``(trace, gamma_hat)``. Argmax ties go to the lowest arm index.
    """
    _check_truth(design)
    explore_rng, commit_rng = _streams(cfg.seed)
    arms, users, rewards = _explore(design, cfg, explore_rng, m_fn)
    te = arms.size
    try:
        gamma_hat = estimate_gamma(design, arms, users, rewards, cfg)
    except Exception as exc:
        raise EstimatorFailure(f"estimator failed after exploration round {te}: {exc}") from exc
    policy = commit_policy(gamma_hat)
    c_arms, c_users, c_rewards = _commit(design, cfg, commit_rng, policy, m_fn, cfg.horizon - te)
    trace = _assemble(design, np.concatenate([arms, c_arms]), np.concatenate([users, c_users]),
                      np.concatenate([rewards, c_rewards]), te)
    return trace, gamma_hat


def treatment_scores(design, arms, rewards, spec, lam):
    """Kernel ridge fit of reward on treatment vectors, evaluated at every arm.

    Repeated arms share one coefficient: with counts ``C`` and reward sums
    ``s`` the weights solve ``(C K + n lam I) beta = s``, which gives the same
    function as ``krr_fit`` on all ``n`` rows at a cost set by ``d1``.
    A missing gaussian lengthscale is resolved on the treatment basis.
    """
    n = arms.size
    pts = design.treatments
    spec = kernels.resolve(spec, pts)
    k = kernels.gram(spec, pts).values
    counts = np.bincount(arms, minlength=design.d1).astype(float)
    sums = np.bincount(arms, weights=rewards, minlength=design.d1)
    beta = scipy.linalg.solve(counts[:, None] * k + n * lam * np.eye(design.d1), sums)
    return k @ beta


def etc_treatment_only(design, cfg, m_fn=None):
    """Explore-then-commit that ignores covariates and commits one arm for everyone."""
    _check_truth(design)
    explore_rng, commit_rng = _streams(cfg.seed)
    arms, users, rewards = _explore(design, cfg, explore_rng, m_fn)
    te = arms.size
    try:
        scores = treatment_scores(design, arms, rewards, cfg.spec_g, cfg.treatment_lam)
    except Exception as exc:
        raise EstimatorFailure(f"treatment-only fit failed after exploration round {te}: {exc}") from exc
    policy = np.full(design.d2, int(np.argmax(scores)))
    c_arms, c_users, c_rewards = _commit(design, cfg, commit_rng, policy, m_fn, cfg.horizon - te)
    return _assemble(design, np.concatenate([arms, c_arms]), np.concatenate([users, c_users]),
                     np.concatenate([rewards, c_rewards]), te)


def regret_slope(trace, window=0.5):
    """Least-squares slope of log cumulative regret against log t over the trailing window.

    Accepts a :class:`BanditTrace` or a cumulative-regret array. Returns 0 when
    the regret over the window is identically zero.
    """
    if not 0 < window <= 1:
        raise ValueError("window must lie in (0, 1]")
    cum = trace.cumulative_regret if isinstance(trace, BanditTrace) else np.asarray(trace, dtype=float)
    total = cum.size
    start = total - max(int(round(window * total)), 2)
    t = np.arange(1, total + 1)[start:]
    c = cum[start:]
    pos = c > 0
    if pos.sum() < 2:
        return 0.0
    return float(np.polyfit(np.log(t[pos]), np.log(c[pos]), 1)[0])
