"""Brute-force reference routines used to certify the solvers.

Nothing here calls into :mod:`dkrl.estimators`; the only shared code is numpy.
These are correctness tools with hard size guardrails, not production paths.
"""

import itertools

import numpy as np


class GuardrailError(ValueError):
    """Instance too large (or the wrong shape) for a brute-force routine."""


def dkrl_objective(u, v, kg, kh, iz, ix, y, lam):
    """Double-kernel objective written with explicit kernel rows."""
    n = len(y)
    rows_g = kg[np.asarray(iz)]
    rows_h = kh[np.asarray(ix)]
    pred = np.einsum("ki,il,jl,kj->k", rows_g, u, v, rows_h)
    penalty = np.trace(u.T @ kg @ u) + np.trace(v.T @ kh @ v)
    return float(np.sum((np.asarray(y) - pred) ** 2) / (2 * n) + lam * penalty)


def exact_vec_solve_u(kg, kh, iz, ix, y, v, lam, max_unknowns=400):
    """Joint minimizer of the U-step objective over all ``m * r`` unknowns.

    Builds the ``n x (m r)`` design with entries ``K_g[iz_k, j] * (K_h V)[ix_k, l]``
    and solves the penalized problem as one stacked least-squares system
    ``[A / sqrt(n); sqrt(2 lam) P^(1/2)] u ~ [y / sqrt(n); 0]``, which avoids
    squaring the condition number of the normal equations.
    """
    kg, kh = np.asarray(kg, float), np.asarray(kh, float)
    v = np.asarray(v, float)
    m, r = kg.shape[0], v.shape[1]
    if m * r > max_unknowns:
        raise GuardrailError(f"{m * r} unknowns exceeds the guardrail of {max_unknowns}")
    y = np.asarray(y, float)
    n = y.size
    s = (kh @ v)[np.asarray(ix)]
    rows = kg[np.asarray(iz)]
    # column index l * m + j  <->  U[j, l]
    design = np.hstack([rows * s[:, [l]] for l in range(r)])
    evals, evecs = np.linalg.eigh(kg)
    root = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    lhs = np.vstack([design / np.sqrt(n), np.sqrt(2.0 * lam) * np.kron(np.eye(r), root)])
    rhs = np.concatenate([y / np.sqrt(n), np.zeros(m * r)])
    vec = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    return vec.reshape(r, m).T


def finite_diff_grad(objective, point, h=1e-6):
    """Central-difference gradient of ``objective`` at ``point`` (any shape)."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.array(point, dtype=float)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = objective(x)
        flat[i] = old - h
        down = objective(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def exhaustive_regret(gamma_star, policy):
    """Expected per-round regret of a policy against a uniformly drawn user.

    ``policy`` is either one arm index per user or a (d1 x d2) matrix whose
    column ``u`` is the arm distribution for user ``u``.
    """
    g = np.asarray(gamma_star, dtype=float)
    d1, d2 = g.shape
    best = g.max(axis=0)
    pol = np.asarray(policy)
    if pol.ndim == 1:
        played = np.array([g[int(pol[u]), u] for u in range(d2)])
    else:
        played = np.array([sum(pol[a, u] * g[a, u] for a in range(d1)) for u in range(d2)])
    return float(np.mean(best - played))


def brute_force_factorized(cells, lam, dims=(2, 2), coarse=5, min_step=1e-4, starts=6):
    """Grid-search minimum of the full-rank factorized objective on a 2 x 2 instance.

    Objective: ``1/(2n) sum (y - (U V^T)[r, c])^2 + (lam / 2) (||U||_F^2 + ||V||_F^2)``
    over 2 x 2 factors. A coarse grid over all eight entries seeds a
    pattern search whose step halves until it falls below ``min_step``.
    """
    if tuple(dims) != (2, 2):
        raise GuardrailError("brute_force_factorized only handles 2 x 2 instances")
    rows = np.array([c[0] for c in cells], dtype=int)
    cols = np.array([c[1] for c in cells], dtype=int)
    y = np.array([c[2] for c in cells], dtype=float)
    n = y.size

    def evaluate(params):
        # params: (k, 8) -> U = params[:, :4], V = params[:, 4:], row-major 2x2
        u = params[:, :4].reshape(-1, 2, 2)
        v = params[:, 4:].reshape(-1, 2, 2)
        prod = np.einsum("kia,kja->kij", u, v)
        pred = prod[:, rows, cols]
        fit = np.sum((y - pred) ** 2, axis=1) / (2 * n)
        return fit + 0.5 * lam * np.sum(params**2, axis=1)

    bound = np.sqrt(2.0 * max(np.abs(y).max(), 1e-12)) + 0.5
    axis = np.linspace(-bound, bound, coarse)
    grid = np.array(list(itertools.product(axis, repeat=8)))
    vals = evaluate(grid)
    seeds = grid[np.argsort(vals)[:starts]]
    moves = np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=8)))

    best_val = np.inf
    for center in seeds:
        step = axis[1] - axis[0]
        cur = evaluate(center[None])[0]
        while step >= min_step:
            cand = center + step * moves
            cv = evaluate(cand)
            i = int(np.argmin(cv))
            if cv[i] < cur:
                center, cur = cand[i], cv[i]
            else:
                step *= 0.5
        best_val = min(best_val, cur)
    return float(best_val)
