import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkrl.estimators import (
    DegenerateBasisError,
    DkrlConfig,
    DkrlModel,
    DkrlProblem,
    NuclearConfig,
    OutcomeConfig,
    StepSizeError,
    cross_validate,
    dkrl_fit,
    dkrl_fit_design,
    dkrl_predict,
    extract_gamma,
    extract_theta,
    load_model,
    nuclear_fit,
    nuclear_lambda_max,
    nuclear_objective,
    pmf_objective,
    pmf_reparam,
    representations,
    residualize,
    save_model,
    solve_factorized,
    trim_rank,
    u_step,
    v_step,
)
from dkrl.kernels import KernelSpec, gram, jitter
from dkrl.numerics import numerical_rank, ridge_solve, svd
from dkrl.oracle import dkrl_objective, finite_diff_grad
from dkrl.simdata import FixedBasisDesign, NoiseSpec, planted_design, sample_dataset

SPEC = KernelSpec("gaussian", 0.5)


def planted_rank_one(seed, n=30):
    """Outcomes built from a rank-1 double-kernel model over 1-d inputs."""
    r = np.random.default_rng(seed)
    z, x = r.uniform(0, 2, (n, 1)), r.uniform(0, 2, (n, 1))
    u_star, v_star = r.standard_normal(n), r.standard_normal(n)

    def truth(zq, xq):
        return (gram(SPEC, zq, z).values @ u_star) * (gram(SPEC, xq, x).values @ v_star)

    return z, x, truth(z, x), truth, r


def random_problem(seed, n=20, r_dim=2, lam=1e-2):
    r = np.random.default_rng(seed)
    z, x = r.standard_normal((n, 2)), r.standard_normal((n, 2))
    kg = jitter(gram(KernelSpec("gaussian", 1.0), z)).values
    kh = jitter(gram(KernelSpec("gaussian", 1.0), x)).values
    y = r.standard_normal(n)
    return DkrlProblem(kg, kh, np.arange(n), np.arange(n), y, lam), r


# ---------------------------------------------------------------- configs


def test_config_validation():
    with pytest.raises(ValueError):
        DkrlConfig(rank=0)
    with pytest.raises(ValueError):
        DkrlConfig(tol=0)
    with pytest.raises(ValueError):
        DkrlConfig(max_iter=0)
    with pytest.raises(ValueError):
        DkrlConfig(lam=-1)
    with pytest.raises(ValueError):
        OutcomeConfig(mode="forest")
    with pytest.raises(ValueError):
        OutcomeConfig(mode="kernel_ridge", lam_m=0)
    with pytest.raises(ValueError):
        NuclearConfig(step=0)


# ---------------------------------------------------------------- residualize


def test_residualize_none_is_identity(rng):
    y = rng.standard_normal(10)
    resid, model = residualize(rng.standard_normal((10, 2)), y, OutcomeConfig())
    assert model is None and np.array_equal(resid, y)


def test_residualize_constant_outcome(rng):
    x = rng.standard_normal((40, 2))
    c = 3.0
    cfg = OutcomeConfig("kernel_ridge", KernelSpec("gaussian", 5.0), lam_m=1e-8)
    resid, model = residualize(x, np.full(40, c), cfg)
    assert model is not None
    assert np.abs(resid).max() < 1e-2 * abs(c)


def test_residualize_crossfit(rng):
    x = rng.standard_normal((30, 1))
    y = np.sin(2 * x[:, 0])
    cfg = OutcomeConfig("kernel_ridge", KernelSpec("gaussian", 1.0), lam_m=1e-4, folds=3)
    resid, _ = residualize(x, y, cfg)
    assert np.mean(resid**2) < 0.1 * np.mean(y**2)
    with pytest.raises(ValueError):
        residualize(x, y, OutcomeConfig("kernel_ridge", folds=31))


# ---------------------------------------------------------------- fitting


def test_zero_outcome_returns_zero_factors(rng):
    z, x = rng.standard_normal((12, 2)), rng.standard_normal((12, 2))
    model = dkrl_fit(z, x, np.zeros(12), DkrlConfig(rank=2, lam=1e-2))
    assert model.loss_trace[-1] <= model.loss_trace[0]
    assert np.all(model.u == 0) and np.all(model.v == 0)
    assert model.iterations_run == 1


def test_planted_rank_one_recovery():
    z, x, y, truth, r = planted_rank_one(0)
    model = dkrl_fit(z, x, y, DkrlConfig(rank=1, lam=1e-6, max_iter=2000, tol=1e-10), SPEC, SPEC)
    assert np.mean((dkrl_predict(model, z, x) - y) ** 2) < 1e-4
    zq, xq = r.uniform(0, 2, (50, 1)), r.uniform(0, 2, (50, 1))
    assert np.mean((dkrl_predict(model, zq, xq) - truth(zq, xq)) ** 2) < 1e-3


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.sampled_from([1e-4, 1e-2, 1.0]))
def test_descent_property(seed, rank, lam):
    r = np.random.default_rng(seed)
    z, x, y = r.standard_normal((25, 2)), r.standard_normal((25, 2)), r.standard_normal(25)
    model = dkrl_fit(z, x, y, DkrlConfig(rank=rank, lam=lam, max_iter=60, seed=seed))
    tr = model.loss_trace
    assert np.all(np.diff(tr) <= 1e-9 * (1 + tr[0]))
    assert np.all(np.isfinite(model.u)) and model.u.shape == (25, rank)


def test_fit_rejects_mismatched_lengths(rng):
    with pytest.raises(ValueError):
        dkrl_fit(rng.standard_normal((5, 2)), rng.standard_normal((4, 2)), np.ones(5), DkrlConfig())


def test_duplicate_points_are_handled(rng):
    z = np.repeat(rng.standard_normal((4, 2)), 5, axis=0)
    x = np.tile(rng.standard_normal((5, 2)), (4, 1))
    y = rng.standard_normal(20)
    model = dkrl_fit(z, x, y, DkrlConfig(rank=2, lam=1e-3, max_iter=50))
    assert np.all(np.isfinite(model.u)) and np.all(np.isfinite(model.v))


def test_collapse_matches_full_fit():
    r = np.random.default_rng(4)
    zb, xb = r.standard_normal((4, 2)), r.standard_normal((5, 2))
    ez, ex = r.integers(0, 4, 60), r.integers(0, 5, 60)
    a, b = r.standard_normal(4), r.standard_normal(5)
    y = a[ez] * b[ex]
    cfg = DkrlConfig(rank=1, lam=1e-4, max_iter=3000, tol=1e-11)
    full = dkrl_fit(zb[ez], xb[ex], y, cfg, KernelSpec("gaussian", 1.0), KernelSpec("gaussian", 1.0))
    small = dkrl_fit(zb[ez], xb[ex], y, cfg, KernelSpec("gaussian", 1.0), KernelSpec("gaussian", 1.0),
                     collapse=True)
    assert small.u.shape == (4, 1) and small.v.shape == (5, 1)
    np.testing.assert_allclose(dkrl_predict(small, zb[ez], xb[ex]), dkrl_predict(full, zb[ez], xb[ex]),
                               atol=1e-3)


def test_center_offset(rng):
    z, x, y = rng.standard_normal((20, 2)), rng.standard_normal((20, 2)), rng.standard_normal(20) + 2
    model = dkrl_fit(z, x, y, DkrlConfig(rank=2, lam=1e-3, max_iter=100), center=True)
    assert model.offset != 0
    # offset is computed on the jittered Grams, so allow jitter-sized slack
    assert abs(np.mean(dkrl_predict(model, z, x))) < 1e-6


# ---------------------------------------------------------------- block updates


def test_u_step_rank_one_system():
    prob, r = random_problem(1)
    n = prob.n
    u, v = r.standard_normal((n, 1)), r.standard_normal((n, 1))
    new = u_step(prob, u, v)
    d = (prob.kh @ v)[:, 0]
    direct = np.linalg.solve(d[:, None] ** 2 * prob.kg + 2 * n * prob.lam * np.eye(n), d * prob.y)
    np.testing.assert_allclose(new[:, 0], direct, atol=1e-10)

    def obj_u(uu):
        return dkrl_objective(uu, v, prob.kg, prob.kh, prob.iz, prob.ix, prob.y, prob.lam)

    g0 = np.linalg.norm(finite_diff_grad(obj_u, u))
    assert np.linalg.norm(finite_diff_grad(obj_u, new)) < 1e-4 * (1 + g0)


def test_u_step_huge_lambda_shrinks():
    prob, r = random_problem(2, lam=1e8)
    new = u_step(prob, r.standard_normal((prob.n, 2)), r.standard_normal((prob.n, 2)))
    assert np.linalg.norm(new) < 1e-6


def test_u_step_zero_partner():
    prob, r = random_problem(3)
    new = u_step(prob, r.standard_normal((prob.n, 2)), np.zeros((prob.n, 2)))
    assert np.all(new == 0)


def test_v_step_is_symmetric_counterpart():
    prob, r = random_problem(5)
    u, v = r.standard_normal((prob.n, 2)), r.standard_normal((prob.n, 2))
    np.testing.assert_allclose(v_step(prob, u, v), u_step(prob.swapped(), v, u), atol=0)
    assert prob.objective(u, v_step(prob, u, v)) <= prob.objective(u, v) + 1e-12


def test_solve_factorized_stationary():
    prob, r = random_problem(6, n=15, lam=1e-2)
    u0, v0 = r.normal(0, 0.3, (15, 2)), r.normal(0, 0.3, (15, 2))
    u, v, trace, _ = solve_factorized(prob, DkrlConfig(rank=2, lam=1e-2, max_iter=20000, tol=1e-12), u0, v0)
    stacked = np.concatenate([u0.ravel(), v0.ravel()])

    def obj(p):
        return dkrl_objective(p[:30].reshape(15, 2), p[30:].reshape(15, 2), prob.kg, prob.kh, prob.iz,
                              prob.ix, prob.y, prob.lam)

    g0 = np.linalg.norm(finite_diff_grad(obj, stacked))
    g = np.linalg.norm(finite_diff_grad(obj, np.concatenate([u.ravel(), v.ravel()])))
    assert g < 1e-4 * (1 + g0)


# ---------------------------------------------------------------- prediction


def _fitted(seed=0, n=25, rank=2):
    r = np.random.default_rng(seed)
    z, x, y = r.standard_normal((n, 2)), r.standard_normal((n, 2)), r.standard_normal(n)
    return dkrl_fit(z, x, y, DkrlConfig(rank=rank, lam=1e-2, max_iter=100, seed=seed)), r


def test_predict_zero_u():
    model, r = _fitted()
    model.u = np.zeros_like(model.u)
    assert np.all(dkrl_predict(model, r.standard_normal((4, 2)), r.standard_normal((4, 2))) == 0)


def test_predict_training_pair_definition():
    model, _ = _fitted()
    kg = gram(model.spec_g, model.train_z).values
    kh = gram(model.spec_h, model.train_x).values
    pred = dkrl_predict(model, model.train_z, model.train_x)
    for k in (0, 7, 24):
        assert pred[k] == pytest.approx(kg[k] @ model.u @ model.v.T @ kh[k], abs=1e-12)


def test_representer_form_at_random_queries():
    model, r = _fitted(1)
    zq, xq = r.standard_normal((10, 2)), r.standard_normal((10, 2))
    rows_g = np.array([[np.exp(-np.sum((a - b) ** 2) / (2 * model.spec_g.lengthscale**2))
                        for b in model.train_z] for a in zq])
    rows_h = np.array([[np.exp(-np.sum((a - b) ** 2) / (2 * model.spec_h.lengthscale**2))
                        for b in model.train_x] for a in xq])
    explicit = np.einsum("ki,il,jl,kj->k", rows_g, model.u, model.v, rows_h)
    np.testing.assert_allclose(dkrl_predict(model, zq, xq), explicit, atol=1e-12)
    g, h = representations(model, zq, xq)
    np.testing.assert_allclose(np.sum(g * h, axis=1), explicit, atol=1e-12)


def test_predict_query_validation():
    model, _ = _fitted()
    with pytest.raises(ValueError):
        dkrl_predict(model, np.ones((3, 2)), np.ones((2, 2)))


def test_trim_rank_drops_negligible_columns():
    model, r = _fitted(2)
    tiny = 1e-6 * r.standard_normal((model.u.shape[0], 1))
    model.u = np.hstack([model.u, tiny])
    model.v = np.hstack([model.v, r.standard_normal((model.v.shape[0], 1))])
    trimmed = trim_rank(model)
    assert trimmed.rank == 2
    zq, xq = r.standard_normal((5, 2)), r.standard_normal((5, 2))
    np.testing.assert_allclose(dkrl_predict(trimmed, zq, xq), dkrl_predict(model, zq, xq), atol=1e-4)
    model.u[:] = 0
    assert trim_rank(model).rank == 1


def test_model_round_trip(tmp_path):
    model, r = _fitted(3)
    path = tmp_path / "m.json"
    save_model(model, path)
    back = load_model(path)
    zq, xq = r.standard_normal((6, 2)), r.standard_normal((6, 2))
    np.testing.assert_array_equal(dkrl_predict(back, zq, xq), dkrl_predict(model, zq, xq))
    assert back.rank == model.rank and len(back.loss_trace) == len(model.loss_trace)


# ---------------------------------------------------------------- fixed-basis extraction


def _full_observation(design, reps=2):
    ez, ex = np.meshgrid(np.arange(design.d1), np.arange(design.d2), indexing="ij")
    return np.repeat(ez.ravel(), reps), np.repeat(ex.ravel(), reps)


def test_extract_gamma_zero_u():
    d = planted_design(3, 3, 4, 4, 1, 0)
    ez, ex = _full_observation(d)
    model = dkrl_fit_design(d, ez, ex, d.gamma_star[ez, ex], DkrlConfig(rank=1, max_iter=5))
    model.u = np.zeros_like(model.u)
    assert np.all(extract_gamma(model, d) == 0)


def test_extract_gamma_single_cell():
    d = FixedBasisDesign(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]))
    model = dkrl_fit_design(d, np.zeros(3, int), np.zeros(3, int), np.array([0.5, 0.7, 0.6]),
                            DkrlConfig(rank=1, lam=1e-6))
    pred = dkrl_predict(model, d.treatments, d.users)
    assert extract_gamma(model, d).shape == (1, 1)
    assert extract_gamma(model, d)[0, 0] == pytest.approx(pred[0], abs=1e-14)


def test_extract_gamma_full_observation_and_rank():
    d = planted_design(4, 4, 8, 8, 2, 7)
    ez, ex = _full_observation(d, 3)
    model = dkrl_fit_design(d, ez, ex, d.gamma_star[ez, ex],
                            DkrlConfig(rank=2, lam=1e-7, max_iter=2000, tol=1e-10))
    g = extract_gamma(model, d)
    assert np.linalg.norm(g - d.gamma_star) / np.linalg.norm(d.gamma_star) < 0.05
    s = svd(g).singulars
    assert np.all(s[2:] < 1e-8 * s[0])
    assert numerical_rank(g) <= 2


def test_extract_theta_square_orthogonal(rng):
    zq, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    xq, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    d = FixedBasisDesign(zq, xq)
    gamma = rng.standard_normal((4, 3))
    np.testing.assert_allclose(extract_theta(gamma, d), zq @ gamma @ xq.T, atol=1e-12)


def test_extract_theta_inverts_exact_gamma(rng):
    z, x = rng.standard_normal((5, 5)), rng.standard_normal((4, 4))
    theta = rng.standard_normal((5, 4))
    d = FixedBasisDesign(z, x)
    np.testing.assert_allclose(extract_theta(z.T @ theta @ x, d), theta, atol=1e-8)


def test_extract_theta_overcomplete_noiseless_fit():
    d = planted_design(4, 5, 8, 10, 2, 11)
    ez, ex = _full_observation(d)
    model = dkrl_fit_design(d, ez, ex, d.gamma_star[ez, ex],
                            DkrlConfig(rank=2, lam=1e-7, max_iter=2000, tol=1e-10))
    theta = extract_theta(extract_gamma(model, d), d)
    assert np.linalg.norm(theta - d.theta_star) / np.linalg.norm(d.theta_star) < 0.1


def test_extract_theta_degenerate_basis():
    d = FixedBasisDesign(np.array([[1.0, 2.0], [2.0, 4.0]]), np.eye(2))
    with pytest.raises(DegenerateBasisError, match="Z Z"):
        extract_theta(np.ones((2, 2)), d)
    with pytest.raises(ValueError):
        extract_theta(np.ones((3, 2)), FixedBasisDesign(np.eye(2), np.eye(2)))


# ---------------------------------------------------------------- nuclear program


def test_nuclear_lambda_zero_full_observation(rng):
    g = rng.standard_normal((3, 4))
    cells = [(i, j, g[i, j]) for i in range(3) for j in range(4)]
    np.testing.assert_allclose(nuclear_fit(cells, (3, 4), NuclearConfig(lam=0.0)), g, atol=1e-12)


def test_nuclear_above_lambda_max_is_zero(rng):
    rows, cols = rng.integers(0, 4, 50), rng.integers(0, 5, 50)
    y = rng.standard_normal(50)
    lam_max = nuclear_lambda_max((rows, cols, y), (4, 5))
    assert np.all(nuclear_fit((rows, cols, y), (4, 5), NuclearConfig(lam=lam_max)) == 0)
    below = nuclear_fit((rows, cols, y), (4, 5), NuclearConfig(lam=0.5 * lam_max))
    assert np.abs(below).max() > 0


def test_nuclear_monotone_trace_and_objective(rng):
    rows, cols = rng.integers(0, 5, 80), rng.integers(0, 5, 80)
    y = rng.standard_normal(80)
    trace = []
    g = nuclear_fit((rows, cols, y), (5, 5), NuclearConfig(lam=0.05), trace=trace)
    assert np.all(np.diff(trace) <= 1e-9 * (1 + trace[0]))
    assert nuclear_objective(g, (rows, cols, y), (5, 5), 0.05) == pytest.approx(trace[-1], rel=1e-12)


def test_nuclear_step_too_large(rng):
    rows, cols = np.zeros(10, int), np.zeros(10, int)
    y = rng.standard_normal(10) + 5
    with pytest.raises(StepSizeError):
        nuclear_fit((rows, cols, y), (2, 2), NuclearConfig(lam=0.0, step=100.0))


def test_nuclear_bad_cells():
    with pytest.raises(ValueError):
        nuclear_fit([(2, 0, 1.0)], (2, 2), NuclearConfig())
    with pytest.raises(ValueError):
        nuclear_fit([], (2, 2), NuclearConfig())


# ---------------------------------------------------------------- PMF view


def test_pmf_examples():
    model, _ = _fitted(4)
    r, s = pmf_reparam(model)
    assert r.shape == model.u.shape
    zero = DkrlModel(np.zeros_like(model.u), model.v, model.gram_g, model.gram_h, model.train_z,
                     model.train_x, model.spec_g, model.spec_h, model.lam, model.loss_trace, 0)
    assert np.all(pmf_reparam(zero)[0] == 0)
    ident = DkrlModel(model.u, model.v, type(model.gram_g)(np.eye(25), model.spec_g, True), model.gram_h,
                      model.train_z, model.train_x, model.spec_g, model.spec_h, model.lam, model.loss_trace, 0)
    np.testing.assert_array_equal(pmf_reparam(ident)[0], model.u)


def test_pmf_objective_identity():
    model, _ = _fitted(5, n=20)
    r, s = pmf_reparam(model)
    original = model.problem().objective(model.u, model.v)
    assert abs(pmf_objective(r, s, model) - original) < 1e-9 * (1 + original)


# ---------------------------------------------------------------- finite-dimensional equivalence


def _feature_als(zf, xf, y, rank, lam, seed, iters=3000):
    """Alternating ridge fits of ``y ~ z^T A B^T x`` with penalty ``lam (|A|^2 + |B|^2)``."""
    n = y.size
    r = np.random.default_rng(seed)
    a, b = r.normal(0, 0.5, (zf.shape[1], rank)), r.normal(0, 0.5, (xf.shape[1], rank))

    def obj(a, b):
        resid = y - np.sum((zf @ a) * (xf @ b), axis=1)
        return resid @ resid / (2 * n) + lam * (np.sum(a * a) + np.sum(b * b))

    for _ in range(iters):
        # vec(A) design: row k is kron(x_k^T B, z_k)
        design = np.einsum("kl,ki->kil", xf @ b, zf).reshape(n, -1)
        a = ridge_solve(design, y, 2 * n * lam).reshape(zf.shape[1], rank)
        design = np.einsum("kl,ki->kil", zf @ a, xf).reshape(n, -1)
        b = ridge_solve(design, y, 2 * n * lam).reshape(xf.shape[1], rank)
    return obj(a, b)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_feature_space_and_gram_objectives_agree(seed):
    r = np.random.default_rng(seed)
    n, p, q = 40, 3, 3
    zf, xf = r.standard_normal((n, p)), r.standard_normal((n, q))
    a_star, b_star = r.standard_normal((p, 2)), r.standard_normal((q, 2))
    y = np.sum((zf @ a_star) * (xf @ b_star), axis=1) + 0.1 * r.standard_normal(n)
    lam = 1e-2
    feat = _feature_als(zf, xf, y, 2, lam, seed, iters=500)
    model = dkrl_fit(zf, xf, y, DkrlConfig(rank=2, lam=lam, max_iter=5000, tol=1e-12, jitter=0.0, seed=seed),
                     KernelSpec("linear"), KernelSpec("linear"))
    gram_obj = model.loss_trace[-1]
    assert abs(gram_obj - feat) <= 1e-3 * abs(feat)


# ---------------------------------------------------------------- cross-validation


def test_cv_single_point_grid(rng):
    z, x, y = rng.standard_normal((20, 2)), rng.standard_normal((20, 2)), rng.standard_normal(20)
    res = cross_validate(z, x, y, [1e-2], [2], folds=2, base_cfg=DkrlConfig(max_iter=20))
    assert (res.lam, res.rank) == (1e-2, 2)
    assert len(res.table[(1e-2, 2)]) == 2


def test_cv_validation(rng):
    z, x, y = rng.standard_normal((5, 2)), rng.standard_normal((5, 2)), rng.standard_normal(5)
    with pytest.raises(ValueError):
        cross_validate(z, x, y, [], [1])
    with pytest.raises(ValueError):
        cross_validate(z, x, y, [1e-2], [1], folds=1)
    with pytest.raises(ValueError):
        cross_validate(z, x, y, [1e-2], [1], folds=6)


def _cv_data(seed):
    d = planted_design(5, 5, 8, 8, 2, seed)
    return sample_dataset(d, d.theta_star, 300, NoiseSpec("gaussian", 0.1), seed=seed + 100)


@pytest.mark.slow
def test_cv_selects_adequate_rank():
    picks = []
    for seed in range(20):
        data = _cv_data(seed)
        res = cross_validate(data.z, data.x, data.y, [1e-4], [1, 2, 4], folds=3, seed=seed,
                             base_cfg=DkrlConfig(max_iter=200, tol=1e-5))
        picks.append(res.rank in (2, 4))
    assert np.mean(picks) >= 0.8


@pytest.mark.slow
def test_cv_pure_noise_selects_largest_lambda():
    picks = []
    for seed in range(20):
        data = _cv_data(seed)
        y = np.random.default_rng(seed).normal(0, 1, 300)
        res = cross_validate(data.z, data.x, y, [1e-4, 1e-2, 1.0], [2], folds=3, seed=seed,
                             base_cfg=DkrlConfig(max_iter=200, tol=1e-5))
        picks.append(res.lam == 1.0)
    assert np.mean(picks) >= 0.8
