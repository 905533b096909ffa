import math

import numpy as np
import pytest

from stik.exceptions import (InvalidArgumentError, SelectionFailedError,
                             UndefinedObjectiveError)
from stik.linops import DenseOperator, IdentityOperator, row_block
from stik.problems import InverseProblem, TestProblemSpec, gen_test_problem
from stik.regparam import (AdaptiveSelector, FixedIncrement, GridSpec,
                           SelectorContext, default_grid, full_data_select,
                           hutchinson_trace, loo_cv_value, rademacher,
                           sdp_select, select_lambda, sgcv_objective,
                           supre_objective, trace_term)
from stik.sampling import make_block_partition
from stik.solvers import make_solver, run, tikhonov_direct


def identity_context(n=6, sigma2=0.04, seed=0, **cfg):
    """A = L = I, k = M = 1: every objective has a scalar closed form."""
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(n) + 1.0
    prob = InverseProblem(A=DenseOperator(np.eye(n)), b=b,
                          L=IdentityOperator(n), sigma2=sigma2)
    plan = make_block_partition(n, 1)
    ctx = SelectorContext.from_history(prob, plan, [1], sigma2=sigma2, **cfg)
    return ctx, b


def random_setup(rng, m=20, n=5, M=4, noise=0.1):
    A = rng.standard_normal((m, n))
    x_true = rng.standard_normal(n)
    b = A @ x_true + noise * rng.standard_normal(m)
    prob = InverseProblem(A=DenseOperator(A), b=b, L=IdentityOperator(n),
                          x_true=x_true)
    plan = make_block_partition(m, M)
    return prob, plan


# ---------------------------------------------------------------------------
# candidate_solve


def test_candidate_solve_epoch_oracle():
    prob = gen_test_problem(TestProblemSpec(name="gravity", n=40,
                                            noise_level=0.01, seed=2))
    plan = make_block_partition(40, 4)
    lam_star = 0.05
    ctx = SelectorContext.from_history(prob, plan, [1, 2, 3, 4],
                                       lambda_prev=0.02)
    x = ctx.candidate_solve(lam_star)
    direct = tikhonov_direct(prob, lam_star)
    assert np.linalg.norm(x - direct) <= 1e-8 * np.linalg.norm(direct)


def test_candidate_solve_first_block_tikhonov():
    rng = np.random.default_rng(3)
    prob, plan = random_setup(rng)
    ctx = SelectorContext.from_history(prob, plan, [2])
    lam = 0.8
    x = ctx.candidate_solve(lam)
    rows = plan.block_rows(2)
    A1 = prob.A.to_dense()[rows]
    oracle = np.linalg.solve(A1.T @ A1 + lam * np.eye(5), A1.T @ prob.b[rows])
    assert np.linalg.norm(x - oracle) <= 1e-9 * np.linalg.norm(oracle)


def test_candidate_solve_stacked_dense_agreement():
    rng = np.random.default_rng(4)
    prob, plan = random_setup(rng, m=40, n=6, M=5)
    A = prob.A.to_dense()
    history = [3, 1, 3, 5]
    lam = 0.33
    ctx = SelectorContext.from_history(prob, plan, history)
    x = ctx.candidate_solve(lam)
    rows = np.concatenate([plan.block_rows(t) for t in history])
    stacked = np.vstack([A[rows], np.sqrt(lam) * np.eye(6)])
    rhs = np.concatenate([prob.b[rows], np.zeros(6)])
    oracle = np.linalg.lstsq(stacked, rhs, rcond=None)[0]
    assert np.linalg.norm(x - oracle) <= 1e-9 * np.linalg.norm(oracle)


def test_candidate_solve_matches_live_solver_context():
    rng = np.random.default_rng(5)
    prob, plan = random_setup(rng)
    solver = make_solver("stik", prob)
    sched = plan.schedule()
    for k in range(1, 4):
        rows = plan.block_rows(sched.tau(k))
        solver.step(row_block(prob.A, rows), prob.b[rows], 0.1)
    rows = plan.block_rows(sched.tau(4))
    ctx = SelectorContext.from_solver(solver, row_block(prob.A, rows),
                                      prob.b[rows])
    hist = [sched.tau(k) for k in range(1, 5)]
    ctx2 = SelectorContext.from_history(prob, plan, hist,
                                        lambda_prev=solver.lambda_cum)
    for lam in (0.05, 0.7):
        assert np.allclose(ctx.candidate_solve(lam), ctx2.candidate_solve(lam),
                           atol=1e-12)


# ---------------------------------------------------------------------------
# sUPRE


def test_supre_scalar_closed_form():
    ctx, b = identity_context(sigma2=0.04)
    n = b.size
    B = float(b @ b)
    for lam in (0.01, 0.3, 2.5):
        expected = (lam / (1 + lam)) ** 2 * B + 2 * 0.04 * n / (1 + lam) \
            - 0.04 * n
        assert abs(supre_objective(ctx, lam) - expected) \
            <= 1e-10 * max(1.0, abs(expected))


def test_supre_sigma_zero_reduces_to_residual():
    ctx, b = identity_context(sigma2=0.0)
    lam = 0.7
    res = ctx.residual_sq(lam)
    assert supre_objective(ctx, lam) == res


def test_supre_requires_sigma2():
    ctx, _ = identity_context()
    ctx.sigma2 = None
    with pytest.raises(InvalidArgumentError):
        supre_objective(ctx, 0.1)


def test_supre_unbiasedness_monte_carlo():
    # appendix-style check: E U(lam) equals the expected sampled predictive
    # error, on an 8x4 problem over many fresh noise draws
    rng = np.random.default_rng(6)
    m, n, M = 8, 4, 4
    A = rng.standard_normal((m, n))
    x_true = rng.standard_normal(n)
    sigma2 = 0.09
    plan = make_block_partition(m, M)
    history = [2, 4]  # current block 4, one prior block
    rows_cur = plan.block_rows(4)
    n_draws = 20_000
    for lam in (0.05, 0.5, 2.0):
        clean = A @ x_true
        prob0 = InverseProblem(A=DenseOperator(A), b=clean,
                               L=IdentityOperator(n), sigma2=sigma2)
        ctx0 = SelectorContext.from_history(prob0, plan, history,
                                            sigma2=sigma2)
        t = ctx0.trace_term(lam)
        # x_k(lam) = C b is linear in b: build C columns once
        rows_hist = np.concatenate([plan.block_rows(tau) for tau in history])
        H = lam * np.eye(n) + A[rows_hist].T @ A[rows_hist]
        sel = np.zeros((n, m))
        sel[:, rows_hist] += A[rows_hist].T
        C = np.linalg.solve(H, sel)
        eps = math.sqrt(sigma2) * rng.standard_normal((m, n_draws))
        Bmat = clean[:, None] + eps
        X = C @ Bmat
        R = A[rows_cur] @ X - Bmat[rows_cur]
        P = A[rows_cur] @ X - clean[rows_cur][:, None]
        U = np.sum(R * R, axis=0) + 2 * sigma2 * t - sigma2 * len(rows_cur)
        pred = np.sum(P * P, axis=0)
        diff = U - pred
        se = np.std(diff, ddof=1) / math.sqrt(n_draws)
        assert abs(diff.mean()) <= 3 * se


# ---------------------------------------------------------------------------
# sGCV


def test_sgcv_scalar_closed_form():
    ctx, b = identity_context()
    n = b.size
    for lam in (0.05, 0.4, 3.0):
        assert abs(sgcv_objective(ctx, lam) - float(b @ b) / n) \
            <= 1e-10 * float(b @ b) / n


def test_sgcv_denominator_guard():
    # full-rank current block, lam -> 0: trace -> ell and the objective is
    # undefined
    rng = np.random.default_rng(7)
    n = 4
    A = rng.standard_normal((4, 4))
    prob = InverseProblem(A=DenseOperator(A), b=rng.standard_normal(4),
                          L=IdentityOperator(n))
    plan = make_block_partition(4, 1)
    ctx = SelectorContext.from_history(prob, plan, [1])
    with pytest.raises(UndefinedObjectiveError):
        sgcv_objective(ctx, 1e-15)


def test_sgcv_loo_identity_20_triples():
    # formula-based cross-validation value equals brute-force leave-one-out
    rng = np.random.default_rng(8)
    checked = 0
    case = 0
    while checked < 20:
        case += 1
        prob, plan = random_setup(np.random.default_rng(100 + case),
                                  m=20, n=5, M=4)
        A = prob.A.to_dense()
        k = int(rng.integers(1, 6))
        history = [int(rng.integers(1, 5)) for _ in range(k)]
        lam_eff = float(10.0 ** rng.uniform(-2, 1))
        ctx = SelectorContext.from_history(prob, plan, history)
        V = loo_cv_value(ctx, lam_eff)
        cur = plan.block_rows(history[-1])
        prior = (np.concatenate([plan.block_rows(t) for t in history[:-1]])
                 if len(history) > 1 else np.array([], dtype=int))
        total = 0.0
        for j in range(len(cur)):
            keep = np.delete(cur, j)
            stacked = np.vstack([A[prior], A[keep],
                                 math.sqrt(lam_eff) * np.eye(5)])
            rhs = np.concatenate([prob.b[prior], prob.b[keep], np.zeros(5)])
            xj = np.linalg.lstsq(stacked, rhs, rcond=None)[0]
            total += float((prob.b[cur[j]] - A[cur[j]] @ xj) ** 2)
        oracle = total / len(cur)
        assert abs(V - oracle) <= 1e-8 * max(1.0, oracle)
        checked += 1


def test_objectives_invariant_under_history_reordering():
    rng = np.random.default_rng(9)
    prob, plan = random_setup(rng)
    lam = 0.42
    hist_a = [2, 1, 3, 1, 4]
    hist_b = [1, 3, 1, 2, 4]  # same multiset, same current block
    for fn in (supre_objective, sgcv_objective):
        ctx_a = SelectorContext.from_history(prob, plan, hist_a, sigma2=0.01)
        ctx_b = SelectorContext.from_history(prob, plan, hist_b, sigma2=0.01)
        assert fn(ctx_a, lam) == fn(ctx_b, lam)


# ---------------------------------------------------------------------------
# trace terms


def test_trace_exact_matches_explicit_matrix():
    rng = np.random.default_rng(10)
    m, n = 10, 4
    A = rng.standard_normal((m, n))
    prob = InverseProblem(A=DenseOperator(A), b=rng.standard_normal(m),
                          L=IdentityOperator(n))
    plan = make_block_partition(m, 5)
    history = [3, 1, 3]
    lam = 0.6
    ctx = SelectorContext.from_history(prob, plan, history)
    counts = np.zeros(m)
    for tau in history:
        counts[plan.block_rows(tau)] += 1
    G = sum(A[plan.block_rows(t)].T @ A[plan.block_rows(t)] for t in history)
    C = np.linalg.solve(lam * np.eye(n) + G, A.T * counts[None, :])
    cur = plan.block_rows(3)
    explicit = np.trace(A[cur] @ C[:, cur])
    assert abs(ctx.trace_term(lam) - explicit) <= 1e-10 * abs(explicit)


def test_hutchinson_mean_and_variance():
    rng = np.random.default_rng(11)
    B = rng.standard_normal((10, 10))
    M = B @ B.T / 10 + np.eye(10)
    exact = np.trace(M)
    probe_rng = np.random.default_rng(12)
    n_probes = 10_000
    samples = np.array([float(v @ (M @ v))
                        for v in rademacher((n_probes, 10), probe_rng)])
    assert abs(samples.mean() - exact) <= 0.01 * exact
    # Var(v^T M v) = 2 sum_{i != j} M_ij^2 for Rademacher probes
    var_expected = 2 * (np.sum(M**2) - np.sum(np.diag(M) ** 2))
    se = var_expected * math.sqrt(2.0 / n_probes)  # chi-square-ish spread
    assert abs(samples.var(ddof=1) - var_expected) <= 5 * se


def test_hutchinson_single_probe_unbiased():
    rng = np.random.default_rng(13)
    B = rng.standard_normal((10, 10))
    M = B @ B.T / 10 + np.eye(10)
    exact = np.trace(M)
    estimates = np.array([
        hutchinson_trace(lambda v: M @ v, 10, 1, np.random.default_rng(seed))
        for seed in range(10_000)])
    se = estimates.std(ddof=1) / math.sqrt(estimates.size)
    assert abs(estimates.mean() - exact) <= 3 * se


def test_trace_term_hutchinson_converges_to_exact():
    rng = np.random.default_rng(14)
    prob, plan = random_setup(rng)
    history = [1, 2]
    lam = 0.3
    ctx = SelectorContext.from_history(prob, plan, history)
    exact = ctx.trace_term(lam)
    probes = rademacher((20_000, plan.ell), np.random.default_rng(15))
    ctx_h = SelectorContext.from_history(prob, plan, history,
                                         trace_mode="hutchinson",
                                         probes=probes)
    est = ctx_h.trace_term(lam)
    single = np.array([
        SelectorContext.from_history(prob, plan, history,
                                     trace_mode="hutchinson",
                                     probes=p[None, :]).trace_term(lam)
        for p in probes[:2000]])
    se = single.std(ddof=1) / math.sqrt(2000)
    assert abs(est - exact) <= 3 * single.std(ddof=1) / math.sqrt(len(probes))
    assert abs(single.mean() - exact) <= 3 * se


# ---------------------------------------------------------------------------
# sDP


def test_sdp_bisection_hits_target():
    rng = np.random.default_rng(16)
    prob, plan = random_setup(rng, m=40, n=6, M=4, noise=0.3)
    sigma2 = 0.09
    ctx = SelectorContext.from_history(prob, plan, [1, 2, 3], sigma2=sigma2,
                                       gamma=4.0,
                                       grid=GridSpec(1e-8, 1e4, 40))
    res = sdp_select(ctx)
    assert res.flag is None
    target = 4.0 * sigma2 * plan.ell
    assert abs(res.objective - target) <= 0.01 * target
    assert ctx.lambda_prev + res.Lambda > 0


def test_sdp_noiseless_pushes_to_boundary_with_flag():
    # noise-free data with a large claimed sigma2: the target exceeds any
    # achievable residual, so the selection lands on the top boundary
    rng = np.random.default_rng(17)
    A = rng.standard_normal((12, 3))
    x_true = rng.standard_normal(3)
    prob = InverseProblem(A=DenseOperator(A), b=A @ x_true,
                          L=IdentityOperator(3))
    plan = make_block_partition(12, 3)
    big_sigma2 = 1e6
    ctx = SelectorContext.from_history(prob, plan, [1, 2], sigma2=big_sigma2,
                                       gamma=4.0, grid=GridSpec(1e-6, 1e2, 20))
    res = sdp_select(ctx)
    assert res.flag == "no_crossing"
    assert res.lam_eff == pytest.approx(1e2)


def test_sdp_low_boundary_flag():
    # residual already above target at the smallest grid point
    rng = np.random.default_rng(18)
    prob, plan = random_setup(rng, m=20, n=5, M=4, noise=2.0)
    tiny_sigma2 = 1e-12
    ctx = SelectorContext.from_history(prob, plan, [1, 2], sigma2=tiny_sigma2,
                                       gamma=4.0, grid=GridSpec(1e-8, 1e2, 20))
    res = sdp_select(ctx)
    assert res.flag == "no_crossing"
    assert res.lam_eff == pytest.approx(1e-8)


def test_sdp_residual_monotone_on_grid():
    # empirical audit justifying bisection
    rng = np.random.default_rng(19)
    prob, plan = random_setup(rng, m=30, n=6, M=5, noise=0.2)
    ctx = SelectorContext.from_history(prob, plan, [4, 2, 5],
                                       grid=GridSpec(1e-8, 1e3, 40))
    vals = [ctx.residual_sq(lam) for lam in ctx.grid.values()]
    diffs = np.diff(vals)
    assert np.all(diffs >= -1e-12 * np.maximum(vals[:-1], 1.0))


def test_sdp_requires_sigma2_and_gamma():
    ctx, _ = identity_context(grid=GridSpec(1e-4, 1e2, 10))
    ctx.sigma2 = None
    with pytest.raises(InvalidArgumentError):
        sdp_select(ctx)
    ctx.sigma2 = 0.01
    ctx.gamma = 1.0
    with pytest.raises(InvalidArgumentError):
        sdp_select(ctx)


# ---------------------------------------------------------------------------
# select_lambda


def test_select_lambda_scalar_argmin():
    # analytic minimizer of the scalar predictive-risk objective:
    # lam* = sigma2 n / (||b||^2 - sigma2 n)
    sigma2 = 0.04
    ctx, b = identity_context(sigma2=sigma2,
                              grid=GridSpec(1e-4, 1e2, 400))
    n = b.size
    B = float(b @ b)
    lam_star = sigma2 * n / (B - sigma2 * n)
    res = select_lambda("supre", ctx, refine_rounds=8)
    assert abs(res.lam_eff - lam_star) <= 0.01 * lam_star


def test_select_lambda_single_point_grid():
    ctx, _ = identity_context(grid=GridSpec(0.5, 0.5, 1))
    res = select_lambda("supre", ctx)
    assert res.lam_eff == 0.5


def test_select_lambda_all_failed():
    rng = np.random.default_rng(20)
    n = 4
    A = rng.standard_normal((4, 4))
    prob = InverseProblem(A=DenseOperator(A), b=rng.standard_normal(4),
                          L=IdentityOperator(n))
    plan = make_block_partition(4, 1)
    # at machine-zero lambdas the full-rank block drives the sgcv
    # denominator under the guard everywhere
    ctx = SelectorContext.from_history(prob, plan, [1],
                                       grid=GridSpec(1e-18, 1e-16, 5))
    with pytest.raises(SelectionFailedError):
        select_lambda("sgcv", ctx)


def test_sgcv_beats_fixed_initial_guess():
    # one epoch on a mid-size smoothing problem: adaptive sgcv ends with a
    # lower reconstruction error than keeping the initial parameter 0.1
    prob = gen_test_problem(TestProblemSpec(name="gravity", n=200,
                                            noise_level=0.01, seed=7))
    plan = make_block_partition(200, 10)
    adaptive = run(prob, plan, "stik", epochs=1,
                   selector=AdaptiveSelector("sgcv", seed=3, initial=0.1))
    fixed = run(prob, plan, "stik", epochs=1,
                selector=FixedIncrement(0.1 / 10))
    assert adaptive.records[-1].relerr < fixed.records[-1].relerr


# ---------------------------------------------------------------------------
# full-data criteria


def test_full_data_dp_residual_at_target():
    prob = gen_test_problem(TestProblemSpec(name="gravity", n=100,
                                            sigma2=0.01, seed=23))
    lam = full_data_select("dp", prob, gamma=4.0)
    x = tikhonov_direct(prob, lam)
    res = np.linalg.norm(prob.A.to_dense() @ x - prob.b) ** 2
    target = 4.0 * 0.01 * 100
    assert abs(res - target) <= 0.01 * target


def test_full_data_opt_noiseless_picks_grid_min():
    prob = gen_test_problem(TestProblemSpec(name="gravity", n=50, seed=2))
    grid = GridSpec(1e-6, 1e2, 30)
    assert full_data_select("opt", prob, grid) == pytest.approx(1e-6)


def test_full_data_requires_inputs():
    prob = gen_test_problem(TestProblemSpec(name="gravity", n=30, seed=2))
    with pytest.raises(InvalidArgumentError):
        full_data_select("dp", prob)  # no sigma2 anywhere
    prob2 = InverseProblem(A=prob.A, b=prob.b, L=prob.L, sigma2=0.01)
    with pytest.raises(InvalidArgumentError):
        full_data_select("opt", prob2)  # no x_true


def test_full_data_gravity_lambda_opt_scale():
    # the optimal parameter for gravity at n=1000 and 1% noise sits around
    # 0.02; a fresh realization must land within +-50%
    prob = gen_test_problem(TestProblemSpec(name="gravity", n=1000,
                                            noise_level=0.01, seed=77))
    lam_opt = full_data_select("opt", prob, GridSpec(1e-4, 1.0, 120))
    assert 0.0098 <= lam_opt <= 0.0294


# ---------------------------------------------------------------------------
# selector positivity invariant


def test_selectors_keep_cumulative_positive():
    prob = gen_test_problem(TestProblemSpec(name="prolate", n=60,
                                            sigma2=0.01, seed=5))
    plan = make_block_partition(60, 6, strategy="random_cyclic", seed=9)
    for method in ("sdp", "supre", "sgcv"):
        sel = AdaptiveSelector(method, sigma2=0.01, seed=1)
        result = run(prob, plan, "stik", epochs=4, selector=sel)
        lam_cum = 0.0
        for rec in result.records:
            assert lam_cum + rec.Lambda > 0
            lam_cum += rec.Lambda
