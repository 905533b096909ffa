"""Per-block regularization parameter selection.

Before step k the cumulative parameter lambda_prev = sum_{i<k} Lambda_i is
fixed; the selectors search over the *effective* parameter
lam_eff = lambda_prev + Lambda_k and report the increment
Lambda_k = lam_eff - lambda_prev. Candidate iterates x_k(lam_eff) are the
solutions the solver in use would produce at that parameter: for the full
sampled-Tikhonov iteration that is

    x_k(lam) = (lam L^T L + sum_{i<=k} A_i^T A_i)^{-1} sum_{i<=k} A_i^T b_i

(sums over the visited blocks, with multiplicity), and for the
limited-memory methods it is the would-be next iterate of that method.

Three sampled rules choose Lambda_k from the current block's residual:

* sdp    match the block residual to gamma * sigma2 * ell (bisection)
* supre  minimize ||r_k(lam)||^2 + 2 sigma2 t(lam) - sigma2 * ell
* sgcv   minimize ell ||r_k(lam)||^2 / (ell - t(lam))^2

where t(lam) is the trace of the block influence matrix, computed exactly
(ell solves) or by a Hutchinson estimate with Rademacher probes. The
full-data counterparts (dp/upre/gcv/opt) are provided for comparison runs.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .exceptions import (InvalidArgumentError, MaxIterationsError,
                         NumericalBreakdownError, SelectionFailedError,
                         UndefinedObjectiveError)
from .linops import RowBlockView
from .solvers import tikhonov_direct

GOLDEN = (math.sqrt(5) - 1) / 2
SGCV_DENOM_GUARD = 1e-8


@dataclass(frozen=True)
class GridSpec:
    """Log-spaced search grid over the effective parameter."""

    min: float
    max: float
    points: int = 40

    def __post_init__(self):
        if self.min <= 0 or self.max < self.min or self.points < 1:
            raise InvalidArgumentError(f"bad grid spec {self}")

    def values(self):
        if self.points == 1:
            return np.array([self.min])
        return np.logspace(np.log10(self.min), np.log10(self.max), self.points)


def operator_norm_sq(A, iters=30, seed=0):
    """Power-iteration estimate of ||A||_2^2 (largest eigenvalue of A^T A)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    v = rng.standard_normal(A.ncols)
    v /= np.linalg.norm(v)
    est = 1.0
    for _ in range(iters):
        w = A.apply_adjoint(A.apply(v))
        est = np.linalg.norm(w)
        if est == 0:
            return 0.0
        v = w / est
    return float(est)


def default_grid(A, points=40):
    """40 log-spaced points spanning [1e-8, 1e2] times an ||A||_2^2 estimate."""
    scale = operator_norm_sq(A)
    if scale == 0:
        scale = 1.0
    return GridSpec(1e-8 * scale, 1e2 * scale, points)


def rademacher(shape, rng):
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def hutchinson_trace(apply_fn, dim, n_probes, rng):
    """Mean of v^T apply_fn(v) over Rademacher probes v; unbiased for the
    trace of the underlying matrix."""
    total = 0.0
    for _ in range(n_probes):
        v = rademacher(dim, rng)
        total += float(v @ apply_fn(v))
    return total / n_probes


@dataclass
class SelectionResult:
    Lambda: float
    lam_eff: float
    objective: float
    n_evals: int
    method: str
    flag: str = None
    proposed: float = None  # raw per-block solution before any averaging


class SelectorContext:
    """Everything needed to evaluate candidate iterates, block residuals,
    and trace terms at trial effective parameters for the current step.

    Build with :meth:`from_solver` during a run, or :meth:`from_history`
    to stand at an arbitrary point of a full-curvature iteration (history
    accumulators are summed in sorted block order, so objectives depend
    only on the multiset of previously visited blocks).
    """

    def __init__(self, *, block_op, b_blk, lambda_prev, visits=1, grid=None,
                 sigma2=None, gamma=4.0, trace_mode="exact", probes=None,
                 full_state=None, solver=None, eval_tol=None, eval_maxit=None):
        self.block_op = block_op
        self.b_blk = np.asarray(b_blk, dtype=np.float64)
        self.ell = self.b_blk.shape[0]
        self.lambda_prev = float(lambda_prev)
        self.visits = int(visits)
        self.grid = grid
        self.sigma2 = sigma2
        self.gamma = gamma
        self.trace_mode = trace_mode
        self.probes = probes
        self._full = full_state          # (Gk, hk, LTL) including current block
        self._solver = solver            # limited-memory solver, or None
        self.eval_tol = eval_tol         # per-candidate LSQR budget override
        self.eval_maxit = eval_maxit
        self._block_dense = None
        self._cho_cache = {}
        self.n_evals = 0

    # -- constructors -----------------------------------------------------

    @classmethod
    def from_solver(cls, solver, block, b_blk, visits=1, **cfg):
        block_op = block.operator() if isinstance(block, RowBlockView) else block
        if solver.limited:
            return cls(block_op=block_op, b_blk=b_blk,
                       lambda_prev=solver.lambda_cum, visits=visits,
                       solver=solver, **cfg)
        if solver.method != "stik":
            raise InvalidArgumentError(
                "parameter selection applies to the stik family")
        A = (block.dense() if isinstance(block, RowBlockView)
             else block_op.to_dense())
        A = np.asarray(A, dtype=np.float64)
        Gk = solver.G + A.T @ A
        Gk = 0.5 * (Gk + Gk.T)
        hk = solver.h + A.T @ np.asarray(b_blk, dtype=np.float64)
        ctx = cls(block_op=block_op, b_blk=b_blk,
                  lambda_prev=solver.lambda_cum, visits=visits,
                  full_state=(Gk, hk, solver.LTL), **cfg)
        ctx._block_dense = A
        return ctx

    @classmethod
    def from_history(cls, problem, plan, history, *, lambda_prev=0.0, **cfg):
        """Full-curvature context at step k = len(history); the last entry
        of ``history`` is the current block (1-based indices)."""
        if not history:
            raise InvalidArgumentError("history must contain at least one block")
        Amat = problem.A.to_dense()
        Lmat = problem.L.to_dense()
        current = history[-1]
        n = problem.n
        G = np.zeros((n, n))
        h = np.zeros(n)
        for tau in sorted(history):
            rows = plan.block_rows(tau)
            Ai = Amat[rows]
            G += Ai.T @ Ai
            h += Ai.T @ problem.b[rows]
        G = 0.5 * (G + G.T)
        rows = plan.block_rows(current)
        A = Amat[rows]
        ctx = cls(block_op=problem.A.row_block(rows).operator(),
                  b_blk=problem.b[rows], lambda_prev=lambda_prev,
                  visits=history.count(current),
                  full_state=(G, h, 0.5 * (Lmat.T @ Lmat + (Lmat.T @ Lmat).T)),
                  **cfg)
        ctx._block_dense = A
        return ctx

    # -- low-level solves --------------------------------------------------

    def _require_positive(self, lam_eff):
        if self._full is not None and lam_eff <= 0:
            raise InvalidArgumentError("effective parameter must be positive")
        if self._solver is not None and lam_eff < 0:
            raise InvalidArgumentError("effective parameter must be >= 0")

    def _cho(self, lam_eff):
        cho = self._cho_cache.get(lam_eff)
        if cho is None:
            Gk, _, LTL = self._full
            H = lam_eff * LTL + Gk
            try:
                cho = sla.cho_factor(H, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise NumericalBreakdownError(
                    f"candidate system indefinite at lam={lam_eff}") from exc
            if len(self._cho_cache) >= 4:
                self._cho_cache.pop(next(iter(self._cho_cache)))
            self._cho_cache[lam_eff] = cho
        return cho

    def candidate_solve(self, lam_eff):
        """x_k(lam_eff): the step-k iterate at the trial parameter."""
        self._require_positive(lam_eff)
        self.n_evals += 1
        if self._full is not None:
            _, hk, _ = self._full
            return sla.cho_solve(self._cho(lam_eff), hk, check_finite=False)
        return self._solver.candidate_iterate(self.block_op, self.b_blk,
                                              lam_eff, tol=self.eval_tol,
                                              maxit=self.eval_maxit)

    def residual_sq(self, lam_eff):
        """Squared block residual at the candidate iterate."""
        r = self.block_op.apply(self.candidate_solve(lam_eff)) - self.b_blk
        return float(r @ r)

    def trace_term(self, lam_eff):
        """trace of the block influence matrix
        W^T A C_k(lam) W = visits * A_k B(lam) A_k^T with B the method's
        curvature inverse; exact via ell solves or a Hutchinson estimate."""
        self._require_positive(lam_eff)
        if self.trace_mode == "exact":
            if self._full is not None:
                A = self._block_dense
                Z = sla.cho_solve(self._cho(lam_eff), A.T, check_finite=False)
                return self.visits * float(np.sum(A * Z.T))
            total = 0.0
            eye = np.eye(self.ell)
            for j in range(self.ell):
                z = self._solver.curvature_solve(self.block_op, eye[j],
                                                 lam_eff, tol=self.eval_tol,
                                                 maxit=self.eval_maxit)
                total += float(self.block_op.apply(z)[j])
            return self.visits * total
        if self.trace_mode != "hutchinson":
            raise InvalidArgumentError(
                f"unknown trace mode {self.trace_mode!r}")
        if self.probes is None:
            raise InvalidArgumentError("hutchinson mode needs probes")
        total = 0.0
        for v in self.probes:
            if self._full is not None:
                w = self._block_dense.T @ v
                z = sla.cho_solve(self._cho(lam_eff), w, check_finite=False)
                total += float(w @ z)
            else:
                z = self._solver.curvature_solve(self.block_op, v, lam_eff,
                                                 tol=self.eval_tol,
                                                 maxit=self.eval_maxit)
                total += float(v @ self.block_op.apply(z))
        return self.visits * total / len(self.probes)

    def loo_diag(self, lam_eff):
        """t_jj = e_j^T A_k B(lam) A_k^T e_j for each block row j (the
        Sherman-Morrison leave-one-out diagonal; no visit multiplicity)."""
        self._require_positive(lam_eff)
        if self._full is not None:
            A = self._block_dense
            Z = sla.cho_solve(self._cho(lam_eff), A.T, check_finite=False)
            return np.sum(A * Z.T, axis=1)
        t = np.empty(self.ell)
        eye = np.eye(self.ell)
        for j in range(self.ell):
            z = self._solver.curvature_solve(self.block_op, eye[j], lam_eff,
                                             tol=self.eval_tol,
                                             maxit=self.eval_maxit)
            t[j] = self.block_op.apply(z)[j]
        return t

    def resolved_grid(self):
        if self.grid is None:
            raise InvalidArgumentError("context has no search grid")
        return self.grid


# ---------------------------------------------------------------------------
# objectives


def candidate_solve(ctx, lam_eff):
    return ctx.candidate_solve(lam_eff)


def trace_term(ctx, lam_eff):
    return ctx.trace_term(lam_eff)


def supre_objective(ctx, lam_eff):
    """Unbiased estimate of the sampled predictive risk at lam_eff."""
    if ctx.sigma2 is None:
        raise InvalidArgumentError("supre needs sigma2")
    res = ctx.residual_sq(lam_eff)
    if ctx.sigma2 == 0.0:
        return res
    return (res + 2.0 * ctx.sigma2 * ctx.trace_term(lam_eff)
            - ctx.sigma2 * ctx.ell)


def sgcv_objective(ctx, lam_eff):
    """Sampled generalized cross-validation objective at lam_eff."""
    t = ctx.trace_term(lam_eff)
    denom = ctx.ell - t
    if abs(denom) < SGCV_DENOM_GUARD * ctx.ell:
        raise UndefinedObjectiveError(
            f"sgcv denominator vanishes at lam={lam_eff} (trace={t})")
    return ctx.ell * ctx.residual_sq(lam_eff) / denom**2


def loo_cv_value(ctx, lam_eff):
    """Leave-one-out cross-validation value
    (1/ell) || D(lam) (b_k - A_k x_k(lam)) ||^2 with
    D = diag(1 / (1 - t_jj)); equals brute-force removal of each block row."""
    t = ctx.loo_diag(lam_eff)
    if np.any(np.abs(1.0 - t) < 1e-14):
        raise UndefinedObjectiveError("leave-one-out factor 1 - t_jj vanished")
    r = ctx.b_blk - ctx.block_op.apply(ctx.candidate_solve(lam_eff))
    scaled = r / (1.0 - t)
    return float(scaled @ scaled) / ctx.ell


_OBJECTIVES = {"supre": supre_objective, "sgcv": sgcv_objective}


# ---------------------------------------------------------------------------
# searches


def sdp_select(ctx):
    """Sampled discrepancy principle: bisect the effective parameter until
    the block residual matches gamma * sigma2 * ell within 1%; returns the
    boundary of the grid with flag ``no_crossing`` when the target is not
    bracketed."""
    if ctx.sigma2 is None:
        raise InvalidArgumentError("sdp needs sigma2")
    if ctx.gamma <= 1:
        raise InvalidArgumentError("sdp safety factor gamma must exceed 1")
    target = ctx.gamma * ctx.sigma2 * ctx.ell
    grid = ctx.resolved_grid().values()
    n_evals = 0

    def res(lam):
        nonlocal n_evals
        n_evals += 1
        return ctx.residual_sq(lam)

    # smallest grid point that evaluates within budget (LSQR can stall at
    # near-zero regularization with matrix-free operators)
    lo = r_lo = None
    for g in grid:
        try:
            r_lo = res(float(g))
            lo = float(g)
            break
        except (MaxIterationsError, NumericalBreakdownError):
            continue
    if lo is None:
        raise SelectionFailedError("sdp: residual undefined on the whole grid")
    hi = float(grid[-1])
    if r_lo > target:
        return SelectionResult(Lambda=lo - ctx.lambda_prev, lam_eff=lo,
                               objective=r_lo, n_evals=n_evals,
                               method="sdp", flag="no_crossing")
    r_hi = res(hi) if hi > lo else r_lo
    if r_hi < target:
        return SelectionResult(Lambda=hi - ctx.lambda_prev, lam_eff=hi,
                               objective=r_hi, n_evals=n_evals,
                               method="sdp", flag="no_crossing")
    lam, r_mid = lo, r_lo
    for _ in range(100):
        lam = math.sqrt(lo * hi)
        try:
            r_mid = res(lam)
        except (MaxIterationsError, NumericalBreakdownError):
            lo = lam  # stalled: under-regularized side
            continue
        if abs(r_mid - target) <= 0.01 * target:
            break
        if r_mid < target:
            lo = lam
        else:
            hi = lam
    return SelectionResult(Lambda=lam - ctx.lambda_prev, lam_eff=lam,
                           objective=r_mid, n_evals=n_evals, method="sdp")


def _golden_refine(fn, lo, hi, best, rounds):
    """A few golden-section contractions of [lo, hi] in log space around a
    minimizer; returns the best (lam, value) seen."""
    a, b = math.log(lo), math.log(hi)
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1, f2 = fn(math.exp(x1)), fn(math.exp(x2))
    cand = [(f1, math.exp(x1)), (f2, math.exp(x2)), (best[1], best[0])]
    for _ in range(rounds):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = fn(math.exp(x1))
            cand.append((f1, math.exp(x1)))
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = fn(math.exp(x2))
            cand.append((f2, math.exp(x2)))
    fbest, lbest = min(cand, key=lambda t: t[0])
    return lbest, fbest


def select_lambda(method, ctx, refine_rounds=3):
    """Grid search plus golden-section refinement of a sampled objective
    (``supre`` or ``sgcv``). Grid points whose objective is undefined are
    skipped; if every point fails a :class:`SelectionFailedError` is raised.
    """
    if method not in _OBJECTIVES:
        raise InvalidArgumentError(f"unknown selection method {method!r}")
    objective = _OBJECTIVES[method]
    grid = ctx.resolved_grid().values()
    n_evals = 0
    values = {}

    def safe_eval(lam):
        nonlocal n_evals
        n_evals += 1
        try:
            val = objective(ctx, float(lam))
        except (UndefinedObjectiveError, NumericalBreakdownError,
                MaxIterationsError):
            return None
        if not np.isfinite(val):
            return None
        values[float(lam)] = val
        return val

    grid_vals = [safe_eval(lam) for lam in grid]
    usable = [(v, i) for i, v in enumerate(grid_vals) if v is not None]
    if not usable:
        raise SelectionFailedError(
            f"{method}: objective undefined on the whole grid")
    best_val, best_i = min(usable)
    lam_best = float(grid[best_i])
    if len(grid) > 1:
        lo = float(grid[max(best_i - 1, 0)])
        hi = float(grid[min(best_i + 1, len(grid) - 1)])
        if lo < hi:
            def fn(lam):
                v = safe_eval(lam)
                return math.inf if v is None else v
            lam_best, best_val = _golden_refine(
                fn, lo, hi, (lam_best, best_val), refine_rounds)
    return SelectionResult(Lambda=lam_best - ctx.lambda_prev,
                           lam_eff=lam_best, objective=best_val,
                           n_evals=n_evals, method=method)


# ---------------------------------------------------------------------------
# run-loop selector objects


class FixedIncrement:
    """Constant per-step increment Lambda_k = value."""

    def __init__(self, value):
        self.value = float(value)

    def choose(self, solver, block, b_blk, visits, M):
        return SelectionResult(Lambda=self.value,
                               lam_eff=solver.lambda_cum + self.value,
                               objective=math.nan, n_evals=0, method="fixed")


class AdaptiveSelector:
    """Per-step selection with one of the sampled rules.

    Each step's rule produces a raw per-block solution for the effective
    parameter; committing those directly makes the trajectory inherit the
    full block-to-block dispersion of the criteria (single blocks are
    noisy), so the selector commits the running mean of the epoch-scaled
    preferences (M/k) * lam_hat instead. The mean is an unweighted average
    over steps and settles as data accumulates; the raw solution is kept
    in ``SelectionResult.proposed``.

    ``initial`` (optional) seeds the mean with an initial guess for the
    epoch-scaled parameter and skips selection on the first step. In
    hutchinson mode one batch of Rademacher probes is drawn per step and
    shared across all candidate parameters of that step's search.
    """

    def __init__(self, method, *, grid=None, sigma2=None, gamma=4.0,
                 trace_mode="exact", n_probes=1, seed=0, initial=None,
                 refine_rounds=3, eval_tol=1e-6, eval_maxit=500):
        if method not in ("sdp", "supre", "sgcv"):
            raise InvalidArgumentError(f"unknown selector method {method!r}")
        self.method = method
        self.grid = grid
        self.sigma2 = sigma2
        self.gamma = gamma
        self.trace_mode = trace_mode
        self.n_probes = n_probes
        self.initial = initial
        self.refine_rounds = refine_rounds
        # budget per candidate evaluation with limited-memory solvers;
        # candidates whose LSQR stalls are skipped by the search
        self.eval_tol = eval_tol
        self.eval_maxit = eval_maxit
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._pref_sum = 0.0
        self._pref_count = 0

    def _commit(self, k, M, lambda_prev, raw):
        """Fold the epoch-scaled preference into the running mean and turn
        it back into this step's increment."""
        self._pref_sum += raw
        self._pref_count += 1
        mean = self._pref_sum / self._pref_count
        target_total = (k / M) * mean
        return mean, target_total - lambda_prev

    def choose(self, solver, block, b_blk, visits, M):
        k = solver.k + 1
        if k == 1 and self.initial is not None:
            mean, Lambda = self._commit(k, M, solver.lambda_cum,
                                        float(self.initial))
            return SelectionResult(Lambda=Lambda,
                                   lam_eff=solver.lambda_cum + Lambda,
                                   objective=math.nan, n_evals=0,
                                   method=f"{self.method}:initial")
        if self.grid is None:
            self.grid = default_grid(solver.problem.A)
        probes = None
        if self.trace_mode == "hutchinson":
            probes = rademacher((self.n_probes, len(b_blk)), self._rng)
        ctx = SelectorContext.from_solver(
            solver, block, b_blk, visits=visits, grid=self.grid,
            sigma2=self.sigma2, gamma=self.gamma, trace_mode=self.trace_mode,
            probes=probes, eval_tol=self.eval_tol, eval_maxit=self.eval_maxit)
        if self.method == "sdp":
            raw = sdp_select(ctx)
        else:
            raw = select_lambda(self.method, ctx, self.refine_rounds)
        _, Lambda = self._commit(k, M, solver.lambda_cum,
                                 (M / k) * raw.lam_eff)
        return SelectionResult(Lambda=Lambda,
                               lam_eff=solver.lambda_cum + Lambda,
                               objective=raw.objective, n_evals=raw.n_evals,
                               method=raw.method, flag=raw.flag,
                               proposed=raw.lam_eff)


# ---------------------------------------------------------------------------
# full-data criteria


def full_data_select(method, problem, grid=None, *, gamma=4.0, sigma2=None,
                     refine_rounds=3):
    """Classical whole-problem criteria for comparison lines.

    dp: bisect ||A x(lam) - b||^2 = gamma * sigma2 * m.
    upre / gcv: grid-plus-golden minimization of the standard objectives.
    opt: grid argmin of ||x(lam) - x_true|| (needs x_true).
    Returns the selected lam.
    """
    if method not in ("dp", "upre", "gcv", "opt"):
        raise InvalidArgumentError(f"unknown full-data method {method!r}")
    if grid is None:
        grid = default_grid(problem.A)
    sigma2 = problem.sigma2 if sigma2 is None else sigma2
    if method in ("dp", "upre") and sigma2 is None:
        raise InvalidArgumentError(f"{method} needs sigma2")
    if method == "opt" and problem.x_true is None:
        raise InvalidArgumentError("opt needs x_true")

    A = problem.A.to_dense()
    L = problem.L.to_dense()
    b = problem.b
    m = A.shape[0]
    AtA = A.T @ A
    LtL = L.T @ L
    Atb = A.T @ b

    def solve(lam):
        H = AtA + lam * LtL
        return sla.cho_solve(sla.cho_factor(0.5 * (H + H.T),
                                            check_finite=False),
                             Atb, check_finite=False)

    def res_sq(lam):
        r = A @ solve(lam) - b
        return float(r @ r)

    def influence_trace(lam):
        H = AtA + lam * LtL
        Z = sla.cho_solve(sla.cho_factor(0.5 * (H + H.T), check_finite=False),
                          A.T, check_finite=False)
        return float(np.sum(A * Z.T))

    vals = grid.values()
    if method == "opt":
        errs = [np.linalg.norm(solve(lam) - problem.x_true) for lam in vals]
        return float(vals[int(np.argmin(errs))])

    if method == "dp":
        target = gamma * sigma2 * m
        lo, hi = float(vals[0]), float(vals[-1])
        if res_sq(lo) > target:
            return lo
        if res_sq(hi) < target:
            return hi
        lam = lo
        for _ in range(100):
            lam = math.sqrt(lo * hi)
            r = res_sq(lam)
            if abs(r - target) <= 0.01 * target:
                break
            if r < target:
                lo = lam
            else:
                hi = lam
        return lam

    if method == "upre":
        def fn(lam):
            return res_sq(lam) + 2 * sigma2 * influence_trace(lam) - sigma2 * m
    else:
        def fn(lam):
            t = influence_trace(lam)
            denom = m - t
            if abs(denom) < SGCV_DENOM_GUARD * m:
                return math.inf
            return m * res_sq(lam) / denom**2

    fvals = [fn(float(lam)) for lam in vals]
    best_i = int(np.argmin(fvals))
    lam_best, best_val = float(vals[best_i]), fvals[best_i]
    if len(vals) > 1:
        lo = float(vals[max(best_i - 1, 0)])
        hi = float(vals[min(best_i + 1, len(vals) - 1)])
        if lo < hi:
            lam_best, best_val = _golden_refine(
                fn, lo, hi, (lam_best, best_val), refine_rounds)
    return lam_best
