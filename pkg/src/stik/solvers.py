"""Sampled iterative solvers for Tikhonov-regularized least squares.

Five iteration families over row blocks (A_k, b_k) of a problem
``min ||Ax - b||^2 + lambda ||Lx||^2``, all of the common form
``x_k = x_{k-1} - B_k g_k`` with gradient
``g_k = A_k^T (A_k x_{k-1} - b_k) + Lambda_k L^T L x_{k-1}``:

=========  ==================================================================
method     curvature B_k^{-1}
=========  ==================================================================
rrls       lambda L^T L + sum_i A_i^T A_i          (lambda fixed, Lambda_k=0)
stik       sum_i Lambda_i L^T L + sum_i A_i^T A_i
sg         sum_i Lambda_i L^T L + I
sbk        sum_i Lambda_i L^T L + A_k^T A_k
slimtik    sum_i Lambda_i L^T L + A_k^T A_k + M_k^T M_k,
           M_k = the last r blocks (limited memory)
=========  ==================================================================

rrls/stik maintain the full curvature matrix with a Cholesky factor and
are meant for problems whose unknown count allows an n x n matrix. The
limited-memory methods never form an n x n matrix; their steps solve a
stacked least-squares problem with :func:`lsqr_solve`, so they work with
matrix-free operators.
"""

import math
import time
import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from ._kernels import chol_update
from .exceptions import (InvalidArgumentError, MaxIterationsError,
                         NumericalBreakdownError, RejectedIncrementError,
                         SingularSystemError, StikError)
from .linops import (DenseOperator, IdentityOperator, RowBlockView,
                     ScaledOperator, StackedOperator, row_block)
from .problems import relative_error

METHODS = ("rrls", "stik", "sg", "sbk", "slimtik")

RANK_UPDATE_MAX_BLOCK = 32
LAMBDA_CLIP_FACTOR = 1e-12


# ---------------------------------------------------------------------------
# direct solver and LSQR


def tikhonov_direct(problem, lam):
    """Dense Tikhonov solution x(lam) = (A^T A + lam L^T L)^{-1} A^T b.

    Solved by Cholesky on the normal equations with iterative refinement;
    the returned x satisfies ||A^T A x + lam L^T L x - A^T b|| <
    1e-10 ||A^T b||. lam = 0 requires A to have full column rank.
    """
    if lam < 0:
        raise InvalidArgumentError("lam must be >= 0")
    A = problem.A.to_dense()
    L = problem.L.to_dense()
    H = A.T @ A + lam * (L.T @ L)
    H = 0.5 * (H + H.T)
    g = A.T @ problem.b
    try:
        cho = sla.cho_factor(H, check_finite=False)
    except np.linalg.LinAlgError as exc:
        if lam == 0:
            raise SingularSystemError(
                "lam = 0 with a rank-deficient operator") from exc
        raise NumericalBreakdownError(f"Cholesky failed at lam={lam}") from exc
    x = sla.cho_solve(cho, g, check_finite=False)
    gnorm = np.linalg.norm(g)
    for _ in range(2):
        res = g - H @ x
        if np.linalg.norm(res) <= 1e-10 * gnorm:
            break
        x = x + sla.cho_solve(cho, res, check_finite=False)
    else:
        if np.linalg.norm(g - H @ x) > 1e-10 * gnorm:
            msg = "normal equations could not be solved to 1e-10"
            if lam == 0:
                raise SingularSystemError(msg)
            raise NumericalBreakdownError(msg)
    return x


@dataclass
class LSQRResult:
    x: np.ndarray
    converged: bool
    iterations: int
    normar: float  # ||A^T (A x - rhs)||


def _sym_ortho(a, b):
    """Stable Givens rotation (c, s, r) with [c s; -s c] [a; b] = [r; 0]."""
    if b == 0:
        return math.copysign(1.0, a), 0.0, abs(a)
    if a == 0:
        return 0.0, math.copysign(1.0, b), abs(b)
    if abs(b) > abs(a):
        tau = a / b
        s = math.copysign(1.0, b) / math.sqrt(1 + tau * tau)
        c = s * tau
        r = b / s
    else:
        tau = b / a
        c = math.copysign(1.0, a) / math.sqrt(1 + tau * tau)
        s = c * tau
        r = a / c
    return c, s, r


def lsqr_solve(op, rhs, tol=1e-10, maxit=None):
    """Golub-Kahan LSQR for ``min ||op x - rhs||``.

    Stops when ||op^T (op x - rhs)|| <= tol * ||op^T rhs|| (verified
    explicitly, not just via the recurrence estimate). If ``maxit``
    (default 2 * ncols) is exhausted first, the best iterate is returned
    with ``converged=False``.
    """
    if tol <= 0:
        raise InvalidArgumentError("tol must be positive")
    n = op.ncols
    if maxit is None:
        maxit = 2 * n
    x = np.zeros(n)

    beta = np.linalg.norm(rhs)
    if beta == 0:
        return LSQRResult(x, True, 0, 0.0)
    u = rhs / beta
    v = op.apply_adjoint(u)
    alfa = np.linalg.norm(v)
    target = tol * alfa * beta  # ||op^T rhs|| = alfa * beta
    if alfa == 0:
        return LSQRResult(x, True, 0, 0.0)
    v = v / alfa
    w = v.copy()
    rhobar = alfa
    phibar = beta

    def true_normar(xc):
        return np.linalg.norm(op.apply_adjoint(op.apply(xc) - rhs))

    check_level = target
    itn = 0
    while itn < maxit:
        itn += 1
        u = op.apply(v) - alfa * u
        beta = np.linalg.norm(u)
        if beta > 0:
            u = u / beta
            v = op.apply_adjoint(u) - beta * v
            alfa = np.linalg.norm(v)
            if alfa > 0:
                v = v / alfa
        cs, sn, rho = _sym_ortho(rhobar, beta)
        theta = sn * alfa
        rhobar = -cs * alfa
        phi = cs * phibar
        phibar = sn * phibar
        x = x + (phi / rho) * w
        w = v - (theta / rho) * w
        normar_est = alfa * abs(sn * phi)
        if normar_est <= check_level or beta == 0 or alfa == 0:
            normar = true_normar(x)
            if normar <= target:
                return LSQRResult(x, True, itn, float(normar))
            if beta == 0 or alfa == 0:
                # exact breakdown: the Krylov space is exhausted
                return LSQRResult(x, normar <= target, itn, float(normar))
            check_level = min(check_level, normar_est) / 2
    return LSQRResult(x, False, itn, float(true_normar(x)))


# ---------------------------------------------------------------------------
# shared helpers


def _block_pieces(block):
    """(operator, dense-or-None) view of a step's row block."""
    if isinstance(block, RowBlockView):
        op = block.operator()
    else:
        op = block
    dense = op.matrix if isinstance(op, DenseOperator) else None
    return op, dense


def _ltl_dense(L):
    mat = L.to_dense()
    gram = mat.T @ mat
    return 0.5 * (gram + gram.T)


class _FullCurvatureSolver:
    """Shared machinery for rrls and stik: dense Gram accumulators and an
    incrementally maintained upper Cholesky factor of the step matrix."""

    limited = False

    def __init__(self, problem, x0=None):
        self.problem = problem
        self.n = problem.n
        self.L = problem.L
        self.LTL = _ltl_dense(problem.L)
        self.x = (np.zeros(self.n) if x0 is None
                  else np.asarray(x0, dtype=np.float64).copy())
        if self.x.shape != (self.n,):
            raise InvalidArgumentError("x0 has the wrong length")
        self.k = 0
        self.G = np.zeros((self.n, self.n))  # sum_i A_i^T A_i
        self.h = np.zeros(self.n)            # sum_i A_i^T b_i
        self._R = None                       # upper factor of H_k

    @property
    def H(self):
        """Current step matrix B_k^{-1} (dense, symmetric)."""
        return self.lambda_total * self.LTL + self.G

    def _refactor(self):
        try:
            self._R = sla.cholesky(self.H, lower=False, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdownError(
                f"Cholesky factorization failed at step {self.k + 1}") from exc

    def _absorb_block(self, A_dense, lam_shift):
        """H <- H + lam_shift * L^T L + A^T A, keeping the factor current."""
        self.G += A_dense.T @ A_dense
        self.G = 0.5 * (self.G + self.G.T)
        ell = A_dense.shape[0]
        if (self._R is not None and lam_shift == 0.0
                and ell <= RANK_UPDATE_MAX_BLOCK):
            for i in range(ell):
                chol_update(self._R, A_dense[i].copy())
        else:
            self._refactor()

    def _solve(self, g):
        y = sla.solve_triangular(self._R, g, trans="T", lower=False,
                                 check_finite=False)
        return sla.solve_triangular(self._R, y, lower=False,
                                    check_finite=False)

    def _require_dense(self, block):
        op, dense = _block_pieces(block)
        if dense is None:
            if isinstance(block, RowBlockView):
                dense = block.dense()
            else:
                raise InvalidArgumentError(
                    f"{self.method} needs dense row blocks; "
                    "use a limited-memory method for matrix-free operators")
        return op, np.asarray(dense, dtype=np.float64)


class RrlsSolver(_FullCurvatureSolver):
    """Regularized recursive least squares: fixed regularization lambda,
    curvature accumulated over all visited blocks.

    After k steps the iterate solves
    ``min ||stacked_k (A x - b)||^2 + lam ||L (x - y0)||^2``; under
    (random) cyclic sampling with y0 = 0 the epoch-j iterate equals the
    Tikhonov solution at parameter lam / j.
    """

    method = "rrls"

    def __init__(self, problem, lam, y0=None):
        if lam <= 0:
            raise InvalidArgumentError("rrls requires lam > 0")
        super().__init__(problem, y0)
        self.lam = float(lam)
        self._refactor()

    @property
    def lambda_total(self):
        return self.lam

    @property
    def lambda_cum(self):
        return self.lam

    def step(self, block, b_blk, increment=0.0):
        if increment != 0.0:
            raise InvalidArgumentError("rrls has a fixed parameter")
        op, A = self._require_dense(block)
        b_blk = np.asarray(b_blk, dtype=np.float64)
        self._absorb_block(A, 0.0)
        g = A.T @ (A @ self.x - b_blk)
        self.x = self.x - self._solve(g)
        self.h += A.T @ b_blk
        self.k += 1


class StikSolver(_FullCurvatureSolver):
    """Sampled Tikhonov iteration: per-step increments Lambda_k accumulate
    into the regularization term, so the parameter can be adapted while
    iterating. After k steps the iterate solves
    ``min ||stacked_k (A x - b)||^2 + (sum_i Lambda_i) ||L x||^2``.
    """

    method = "stik"

    def __init__(self, problem, x0=None):
        super().__init__(problem, x0)
        self.lambda_cum = 0.0

    @property
    def lambda_total(self):
        return self.lambda_cum

    def step(self, block, b_blk, increment):
        new_lam = self.lambda_cum + increment
        if new_lam <= 0:
            raise RejectedIncrementError(
                f"increment {increment} would make the cumulative parameter "
                f"{new_lam} <= 0")
        op, A = self._require_dense(block)
        b_blk = np.asarray(b_blk, dtype=np.float64)
        g = A.T @ (A @ self.x - b_blk) + increment * (self.LTL @ self.x)
        self.lambda_cum = new_lam
        self._absorb_block(A, increment)
        self.x = self.x - self._solve(g)
        self.h += A.T @ b_blk
        self.k += 1


class _LimitedMemorySolver:
    """Shared machinery for sg/sbk/slimtik. Steps are computed through
    stacked least-squares solves, so no n x n matrix is ever formed and
    matrix-free operators work throughout."""

    limited = True

    def __init__(self, problem, x0=None, lsqr_tol=1e-10, lsqr_maxit=None):
        self.problem = problem
        self.n = problem.n
        self.L = problem.L
        self.x = (np.zeros(self.n) if x0 is None
                  else np.asarray(x0, dtype=np.float64).copy())
        if self.x.shape != (self.n,):
            raise InvalidArgumentError("x0 has the wrong length")
        self.k = 0
        self.lambda_cum = 0.0
        self.lsqr_tol = lsqr_tol
        self.lsqr_maxit = lsqr_maxit

    @property
    def lambda_total(self):
        return self.lambda_cum

    def _check_increment(self, increment):
        new_lam = self.lambda_cum + increment
        if new_lam < 0:
            raise RejectedIncrementError(
                f"increment {increment} would make the cumulative parameter "
                f"{new_lam} < 0")
        return new_lam

    def _lsqr(self, op, rhs, tol=None, maxit=None):
        res = lsqr_solve(op, rhs,
                         tol=self.lsqr_tol if tol is None else tol,
                         maxit=self.lsqr_maxit if maxit is None else maxit)
        if not res.converged:
            raise MaxIterationsError(
                f"step LSQR hit its iteration cap ({res.iterations})",
                best=res.x, iterations=res.iterations)
        return res.x

    def step(self, block, b_blk, increment):
        new_lam = self._check_increment(increment)
        op, _ = _block_pieces(block)
        b_blk = np.asarray(b_blk, dtype=np.float64)
        s = self._step_direction(op, b_blk, increment, new_lam)
        self.x = self.x - s
        self._after_step(op)
        self.lambda_cum = new_lam
        self.k += 1

    def candidate_iterate(self, block, b_blk, lam_eff, tol=None, maxit=None):
        """The iterate this method would produce at step k if the new
        cumulative parameter were ``lam_eff`` (state is not modified).
        ``tol``/``maxit`` override the step LSQR settings, so a parameter
        search can spend less per trial point than a committed step."""
        op, _ = _block_pieces(block)
        b_blk = np.asarray(b_blk, dtype=np.float64)
        increment = lam_eff - self.lambda_cum
        s = self._step_direction(op, b_blk, increment, lam_eff,
                                 tol=tol, maxit=maxit)
        return self.x - s

    def _after_step(self, op):
        pass


class SgSolver(_LimitedMemorySolver):
    """Sampled gradient method: curvature is the regularization term plus
    the identity, so each step costs one block product (plus a solve when
    L is not the identity)."""

    method = "sg"

    def _gradient(self, op, b_blk, increment):
        g = op.apply_adjoint(op.apply(self.x) - b_blk)
        if increment != 0.0:
            g = g + increment * self.L.apply_adjoint(self.L.apply(self.x))
        return g

    def _step_direction(self, op, b_blk, increment, new_lam, tol=None,
                        maxit=None):
        g = self._gradient(op, b_blk, increment)
        return self._curvature_apply_inv(g, new_lam, tol, maxit)

    def _curvature_apply_inv(self, g, lam, tol=None, maxit=None):
        if isinstance(self.L, IdentityOperator):
            return g / (1.0 + lam)
        if lam == 0.0:
            return g
        sys_op = StackedOperator([IdentityOperator(self.n),
                                  ScaledOperator(self.L, math.sqrt(lam))])
        rhs = np.concatenate([g, np.zeros(self.L.nrows)])
        return self._lsqr(sys_op, rhs, tol, maxit)

    def curvature_solve(self, block_op, w, lam_eff, tol=None, maxit=None):
        return self._curvature_apply_inv(block_op.apply_adjoint(w), lam_eff,
                                         tol, maxit)


class SbkSolver(_LimitedMemorySolver):
    """Sampled block Kaczmarz: curvature from the current block only."""

    method = "sbk"

    def _system(self, op, lam):
        if lam == 0.0:
            return op, op.nrows
        sys_op = StackedOperator([op, ScaledOperator(self.L, math.sqrt(lam))])
        return sys_op, op.nrows

    def _step_direction(self, op, b_blk, increment, new_lam, tol=None,
                        maxit=None):
        sys_op, _ = self._system(op, new_lam)
        rhs_top = op.apply(self.x) - b_blk
        if new_lam == 0.0:
            rhs = rhs_top
        else:
            reg_rhs = (increment / math.sqrt(new_lam)) * self.L.apply(self.x)
            rhs = np.concatenate([rhs_top, reg_rhs])
        return self._lsqr(sys_op, rhs, tol, maxit)

    def curvature_solve(self, block_op, w, lam_eff, tol=None, maxit=None):
        sys_op, ell = self._system(block_op, lam_eff)
        rhs = np.zeros(sys_op.nrows)
        rhs[:ell] = w
        return self._lsqr(sys_op, rhs, tol, maxit)


class SlimTikSolver(_LimitedMemorySolver):
    """Limited-memory sampled Tikhonov: like sbk but the stacked system
    additionally carries the last r blocks, interpolating between sbk
    (r = 0) and the full stik iteration (r >= k - 1)."""

    method = "slimtik"

    def __init__(self, problem, r, x0=None, lsqr_tol=1e-10, lsqr_maxit=None):
        if r < 0:
            raise InvalidArgumentError("memory parameter r must be >= 0")
        super().__init__(problem, x0, lsqr_tol, lsqr_maxit)
        self.r = int(r)
        self.memory = deque(maxlen=self.r)

    def _system(self, op, lam):
        ops = list(self.memory) + [op]
        if lam > 0.0:
            ops.append(ScaledOperator(self.L, math.sqrt(lam)))
        sys_op = StackedOperator(ops)
        mem_rows = sum(m.nrows for m in self.memory)
        return sys_op, mem_rows, op.nrows

    def _step_direction(self, op, b_blk, increment, new_lam, tol=None,
                        maxit=None):
        sys_op, mem_rows, ell = self._system(op, new_lam)
        rhs = np.zeros(sys_op.nrows)
        rhs[mem_rows:mem_rows + ell] = op.apply(self.x) - b_blk
        if new_lam > 0.0:
            rhs[mem_rows + ell:] = ((increment / math.sqrt(new_lam))
                                    * self.L.apply(self.x))
        return self._lsqr(sys_op, rhs, tol, maxit)

    def _after_step(self, op):
        if self.r > 0:
            self.memory.append(op)

    def curvature_solve(self, block_op, w, lam_eff, tol=None, maxit=None):
        sys_op, mem_rows, ell = self._system(block_op, lam_eff)
        rhs = np.zeros(sys_op.nrows)
        rhs[mem_rows:mem_rows + ell] = w
        return self._lsqr(sys_op, rhs, tol, maxit)


def make_solver(method, problem, *, lam=None, r=2, x0=None,
                lsqr_tol=1e-10, lsqr_maxit=None):
    """Construct a solver by method tag (see :data:`METHODS`)."""
    if method == "rrls":
        if lam is None:
            raise InvalidArgumentError("rrls needs a fixed lam")
        return RrlsSolver(problem, lam, y0=x0)
    if method == "stik":
        return StikSolver(problem, x0=x0)
    if method == "sg":
        return SgSolver(problem, x0=x0, lsqr_tol=lsqr_tol,
                        lsqr_maxit=lsqr_maxit)
    if method == "sbk":
        return SbkSolver(problem, x0=x0, lsqr_tol=lsqr_tol,
                         lsqr_maxit=lsqr_maxit)
    if method == "slimtik":
        return SlimTikSolver(problem, r, x0=x0, lsqr_tol=lsqr_tol,
                             lsqr_maxit=lsqr_maxit)
    raise InvalidArgumentError(
        f"unknown method {method!r}; expected one of {METHODS}")


# ---------------------------------------------------------------------------
# run loop


@dataclass
class IterationRecord:
    """Per-step metrics. ``clipped`` and ``selection`` are in-memory
    diagnostics; the CSV stream carries the first seven fields."""

    k: int
    tau: int
    Lambda: float
    lambda_eff: float
    res2: float
    relerr: float
    seconds: float
    clipped: bool = False
    selection: object = None


@dataclass
class RunResult:
    records: list
    x: np.ndarray
    solver: object


CSV_HEADER = "k,tau,Lambda,lambda_eff,res2,relerr,seconds"


def write_records_csv(fh, records, replicate=None):
    """Stream records as CSV. ``replicate`` prepends a replicate column."""
    header = CSV_HEADER if replicate is None else "replicate," + CSV_HEADER
    fh.write(header + "\n")
    for rec in records:
        fields = [str(rec.k), str(rec.tau),
                  format(rec.Lambda, ".17g"), format(rec.lambda_eff, ".17g"),
                  format(rec.res2, ".17g"),
                  "" if rec.relerr is None else format(rec.relerr, ".17g"),
                  format(rec.seconds, ".17g")]
        if replicate is not None:
            fields.insert(0, str(replicate))
        fh.write(",".join(fields) + "\n")


def run(problem, plan, method="stik", *, epochs=1, selector=None, lam=None,
        r=2, x0=None, schedule_seed=None, lsqr_tol=1e-10, lsqr_maxit=None,
        record_time=False):
    """Drive ``epochs`` sweeps of a sampled solver over a block plan.

    ``selector`` chooses the per-step increment for the stik family; it is
    any object with ``choose(solver, block, b_blk, visits) ->
    SelectionResult`` (see :mod:`stik.regparam`). rrls ignores it and uses
    the fixed ``lam``. Increment proposals that would drive the cumulative
    parameter non-positive are clipped to ``1e-12 * lambda_{k-1}`` and the
    record is flagged.

    Returns a :class:`RunResult` with one :class:`IterationRecord` per step.
    """
    if epochs < 0:
        raise InvalidArgumentError("epochs must be >= 0")
    solver = make_solver(method, problem, lam=lam, r=r, x0=x0,
                         lsqr_tol=lsqr_tol, lsqr_maxit=lsqr_maxit)
    if method != "rrls" and selector is None:
        raise InvalidArgumentError(
            "the stik family needs a selector (use regparam.FixedIncrement)")
    if (method == "rrls" and np.any(solver.x != 0)
            and plan.strategy in ("cyclic", "random_cyclic")):
        warnings.warn("rrls epoch identities require y0 = 0 under cyclic "
                      "sampling strategies", stacklevel=2)
    schedule = plan.schedule(schedule_seed)
    records = []
    visits = {tau: 0 for tau in range(1, plan.M + 1)}
    total_steps = epochs * plan.M
    for k in range(1, total_steps + 1):
        t0 = time.perf_counter() if record_time else 0.0
        tau = schedule.tau(k)
        visits[tau] += 1
        rows = plan.block_rows(tau)
        block = row_block(problem.A, rows)
        b_blk = problem.b[rows]
        clipped = False
        selection = None
        try:
            if method == "rrls":
                increment = 0.0
                solver.step(block, b_blk)
            else:
                selection = selector.choose(solver, block, b_blk,
                                            visits[tau], plan.M)
                increment = selection.Lambda
                if solver.lambda_cum + increment <= 0:
                    floor = (LAMBDA_CLIP_FACTOR * solver.lambda_cum
                             if solver.lambda_cum > 0 else LAMBDA_CLIP_FACTOR)
                    increment = floor - solver.lambda_cum
                    clipped = True
                    warnings.warn(
                        f"step {k}: increment clipped to keep the cumulative "
                        "parameter positive", stacklevel=2)
                solver.step(block, b_blk, increment)
        except StikError as exc:
            context = f"step {k} (block {tau}, epoch {1 + (k - 1) // plan.M})"
            exc.args = (f"{context}: {exc.args[0] if exc.args else exc}",)
            raise
        res = block.operator().apply(solver.x) - b_blk
        rec = IterationRecord(
            k=k, tau=tau, Lambda=increment,
            lambda_eff=(plan.M / k) * solver.lambda_total,
            res2=float(res @ res),
            relerr=(relative_error(solver.x, problem.x_true)
                    if problem.x_true is not None else None),
            seconds=(time.perf_counter() - t0) if record_time else 0.0,
            clipped=clipped, selection=selection)
        records.append(rec)
    return RunResult(records=records, x=solver.x.copy(), solver=solver)
