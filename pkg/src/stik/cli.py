"""Command-line interface.

Subcommands: gen-problem, run, select-param, superres-run, toy-figure.
Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

import argparse
import io
import os
import sys

import numpy as np

from . import harness, regparam, solvers, superres
from .exceptions import (InvalidArgumentError, MaxIterationsError,
                         NumericalBreakdownError, RejectedIncrementError,
                         SelectionFailedError, SingularSystemError,
                         UndefinedObjectiveError)
from .linops import save_matrix, save_vector
from .problems import TestProblemSpec, gen_test_problem
from .sampling import make_block_partition
from .solvers import write_records_csv

_NUMERICAL = (NumericalBreakdownError, SingularSystemError,
              SelectionFailedError, MaxIterationsError,
              RejectedIncrementError, UndefinedObjectiveError)


def _config_from_args(args):
    if args.config:
        return harness.load_config(args.config, args.set or ())
    return harness.apply_overrides("", args.set or ())


def _add_config_flags(parser):
    parser.add_argument("--config", help="experiment config file")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config field (repeatable)")


def cmd_gen_problem(args):
    spec = TestProblemSpec(name=args.name, n=args.n,
                           noise_level=args.noise_level, sigma2=args.sigma2,
                           seed=args.seed)
    problem = gen_test_problem(spec)
    os.makedirs(args.out, exist_ok=True)
    save_matrix(os.path.join(args.out, "A.txt"), problem.A.to_dense())
    save_vector(os.path.join(args.out, "b.txt"), problem.b)
    if problem.x_true is not None:
        save_vector(os.path.join(args.out, "x_true.txt"), problem.x_true)
    sigma2 = "" if problem.sigma2 is None else format(problem.sigma2, ".17g")
    print(f"wrote {args.name} ({problem.m}x{problem.n}) to {args.out} "
          f"sigma2={sigma2}")
    return 0


def _write_run_output(cfg, merged, result):
    with open(cfg.run.output, "w") as fh:
        if len(merged) == 1 and merged[0][0] is None:
            write_records_csv(fh, merged[0][1])
        else:
            header_done = False
            for rep, records in merged:
                buf = io.StringIO()
                write_records_csv(buf, records, replicate=rep)
                lines = buf.getvalue().splitlines(keepends=True)
                fh.writelines(lines if not header_done else lines[1:])
                header_done = True
    if result is not None:
        records = result.records
        relerr = records[-1].relerr if records else None
        lam_eff = records[-1].lambda_eff if records else 0.0
        relerr_s = "" if relerr is None else format(relerr, ".17g")
        print(f"final_relerr={relerr_s}, "
              f"final_lambda_eff={format(lam_eff, '.17g')}")
    else:
        print(f"wrote {cfg.run.replicates} replicates to {cfg.run.output}")


def cmd_run(args):
    cfg = _config_from_args(args)
    merged, result = harness.run_with_replicates(cfg)
    _write_run_output(cfg, merged, result)
    return 0


def cmd_superres_run(args):
    cfg = _config_from_args(args)
    if cfg.problem.frame_dir is None:
        raise InvalidArgumentError(
            "config field problem.frame_dir is required for superres-run")
    problem, plan = harness.build_problem(cfg)
    selector = harness.build_selector(cfg, problem)
    result = solvers.run(
        problem, plan, cfg.solver.method, epochs=cfg.solver.epochs,
        selector=selector, lam=cfg.solver.lam, r=cfg.solver.memory,
        lsqr_tol=cfg.solver.lsqr_tol, lsqr_maxit=cfg.solver.lsqr_maxit,
        record_time=cfg.run.timing)
    with open(cfg.run.output, "w") as fh:
        write_records_csv(fh, result.records)
    if cfg.run.output_image:
        side = cfg.problem.highres
        superres.write_pgm(cfg.run.output_image,
                           result.x.reshape(side, side))
    records = result.records
    relerr = records[-1].relerr if records else None
    relerr_s = "" if relerr is None else format(relerr, ".17g")
    lam_eff = records[-1].lambda_eff if records else 0.0
    print(f"final_relerr={relerr_s}, "
          f"final_lambda_eff={format(lam_eff, '.17g')}")
    return 0


def cmd_select_param(args):
    cfg = _config_from_args(args)
    if cfg.regparam.method == "fixed":
        raise InvalidArgumentError(
            "select-param needs regparam.method in {sdp, supre, sgcv}")
    problem, plan = harness.build_problem(cfg)
    solver = solvers.make_solver(cfg.solver.method, problem,
                                 lam=cfg.solver.lam, r=cfg.solver.memory,
                                 lsqr_tol=cfg.solver.lsqr_tol,
                                 lsqr_maxit=cfg.solver.lsqr_maxit)
    selector = harness.build_selector(cfg, problem)
    selector.initial = None  # force an actual selection at step 1
    tau = args.block if args.block is not None else plan.schedule().tau(1)
    if not 1 <= tau <= plan.M:
        raise InvalidArgumentError(f"--block must be in [1, {plan.M}]")
    rows = plan.block_rows(tau)
    block = problem.A.row_block(rows)
    res = selector.choose(solver, block, problem.b[rows], 1, plan.M)
    flag = res.flag or ""
    print(f"block={tau} Lambda={res.Lambda:.12g} lam_eff={res.lam_eff:.12g} "
          f"objective={res.objective:.12g} evals={res.n_evals} flag={flag}")
    return 0


def cmd_toy_figure(args):
    """Per-epoch iterate coordinates of the 2-parameter toy problem, plus
    the reference solutions, as a small CSV (label,epoch,c1,c2)."""
    spec = TestProblemSpec(name="toy2d", seed=args.seed)
    problem = gen_test_problem(spec)
    lam = args.lam
    epochs = args.epochs
    rows = []

    def sweep(label, method, strategy):
        plan = make_block_partition(10, 10, strategy=strategy, seed=args.seed)
        solver = solvers.make_solver(method, problem,
                                     lam=lam if method == "rrls" else None)
        schedule = plan.schedule()
        for k in range(1, epochs * 10 + 1):
            tau = schedule.tau(k)
            blk_rows = plan.block_rows(tau)
            block = problem.A.row_block(blk_rows)
            if method == "rrls":
                solver.step(block, problem.b[blk_rows])
            else:
                # keep the per-epoch effective parameter pinned at lam
                target = lam * k / 10.0
                solver.step(block, problem.b[blk_rows],
                            target - solver.lambda_cum)
            if k % 10 == 0:
                rows.append((label, k // 10, solver.x[0], solver.x[1]))

    sweep("rrls_cyclic", "rrls", "cyclic")
    sweep("rrls_random", "rrls", "random_replacement")
    sweep("stik_random", "stik", "random_replacement")

    x_tik = solvers.tikhonov_direct(problem, lam)
    x_unreg = np.linalg.lstsq(problem.A.to_dense(), problem.b, rcond=None)[0]
    refs = [("x_true", problem.x_true), ("x_unregularized", x_unreg),
            ("x_tikhonov", x_tik)]
    with open(args.out, "w") as fh:
        fh.write("label,epoch,c1,c2\n")
        for label, vec in refs:
            fh.write(f"{label},0,{vec[0]:.17g},{vec[1]:.17g}\n")
        for label, epoch, c1, c2 in rows:
            fh.write(f"{label},{epoch},{c1:.17g},{c2:.17g}\n")
    print(f"wrote {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stik",
        description="Sampled iterative Tikhonov solvers and experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-problem", help="write a test problem to disk")
    p.add_argument("--name", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--noise-level", type=float, default=None)
    p.add_argument("--sigma2", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_problem)

    p = sub.add_parser("run", help="run a sampled solver experiment")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("select-param",
                       help="run one parameter selection on a block")
    _add_config_flags(p)
    p.add_argument("--block", type=int, default=None,
                   help="1-based block index (default: first scheduled)")
    p.set_defaults(func=cmd_select_param)

    p = sub.add_parser("superres-run",
                       help="reconstruct from a directory of frames")
    _add_config_flags(p)
    p.set_defaults(func=cmd_superres_run)

    p = sub.add_parser("toy-figure",
                       help="emit per-epoch toy-problem iterate coordinates")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lam", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="toy_figure.csv")
    p.set_defaults(func=cmd_toy_figure)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _NUMERICAL as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
