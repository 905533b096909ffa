"""Experiment configuration and drivers.

Configs are INI-style ``key = value`` sections; unknown sections or keys
are rejected by name. All randomness flows from ``run.seed``, fanned out
to consumers through fixed spawn labels (sampling=1, noise=2, probes=3,
motion=4, replicate=(5, i)), so each consumer can also be re-seeded
independently (e.g. ``sampling.seed``).
"""

import configparser
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import regparam, solvers, superres
from .exceptions import InvalidArgumentError
from .linops import DenseOperator, IdentityOperator, load_matrix, load_vector
from .problems import InverseProblem, TestProblemSpec, gen_test_problem
from .sampling import STRATEGIES, make_block_partition

SEED_LABELS = {"sampling": (1,), "noise": (2,), "probes": (3,), "motion": (4,)}


def derive_seed(seed, label, index=None):
    key = SEED_LABELS[label] if index is None else (5, index)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ProblemConfig:
    name: str = None
    n: int = 100
    noise_level: float = None
    sigma2: float = None
    matrix: str = None
    rhs: str = None
    xtrue: str = None
    frame_dir: str = None
    highres: int = None


@dataclass
class SamplingConfig:
    strategy: str = "cyclic"
    blocks: int = 10
    seed: int = None


@dataclass
class SolverConfig:
    method: str = "stik"
    lam: float = None
    memory: int = 2
    epochs: int = 1
    lsqr_tol: float = 1e-10
    lsqr_maxit: int = None


@dataclass
class RegparamConfig:
    method: str = "fixed"
    increment: float = None
    initial: float = None
    gamma: float = 4.0
    sigma2: float = None
    grid_min: float = None
    grid_max: float = None
    grid_points: int = 40
    trace: str = "exact"
    probes: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    output: str = "records.csv"
    output_image: str = None
    replicates: int = 1
    timing: bool = False


@dataclass
class ExperimentConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    regparam: RegparamConfig = field(default_factory=RegparamConfig)
    run: RunConfig = field(default_factory=RunConfig)


# config key <-> dataclass field (keys with dots cannot be attributes)
_KEY_TO_FIELD = {
    ("solver", "lambda"): "lam",
    ("regparam", "grid.min"): "grid_min",
    ("regparam", "grid.max"): "grid_max",
    ("regparam", "grid.points"): "grid_points",
}
_FIELD_TO_KEY = {(sec, f): k for (sec, k), f in _KEY_TO_FIELD.items()}

_SECTIONS = {"problem": ProblemConfig, "sampling": SamplingConfig,
             "solver": SolverConfig, "regparam": RegparamConfig,
             "run": RunConfig}


def _parse_value(section, name, raw, ftype):
    raw = raw.strip()
    if raw == "":
        return None
    try:
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        if ftype is bool:
            if raw.lower() in ("on", "true", "1", "yes"):
                return True
            if raw.lower() in ("off", "false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise InvalidArgumentError(
            f"config field {section}.{name}: cannot parse {raw!r}") from None


def parse_config(text):
    """Parse config text into an :class:`ExperimentConfig`; unknown
    sections or keys raise, naming the field."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InvalidArgumentError(f"config syntax error: {exc}") from exc
    cfg = ExperimentConfig()
    for section in cp.sections():
        if section not in _SECTIONS:
            raise InvalidArgumentError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        known = {f.name: f for f in dc_fields(target)}
        for key, raw in cp.items(section):
            fname = _KEY_TO_FIELD.get((section, key), key)
            if fname not in known:
                raise InvalidArgumentError(
                    f"unknown config field {section}.{key}")
            setattr(target, fname,
                    _parse_value(section, key, raw, known[fname].type))
    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg.sampling.strategy not in STRATEGIES:
        raise InvalidArgumentError(
            f"config field sampling.strategy: {cfg.sampling.strategy!r}")
    if cfg.solver.method not in solvers.METHODS:
        raise InvalidArgumentError(
            f"config field solver.method: {cfg.solver.method!r}")
    if cfg.regparam.method not in ("fixed", "sdp", "supre", "sgcv"):
        raise InvalidArgumentError(
            f"config field regparam.method: {cfg.regparam.method!r}")
    if cfg.regparam.trace not in ("exact", "hutchinson"):
        raise InvalidArgumentError(
            f"config field regparam.trace: {cfg.regparam.trace!r}")
    if cfg.solver.epochs < 0:
        raise InvalidArgumentError("config field solver.epochs: must be >= 0")
    if cfg.run.replicates < 1:
        raise InvalidArgumentError("config field run.replicates: must be >= 1")


def render_config(cfg):
    """Serialize a config so that parse(render(cfg)) == cfg."""
    out = io.StringIO()
    for section, cls in _SECTIONS.items():
        target = getattr(cfg, section)
        out.write(f"[{section}]\n")
        for f in dc_fields(cls):
            val = getattr(target, f.name)
            if val is None:
                continue
            key = _FIELD_TO_KEY.get((section, f.name), f.name)
            if isinstance(val, bool):
                val = "on" if val else "off"
            elif isinstance(val, float):
                val = format(val, ".17g")
            out.write(f"{key} = {val}\n")
        out.write("\n")
    return out.getvalue()


def load_config(path, overrides=()):
    with open(path) as fh:
        text = fh.read()
    return apply_overrides(text, overrides)


def apply_overrides(text, overrides):
    """Apply ``section.key=value`` override strings on top of config text."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    for item in overrides:
        if "=" not in item:
            raise InvalidArgumentError(f"bad --set {item!r}; use section.key=value")
        path, value = item.split("=", 1)
        if "." not in path:
            raise InvalidArgumentError(f"bad --set {item!r}; use section.key=value")
        section, key = path.strip().split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key.strip(), value.strip())
    out = io.StringIO()
    cp.write(out)
    return parse_config(out.getvalue())


# ---------------------------------------------------------------------------
# experiment assembly


def build_problem(cfg):
    """Instantiate the problem a config describes (generated, stored, or a
    super-resolution frame stream)."""
    pc = cfg.problem
    if pc.frame_dir is not None:
        if pc.highres is None:
            raise InvalidArgumentError(
                "config field problem.highres is required with frame_dir")
        fs = superres.read_frame_dir(pc.frame_dir, pc.highres,
                                     sigma2=pc.sigma2)
        x_true = None
        truth_path = os.path.join(pc.frame_dir, "truth.pgm")
        if os.path.exists(truth_path):
            x_true = superres.read_pgm(truth_path)
        problem, plan = fs.problem_and_plan(
            x_true_img=x_true, strategy=cfg.sampling.strategy,
            seed=_sampling_seed(cfg))
        return problem, plan
    if pc.matrix is not None:
        if pc.rhs is None:
            raise InvalidArgumentError(
                "config field problem.rhs is required with problem.matrix")
        A = load_matrix(pc.matrix)
        b = load_vector(pc.rhs)
        x_true = load_vector(pc.xtrue) if pc.xtrue else None
        problem = InverseProblem(A=DenseOperator(A), b=b,
                                 L=IdentityOperator(A.shape[1]),
                                 x_true=x_true, sigma2=pc.sigma2)
    elif pc.name is not None:
        spec = TestProblemSpec(name=pc.name, n=pc.n,
                               noise_level=pc.noise_level, sigma2=pc.sigma2,
                               seed=cfg.run.seed)
        problem = gen_test_problem(spec)
    else:
        raise InvalidArgumentError(
            "config field problem.name (or matrix/frame_dir) is required")
    plan = make_block_partition(problem.m, cfg.sampling.blocks,
                                strategy=cfg.sampling.strategy,
                                seed=_sampling_seed(cfg))
    return problem, plan


def _sampling_seed(cfg):
    if cfg.sampling.seed is not None:
        return cfg.sampling.seed
    return derive_seed(cfg.run.seed, "sampling")


def build_selector(cfg, problem):
    rp = cfg.regparam
    if cfg.solver.method == "rrls":
        return None
    if rp.method == "fixed":
        if rp.increment is None:
            raise InvalidArgumentError(
                "config field regparam.increment is required for fixed")
        return regparam.FixedIncrement(rp.increment)
    grid = None
    if rp.grid_min is not None and rp.grid_max is not None:
        grid = regparam.GridSpec(rp.grid_min, rp.grid_max, rp.grid_points)
    sigma2 = rp.sigma2 if rp.sigma2 is not None else problem.sigma2
    return regparam.AdaptiveSelector(
        rp.method, grid=grid, sigma2=sigma2, gamma=rp.gamma,
        trace_mode=rp.trace, n_probes=rp.probes,
        seed=derive_seed(cfg.run.seed, "probes"), initial=rp.initial)


def run_experiment(cfg, problem=None, plan=None):
    """Run one seeded experiment; returns a :class:`solvers.RunResult`."""
    if problem is None:
        problem, plan = build_problem(cfg)
    selector = build_selector(cfg, problem)
    return solvers.run(
        problem, plan, cfg.solver.method, epochs=cfg.solver.epochs,
        selector=selector, lam=cfg.solver.lam, r=cfg.solver.memory,
        lsqr_tol=cfg.solver.lsqr_tol, lsqr_maxit=cfg.solver.lsqr_maxit,
        record_time=cfg.run.timing)


def _replicate_worker(args):
    text, rep = args
    cfg = parse_config(text)
    cfg.run.seed = derive_seed(cfg.run.seed, "replicate", rep)
    result = run_experiment(cfg)
    return rep, result.records, result.x


def max_workers():
    cap = os.environ.get("STIK_THREADS")
    workers = os.cpu_count() or 1
    if cap:
        workers = min(workers, max(1, int(cap)))
    return workers


def run_with_replicates(cfg):
    """Execute ``run.replicates`` independent seeded runs (parallel
    workers when more than one) and merge their records."""
    if cfg.run.replicates == 1:
        result = run_experiment(cfg)
        return [(None, result.records)], result
    text = render_config(cfg)
    jobs = [(text, rep) for rep in range(cfg.run.replicates)]
    workers = min(max_workers(), cfg.run.replicates)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_replicate_worker, jobs))
    else:
        outs = [_replicate_worker(job) for job in jobs]
    outs.sort(key=lambda t: t[0])
    return [(rep, records) for rep, records, _ in outs], None
