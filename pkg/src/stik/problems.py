"""Generators for classic ill-posed test problems, noise injection, and
error metrics.

The Fredholm problems (gravity, shaw, baart) follow the midpoint-quadrature
discretizations popularized by P. C. Hansen's Regularization Tools;
``prolate`` is the standard symmetric ill-conditioned Toeplitz gallery
matrix. Kernel formulas are given in each generator's docstring. Agreement
with the original toolbox is qualitative (decay, conditioning), not
entry-for-entry.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgumentError
from .linops import DenseOperator, IdentityOperator

PROBLEM_NAMES = ("gravity", "shaw", "baart", "prolate", "toy2d")


@dataclass
class InverseProblem:
    """A regularized linear inverse problem instance.

    Fields
    ------
    A : LinearOperator (m x n)
    b : ndarray (m,)
    L : LinearOperator (s x n), full column rank
    x_true : ndarray or None
    sigma2 : float or None
        Noise variance of the entries of b, when known.
    """

    A: object
    b: np.ndarray
    L: object
    x_true: np.ndarray = None
    sigma2: float = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.b.shape != (self.A.nrows,):
            raise InvalidArgumentError(
                f"b has shape {self.b.shape}, operator has {self.A.nrows} rows")
        if self.L.ncols != self.A.ncols:
            raise InvalidArgumentError("L and A disagree on column count")
        if self.x_true is not None:
            self.x_true = np.asarray(self.x_true, dtype=np.float64)
            if self.x_true.shape != (self.A.ncols,):
                raise InvalidArgumentError("x_true has the wrong length")
        if self.sigma2 is not None and self.sigma2 <= 0:
            raise InvalidArgumentError("sigma2 must be positive when given")
        # Full column rank of L is checked where it is cheap to do so.
        if isinstance(self.L, DenseOperator) and self.L.ncols <= 1024:
            gram = self.L.matrix.T @ self.L.matrix
            if np.linalg.eigvalsh(gram)[0] <= 0:
                raise InvalidArgumentError("L^T L is not positive definite")

    @property
    def m(self):
        return self.A.nrows

    @property
    def n(self):
        return self.A.ncols


@dataclass(frozen=True)
class TestProblemSpec:
    __test__ = False  # not a pytest class despite the name

    name: str
    n: int = 100
    noise_level: float = None
    sigma2: float = None
    seed: int = 0

    def __post_init__(self):
        if self.name not in PROBLEM_NAMES:
            raise InvalidArgumentError(
                f"unknown problem {self.name!r}; expected one of {PROBLEM_NAMES}")
        if self.name != "toy2d" and self.n < 2:
            raise InvalidArgumentError("n must be >= 2")
        if self.noise_level is not None and self.sigma2 is not None:
            raise InvalidArgumentError("give noise_level or sigma2, not both")


def _midpoints(a, b, n):
    h = (b - a) / n
    return a + h * (np.arange(n) + 0.5), h


def _gravity(n, d=0.25):
    """1-D gravity surveying: K(s, t) = d (d^2 + (s-t)^2)^(-3/2) on
    [0,1]x[0,1]; x_true(t) = sin(pi t) + 0.5 sin(2 pi t)."""
    t, h = _midpoints(0.0, 1.0, n)
    s = t
    A = h * d / (d**2 + (s[:, None] - t[None, :]) ** 2) ** 1.5
    x = np.sin(np.pi * t) + 0.5 * np.sin(2 * np.pi * t)
    return A, x


def _shaw(n):
    """Shaw's 1-D image restoration kernel
    K(s, t) = (cos s + cos t)^2 (sin(u)/u)^2, u = pi (sin s + sin t),
    on [-pi/2, pi/2]^2; double-humped true solution."""
    t, h = _midpoints(-np.pi / 2, np.pi / 2, n)
    s = t
    u = np.pi * (np.sin(s)[:, None] + np.sin(t)[None, :])
    frac = np.ones_like(u)
    nz = u != 0
    frac[nz] = np.sin(u[nz]) / u[nz]
    A = h * (np.cos(s)[:, None] + np.cos(t)[None, :]) ** 2 * frac**2
    x = 2.0 * np.exp(-6.0 * (t - 0.8) ** 2) + np.exp(-2.0 * (t + 0.5) ** 2)
    return A, x


def _baart(n):
    """Baart's first-kind Fredholm equation K(s, t) = exp(s cos t) with
    s in [0, pi/2], t in [0, pi]; x_true(t) = sin t."""
    s, _ = _midpoints(0.0, np.pi / 2, n)
    t, h = _midpoints(0.0, np.pi, n)
    A = h * np.exp(s[:, None] * np.cos(t[None, :]))
    x = np.sin(t)
    return A, x


def _prolate(n, w=0.25):
    """Symmetric ill-conditioned Toeplitz matrix with first column
    c_0 = 2w, c_k = sin(2 pi w k) / (pi k)."""
    k = np.arange(1, n)
    col = np.empty(n)
    col[0] = 2.0 * w
    col[1:] = np.sin(2 * np.pi * w * k) / (np.pi * k)
    idx = np.abs(np.arange(n)[:, None] - np.arange(n)[None, :])
    return col[idx], np.ones(n)


def gen_test_problem(spec):
    """Build the dense problem named by ``spec``.

    For gravity/shaw/baart/prolate the right-hand side is clean
    (b = A x_true) unless spec requests noise, in which case
    :func:`add_noise` is applied with a seed derived from spec.seed.
    toy2d draws its perturbations delta_A ~ N(0, 0.005 I_9) and
    delta_b ~ N(0, 0.1 I_10) directly from spec.seed.
    """
    if spec.name == "toy2d":
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        dA = np.sqrt(0.005) * rng.standard_normal(9)
        db = np.sqrt(0.1) * rng.standard_normal(10)
        A = np.zeros((10, 2))
        A[:9, 0] = 1.0
        A[:9, 1] = dA
        A[9, 1] = 1.0
        x_true = np.ones(2)
        b = A @ x_true + db
        return InverseProblem(A=DenseOperator(A), b=b,
                              L=IdentityOperator(2), x_true=x_true,
                              sigma2=0.1)

    builders = {"gravity": _gravity, "shaw": _shaw, "baart": _baart,
                "prolate": _prolate}
    A, x_true = builders[spec.name](spec.n)
    b = A @ x_true
    sigma2 = None
    if spec.noise_level is not None or spec.sigma2 is not None:
        mode = "level" if spec.noise_level is not None else "variance"
        value = spec.noise_level if mode == "level" else spec.sigma2
        b, sigma2 = add_noise(b, mode, value, _derive_seed(spec.seed, "noise"))
    return InverseProblem(A=DenseOperator(A), b=b,
                          L=IdentityOperator(spec.n), x_true=x_true,
                          sigma2=sigma2)


def _derive_seed(seed, label):
    labels = {"noise": 2}
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(labels[label],))
    return ss


def add_noise(b_clean, mode, value, seed):
    """Add Gaussian white noise to a clean right-hand side.

    mode "level": scale the draw so ||eps|| / ||b_clean|| equals ``value``
    exactly; the reported variance is ||eps||^2 / m. mode "variance":
    eps ~ N(0, value * I). Returns (b, sigma2).
    """
    b_clean = np.asarray(b_clean, dtype=np.float64)
    if value <= 0:
        raise InvalidArgumentError("noise value must be positive")
    if mode not in ("level", "variance"):
        raise InvalidArgumentError(f"unknown noise mode {mode!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    eps = rng.standard_normal(b_clean.shape[0])
    if mode == "level":
        eps *= value * np.linalg.norm(b_clean) / np.linalg.norm(eps)
        sigma2 = float(eps @ eps) / b_clean.shape[0]
    else:
        eps *= np.sqrt(value)
        sigma2 = float(value)
    return b_clean + eps, sigma2


def relative_error(x, x_true):
    """||x - x_true|| / ||x_true|| in the 2-norm."""
    x_true = np.asarray(x_true, dtype=np.float64)
    nrm = np.linalg.norm(x_true)
    if nrm == 0:
        raise InvalidArgumentError("x_true must be nonzero")
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64) - x_true) / nrm)
