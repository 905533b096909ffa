"""Matrix-free super-resolution forward model.

A low-resolution frame is produced from an n x n image by an affine warp
(rotation about the image center plus a subpixel shift, bilinear
interpolation, zero padding) followed by block-average restriction to
ell x ell. Frames are the natural sampling blocks of the stacked system,
so a frame set maps directly onto an :class:`~stik.problems.InverseProblem`
plus a :class:`~stik.sampling.SamplePlan` with one block per frame.

Frames round-trip through plain PGM (P2/P5) files with a text sidecar
``dx dy angle`` per frame; pixel values are mapped affinely from
[PGM_LO, PGM_HI] so noisy frames slightly outside [0, 1] survive
quantization.
"""

import math
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .exceptions import InvalidArgumentError
from .linops import (ComposedOperator, IdentityOperator, LinearOperator,
                     StackedOperator)
from .problems import InverseProblem
from .sampling import SamplePlan

PGM_LO = -0.5
PGM_HI = 1.5


class AffineWarpOperator(LinearOperator):
    """n^2 x n^2 warp: rotate by ``angle`` about the image center, then
    shift content by (dx, dy) pixels; bilinear sampling, zero padding."""

    kind = "affine"

    def __init__(self, n, shift=(0.0, 0.0), angle=0.0):
        n = int(n)
        dx, dy = float(shift[0]), float(shift[1])
        if abs(dx) >= n or abs(dy) >= n:
            raise InvalidArgumentError("|shift| must be < n")
        if abs(angle) >= math.pi:
            raise InvalidArgumentError("|angle| must be < pi")
        super().__init__(n * n, n * n)
        self.n = n
        self.shift = (dx, dy)
        self.angle = float(angle)
        self._cs = math.cos(self.angle)
        self._sn = math.sin(self.angle)

    def _apply(self, x):
        img = x.reshape(self.n, self.n)
        out = _kernels.warp_apply(img, self.shift[1], self.shift[0],
                                  self._cs, self._sn)
        return out.ravel()

    def _apply_adjoint(self, y):
        img = np.ascontiguousarray(y.reshape(self.n, self.n))
        out = _kernels.warp_adjoint(img, self.shift[1], self.shift[0],
                                    self._cs, self._sn)
        return out.ravel()


class RestrictionOperator(LinearOperator):
    """ell^2 x n^2 block average over (n/ell)^2 patches; the adjoint
    spreads each coarse value uniformly, scaled by 1/(n/ell)^2."""

    kind = "restriction"

    def __init__(self, n, ell):
        n, ell = int(n), int(ell)
        if ell <= 0 or n % ell != 0:
            raise InvalidArgumentError(
                f"low-res side {ell} must divide high-res side {n}")
        super().__init__(ell * ell, n * n)
        self.n = n
        self.ell = ell
        self.factor = n // ell

    def _apply(self, x):
        img = x.reshape(self.n, self.n)
        return _kernels.block_mean(img, self.factor).ravel()

    def _apply_adjoint(self, y):
        img = np.ascontiguousarray(y.reshape(self.ell, self.ell))
        return _kernels.block_spread(img, self.factor).ravel()


def make_affine_op(n, shift, angle):
    return AffineWarpOperator(n, shift, angle)


def make_restriction_op(n, ell):
    return RestrictionOperator(n, ell)


@dataclass(frozen=True)
class FrameModel:
    """Acquisition parameters of one low-resolution frame."""

    n: int
    ell: int
    shift: tuple
    angle: float
    index: int = 0

    def __post_init__(self):
        if self.n % self.ell != 0:
            raise InvalidArgumentError("downsample factor must be an integer")

    def operator(self):
        return ComposedOperator(RestrictionOperator(self.n, self.ell),
                                AffineWarpOperator(self.n, self.shift,
                                                   self.angle))


@dataclass
class FrameSet:
    frames: list          # FrameModel per frame
    data: list            # observed ell^2 vector per frame
    sigma2: float         # mean per-entry noise variance (0 if noiseless)

    def problem_and_plan(self, x_true_img=None, strategy="cyclic", seed=0):
        """Stack the frames into an inverse problem; one block per frame."""
        ops = [fm.operator() for fm in self.frames]
        A = StackedOperator(ops)
        b = np.concatenate(self.data)
        n2 = ops[0].ncols
        problem = InverseProblem(
            A=A, b=b, L=IdentityOperator(n2),
            x_true=None if x_true_img is None else np.asarray(
                x_true_img, dtype=np.float64).ravel(),
            sigma2=self.sigma2 if self.sigma2 > 0 else None)
        plan = SamplePlan(
            m=A.nrows, M=len(ops), ell=ops[0].nrows,
            blocks=tuple(np.arange(i * ops[0].nrows, (i + 1) * ops[0].nrows)
                         for i in range(len(ops))),
            strategy=strategy, seed=seed)
        return problem, plan


def gen_frames(x_true_img, n_frames, ell, noise_level, seed,
               max_shift=2.0, max_angle=0.02):
    """Simulate ``n_frames`` low-resolution frames of a square image.

    Per frame, a shift uniform in [-max_shift, max_shift]^2 (high-res
    pixels) and an angle uniform in [-max_angle, max_angle] are drawn from
    ``seed``; Gaussian noise is scaled so each frame's noise level
    ||eps|| / ||clean|| equals ``noise_level`` exactly (0 disables noise).
    """
    img = np.asarray(x_true_img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise InvalidArgumentError("x_true_img must be square")
    n = img.shape[0]
    if noise_level < 0:
        raise InvalidArgumentError("noise_level must be >= 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    x = img.ravel()
    frames, data = [], []
    var_sum = 0.0
    for i in range(n_frames):
        shift = tuple(rng.uniform(-max_shift, max_shift, size=2))
        angle = float(rng.uniform(-max_angle, max_angle))
        fm = FrameModel(n=n, ell=ell, shift=shift, angle=angle, index=i)
        clean = fm.operator().apply(x)
        if noise_level > 0:
            eps = rng.standard_normal(clean.shape[0])
            eps *= noise_level * np.linalg.norm(clean) / np.linalg.norm(eps)
            var_sum += float(eps @ eps) / clean.shape[0]
            clean = clean + eps
        frames.append(fm)
        data.append(clean)
    sigma2 = var_sum / n_frames if noise_level > 0 else 0.0
    return FrameSet(frames=frames, data=data, sigma2=sigma2)


def synthetic_image(n, seed=0):
    """Deterministic smooth grayscale test image in [0, 1]: a few Gaussian
    bumps plus a soft gradient."""
    rng = np.random.Generator(np.random.PCG64(seed))
    yy, xx = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n),
                         indexing="ij")
    img = 0.15 + 0.2 * xx + 0.1 * yy
    for _ in range(6):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        w = rng.uniform(0.02, 0.08)
        amp = rng.uniform(0.2, 0.6)
        img = img + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w**2))
    return np.clip(img / img.max(), 0.0, 1.0)


# ---------------------------------------------------------------------------
# PGM and frame-directory round trip


def write_pgm(path, img, maxval=65535, binary=True):
    """Write a float image; values are mapped from [PGM_LO, PGM_HI] onto
    [0, maxval] (clipping outside) so mildly negative noisy pixels survive."""
    img = np.asarray(img, dtype=np.float64)
    scaled = np.clip((img - PGM_LO) / (PGM_HI - PGM_LO), 0.0, 1.0)
    q = np.rint(scaled * maxval).astype(np.uint32)
    h, w = img.shape
    if binary:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
            if maxval < 256:
                fh.write(q.astype(">u1").tobytes())
            else:
                fh.write(q.astype(">u2").tobytes())
    else:
        with open(path, "w") as fh:
            fh.write(f"P2\n{w} {h}\n{maxval}\n")
            for row in q:
                fh.write(" ".join(str(v) for v in row) + "\n")


def read_pgm(path):
    """Read P2/P5, undoing the [PGM_LO, PGM_HI] mapping."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    # header tokens with '#' comments stripped, stopping after maxval
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n|\S+)").match(raw, pos)
        if m is None:
            raise InvalidArgumentError(f"{path}: truncated PGM header")
        pos = m.end()
        tok = m.group(1)
        if not tok.startswith(b"#"):
            tokens.append(tok)
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        dtype = ">u1" if maxval < 256 else ">u2"
        q = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos + 1)
        q = q.reshape(h, w).astype(np.float64)
    elif magic == b"P2":
        q = np.array(raw[pos:].split(), dtype=np.float64).reshape(h, w)
    else:
        raise InvalidArgumentError(f"{path}: not a PGM file")
    return (q / maxval) * (PGM_HI - PGM_LO) + PGM_LO


def frame_paths(directory, index):
    base = Path(directory) / f"frame_{index:04d}"
    return base.with_suffix(".pgm"), base.with_suffix(".txt")


def write_frame_dir(directory, frame_set, maxval=65535):
    """Write frames as frame_0001.pgm + sidecar ``dx dy angle`` files
    (1-based index order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (fm, b) in enumerate(zip(frame_set.frames, frame_set.data), 1):
        pgm, sidecar = frame_paths(directory, i)
        write_pgm(pgm, b.reshape(fm.ell, fm.ell), maxval=maxval)
        sidecar.write_text(
            f"{fm.shift[0]:.17g} {fm.shift[1]:.17g} {fm.angle:.17g}\n")


def iter_frames(directory, n, start=1, wait=False, timeout=5.0, poll=0.05):
    """Yield (FrameModel, data) from a frame directory in index order.

    Stops at the first missing index, or with ``wait=True`` polls for it
    until ``timeout`` seconds pass without a new frame (streaming source).
    """
    index = start
    while True:
        pgm, sidecar = frame_paths(directory, index)
        if not (pgm.exists() and sidecar.exists()):
            if not wait:
                return
            deadline = time.monotonic() + timeout
            while not (pgm.exists() and sidecar.exists()):
                if time.monotonic() >= deadline:
                    return
                time.sleep(poll)
        img = read_pgm(pgm)
        dx, dy, angle = (float(t) for t in sidecar.read_text().split())
        fm = FrameModel(n=n, ell=img.shape[0], shift=(dx, dy), angle=angle,
                        index=index - 1)
        yield fm, img.ravel()
        index += 1


def read_frame_dir(directory, n, sigma2=None, wait=False, timeout=5.0):
    """Collect a whole frame directory into a :class:`FrameSet`."""
    frames, data = [], []
    for fm, b in iter_frames(directory, n, wait=wait, timeout=timeout):
        frames.append(fm)
        data.append(b)
    if not frames:
        raise InvalidArgumentError(f"no frames found in {directory}")
    return FrameSet(frames=frames, data=data,
                    sigma2=0.0 if sigma2 is None else sigma2)
