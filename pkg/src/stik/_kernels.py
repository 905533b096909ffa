"""Hot numeric kernels: bilinear image warps, block averaging, and a
Cholesky rank-one update.

Each kernel has a loop-based version compiled with numba and a vectorized
pure-numpy fallback. The fallback is selected automatically when numba is
not installed, or explicitly by setting the environment variable
``STIK_DISABLE_NUMBA`` to a non-empty value. ``benchmarks/bench_kernels.py``
compares the two paths.

Both paths implement identical arithmetic contracts; results agree to
rounding. Warp conventions: pixel (i, j) = (row, col), rotation about the
image center (n-1)/2 by ``angle`` radians, then translation by
(dx, dy) = (column shift, row shift); sampling is bilinear with zero
padding outside the domain.
"""

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the env flag instead
    numba = None
    HAS_NUMBA = False

USING_NUMBA = HAS_NUMBA and not os.environ.get("STIK_DISABLE_NUMBA")


# ---------------------------------------------------------------------------
# numpy fallback path


def warp_apply_numpy(src, dy, dx, cos_t, sin_t):
    n = src.shape[0]
    c = (n - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(n, dtype=np.float64),
                         np.arange(n, dtype=np.float64))
    u = jj - c
    v = ii - c
    sc = cos_t * u + sin_t * v + c - dx
    sr = -sin_t * u + cos_t * v + c - dy
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    fr = sr - r0
    fc = sc - c0
    out = np.zeros((n, n))
    for dr, dcol, w in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dcol
        ok = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n)
        out[ok] += w[ok] * src[rr[ok], cc[ok]]
    return out


def warp_adjoint_numpy(y, dy, dx, cos_t, sin_t):
    n = y.shape[0]
    c = (n - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(n, dtype=np.float64),
                         np.arange(n, dtype=np.float64))
    u = jj - c
    v = ii - c
    sc = cos_t * u + sin_t * v + c - dx
    sr = -sin_t * u + cos_t * v + c - dy
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    fr = sr - r0
    fc = sc - c0
    out = np.zeros((n, n))
    for dr, dcol, w in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dcol
        ok = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n)
        np.add.at(out, (rr[ok], cc[ok]), w[ok] * y[ok])
    return out


def block_mean_numpy(src, f):
    n = src.shape[0]
    ell = n // f
    return src.reshape(ell, f, ell, f).mean(axis=(1, 3))


def block_spread_numpy(y, f):
    scale = 1.0 / (f * f)
    return np.repeat(np.repeat(y, f, axis=0), f, axis=1) * scale


def chol_update_numpy(R, v):
    """In-place rank-one update of the upper factor: R'^T R' = R^T R + v v^T.

    ``v`` is destroyed.
    """
    n = R.shape[0]
    for k in range(n):
        r = np.hypot(R[k, k], v[k])
        c = r / R[k, k]
        s = v[k] / R[k, k]
        R[k, k] = r
        if k + 1 < n:
            tail = (R[k, k + 1:] + s * v[k + 1:]) / c
            v[k + 1:] = c * v[k + 1:] - s * tail
            R[k, k + 1:] = tail
    return R


# ---------------------------------------------------------------------------
# loop kernels (numba targets)


def _warp_apply_loops(src, dy, dx, cos_t, sin_t):
    n = src.shape[0]
    c = (n - 1) / 2.0
    out = np.zeros((n, n))
    for i in range(n):
        v = i - c
        for j in range(n):
            u = j - c
            sc = cos_t * u + sin_t * v + c - dx
            sr = -sin_t * u + cos_t * v + c - dy
            r0 = int(np.floor(sr))
            c0 = int(np.floor(sc))
            fr = sr - r0
            fc = sc - c0
            acc = 0.0
            if 0 <= r0 < n and 0 <= c0 < n:
                acc += (1 - fr) * (1 - fc) * src[r0, c0]
            if 0 <= r0 < n and 0 <= c0 + 1 < n:
                acc += (1 - fr) * fc * src[r0, c0 + 1]
            if 0 <= r0 + 1 < n and 0 <= c0 < n:
                acc += fr * (1 - fc) * src[r0 + 1, c0]
            if 0 <= r0 + 1 < n and 0 <= c0 + 1 < n:
                acc += fr * fc * src[r0 + 1, c0 + 1]
            out[i, j] = acc
    return out


def _warp_adjoint_loops(y, dy, dx, cos_t, sin_t):
    n = y.shape[0]
    c = (n - 1) / 2.0
    out = np.zeros((n, n))
    for i in range(n):
        v = i - c
        for j in range(n):
            u = j - c
            sc = cos_t * u + sin_t * v + c - dx
            sr = -sin_t * u + cos_t * v + c - dy
            r0 = int(np.floor(sr))
            c0 = int(np.floor(sc))
            fr = sr - r0
            fc = sc - c0
            yij = y[i, j]
            if 0 <= r0 < n and 0 <= c0 < n:
                out[r0, c0] += (1 - fr) * (1 - fc) * yij
            if 0 <= r0 < n and 0 <= c0 + 1 < n:
                out[r0, c0 + 1] += (1 - fr) * fc * yij
            if 0 <= r0 + 1 < n and 0 <= c0 < n:
                out[r0 + 1, c0] += fr * (1 - fc) * yij
            if 0 <= r0 + 1 < n and 0 <= c0 + 1 < n:
                out[r0 + 1, c0 + 1] += fr * fc * yij
    return out


def _block_mean_loops(src, f):
    n = src.shape[0]
    ell = n // f
    scale = 1.0 / (f * f)
    out = np.zeros((ell, ell))
    for bi in range(ell):
        for bj in range(ell):
            acc = 0.0
            for di in range(f):
                for dj in range(f):
                    acc += src[bi * f + di, bj * f + dj]
            out[bi, bj] = acc * scale
    return out


def _block_spread_loops(y, f):
    ell = y.shape[0]
    n = ell * f
    scale = 1.0 / (f * f)
    out = np.empty((n, n))
    for bi in range(ell):
        for bj in range(ell):
            val = y[bi, bj] * scale
            for di in range(f):
                for dj in range(f):
                    out[bi * f + di, bj * f + dj] = val
    return out


def _chol_update_loops(R, v):
    n = R.shape[0]
    for k in range(n):
        r = np.hypot(R[k, k], v[k])
        c = r / R[k, k]
        s = v[k] / R[k, k]
        R[k, k] = r
        for j in range(k + 1, n):
            R[k, j] = (R[k, j] + s * v[j]) / c
            v[j] = c * v[j] - s * R[k, j]
    return R


if HAS_NUMBA:
    _jit = numba.njit(cache=True, fastmath=False)
    warp_apply_numba = _jit(_warp_apply_loops)
    warp_adjoint_numba = _jit(_warp_adjoint_loops)
    block_mean_numba = _jit(_block_mean_loops)
    block_spread_numba = _jit(_block_spread_loops)
    chol_update_numba = _jit(_chol_update_loops)

if USING_NUMBA:
    warp_apply = warp_apply_numba
    warp_adjoint = warp_adjoint_numba
    block_mean = block_mean_numba
    block_spread = block_spread_numba
    chol_update = chol_update_numba
else:
    warp_apply = warp_apply_numpy
    warp_adjoint = warp_adjoint_numpy
    block_mean = block_mean_numpy
    block_spread = block_spread_numpy
    chol_update = chol_update_numpy
