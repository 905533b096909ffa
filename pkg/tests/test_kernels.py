"""Both kernel paths (numba-compiled loops and the vectorized numpy
fallback) must implement the same arithmetic."""

import numpy as np
import pytest
import scipy.linalg as sla

from stik import _kernels


requires_numba = pytest.mark.skipif(not _kernels.HAS_NUMBA,
                                    reason="numba not installed")

PAIRS = [
    (_kernels.warp_apply_numpy, "warp_apply_numba"),
    (_kernels.warp_adjoint_numpy, "warp_adjoint_numba"),
]


@requires_numba
def test_warp_paths_agree():
    rng = np.random.default_rng(0)
    img = rng.standard_normal((17, 17))
    args = (0.6, -1.3, np.cos(0.21), np.sin(0.21))
    a = _kernels.warp_apply_numpy(img, *args)
    b = _kernels.warp_apply_numba(img, *args)
    assert np.allclose(a, b, atol=1e-13)
    y = rng.standard_normal((17, 17))
    a = _kernels.warp_adjoint_numpy(y, *args)
    b = _kernels.warp_adjoint_numba(y, *args)
    assert np.allclose(a, b, atol=1e-13)


@requires_numba
def test_block_paths_agree():
    rng = np.random.default_rng(1)
    img = rng.standard_normal((12, 12))
    assert np.allclose(_kernels.block_mean_numpy(img, 3),
                       _kernels.block_mean_numba(img, 3), atol=1e-14)
    y = rng.standard_normal((4, 4))
    assert np.allclose(_kernels.block_spread_numpy(y, 3),
                       _kernels.block_spread_numba(y, 3), atol=1e-14)


@requires_numba
def test_chol_update_paths_agree():
    rng = np.random.default_rng(2)
    n = 15
    B = rng.standard_normal((n, n))
    H = B @ B.T + n * np.eye(n)
    R = sla.cholesky(H, lower=False)
    v = rng.standard_normal(n)
    R1 = R.copy()
    _kernels.chol_update_numpy(R1, v.copy())
    R2 = np.ascontiguousarray(R.copy())
    _kernels.chol_update_numba(R2, v.copy())
    assert np.allclose(R1, R2, atol=1e-13)


def test_chol_update_rank_one_correct():
    rng = np.random.default_rng(3)
    n = 20
    B = rng.standard_normal((n, n))
    H = B @ B.T + n * np.eye(n)
    R = sla.cholesky(H, lower=False)
    v = rng.standard_normal(n)
    _kernels.chol_update(R, v.copy())
    assert np.allclose(R.T @ R, H + np.outer(v, v), atol=1e-11)


def test_warp_integer_shift_is_index_shift():
    rng = np.random.default_rng(4)
    img = rng.standard_normal((10, 10))
    out = _kernels.warp_apply(img, 0.0, 1.0, 1.0, 0.0)  # dy=0, dx=1
    assert np.allclose(out[:, 1:], img[:, :-1])
    assert np.allclose(out[:, 0], 0.0)


def test_block_mean_constant_preserved():
    img = np.full((8, 8), 3.25)
    assert np.allclose(_kernels.block_mean(img, 4), 3.25)
