import numpy as np
import pytest

from stik.exceptions import InvalidArgumentError
from stik.problems import (TestProblemSpec, add_noise, gen_test_problem,
                           relative_error)


def test_toy2d_structure():
    prob = gen_test_problem(TestProblemSpec(name="toy2d", seed=11))
    A = prob.A.to_dense()
    assert A.shape == (10, 2)
    assert np.array_equal(A[:9, 0], np.ones(9))
    assert A[9, 0] == 0.0
    assert A[9, 1] == 1.0
    assert prob.sigma2 == 0.1
    assert np.array_equal(prob.x_true, np.ones(2))


def test_toy2d_perturbation_scales():
    # delta_A ~ N(0, 0.005 I), delta_b ~ N(0, 0.1 I): sample variances over
    # many seeds match within 3 sigma of the chi-square spread
    dAs, dbs = [], []
    for seed in range(300):
        prob = gen_test_problem(TestProblemSpec(name="toy2d", seed=seed))
        A = prob.A.to_dense()
        dAs.extend(A[:9, 1])
        dbs.extend(prob.b - A @ prob.x_true)
    for sample, var in ((np.array(dAs), 0.005), (np.array(dbs), 0.1)):
        est = np.mean(sample**2)
        se = var * np.sqrt(2.0 / sample.size)
        assert abs(est - var) <= 3 * se


def test_prolate_symmetric_toeplitz_illconditioned():
    prob = gen_test_problem(TestProblemSpec(name="prolate", n=100))
    A = prob.A.to_dense()
    assert np.array_equal(A, A.T)
    for d in range(-2, 3):
        diag = np.diagonal(A, d)
        assert np.allclose(diag, diag[0])
    s = np.linalg.svd(A, compute_uv=False)
    assert s[0] / s[-1] > 1e10


def test_gravity_singular_values_decay():
    prob = gen_test_problem(TestProblemSpec(name="gravity", n=100))
    s = np.linalg.svd(prob.A.to_dense(), compute_uv=False)
    assert np.all(np.diff(s) < 0)
    assert s[-1] / s[0] < 1e-12


@pytest.mark.parametrize("name", ["gravity", "shaw", "baart", "prolate"])
def test_generated_problems_clean_rhs_and_adjoint(name):
    prob = gen_test_problem(TestProblemSpec(name=name, n=40))
    A = prob.A.to_dense()
    assert np.array_equal(prob.b, A @ prob.x_true)
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.standard_normal(40)
        y = rng.standard_normal(40)
        assert abs(prob.A.apply(x) @ y - x @ prob.A.apply_adjoint(y)) < 1e-10


def test_same_spec_same_problem():
    spec = TestProblemSpec(name="shaw", n=32, noise_level=0.05, seed=9)
    p1 = gen_test_problem(spec)
    p2 = gen_test_problem(spec)
    assert np.array_equal(p1.A.to_dense(), p2.A.to_dense())
    assert np.array_equal(p1.b, p2.b)
    assert p1.sigma2 == p2.sigma2


def test_unknown_name_rejected():
    with pytest.raises(InvalidArgumentError):
        TestProblemSpec(name="nosuch")


def test_add_noise_level_exact():
    rng = np.random.default_rng(2)
    b = rng.standard_normal(50) + 3
    noisy, sigma2 = add_noise(b, "level", 0.01, seed=4)
    level = np.linalg.norm(noisy - b) / np.linalg.norm(b)
    assert abs(level - 0.01) < 1e-12
    assert abs(sigma2 - np.sum((noisy - b) ** 2) / 50) < 1e-18


def test_add_noise_variance_statistics():
    # pooled sample variance over repeated seeds within 3 sigma of 0.01
    m, reps = 100, 200
    samples = []
    for seed in range(reps):
        noisy, sigma2 = add_noise(np.zeros(m), "variance", 0.01, seed=seed)
        assert sigma2 == 0.01
        samples.append(noisy)
    pooled = np.concatenate(samples)
    est = np.mean(pooled**2)
    se = 0.01 * np.sqrt(2.0 / pooled.size)
    assert abs(est - 0.01) <= 3 * se


def test_add_noise_tiny_level_finite():
    b = np.ones(10)
    noisy, sigma2 = add_noise(b, "level", 1e-30, seed=0)
    assert np.all(np.isfinite(noisy))
    assert sigma2 > 0
    with pytest.raises(InvalidArgumentError):
        add_noise(b, "level", 0.0, seed=0)


def test_relative_error_cases():
    x_true = np.array([3.0, 4.0])
    assert relative_error(x_true, x_true) == 0.0
    assert relative_error(np.zeros(2), x_true) == 1.0
    assert abs(relative_error(2 * x_true, x_true) - 1.0) < 1e-15
    with pytest.raises(InvalidArgumentError):
        relative_error(x_true, np.zeros(2))
