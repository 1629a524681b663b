import warnings

import numpy as np
import pytest

from medflip import tensor as T
from medflip.gradcheck import numeric_grad
from medflip.tensor import DegenerateSpectrumWarning, Tensor, grad_sigma_k, svd_numpy


def _assert_valid(s, u, sigma, v, tol=1e-8):
    r = min(s.shape)
    assert u.shape == (s.shape[0], r) and v.shape == (s.shape[1], r) and sigma.shape == (r,)
    rec = np.linalg.norm(s - (u * sigma) @ v.T) / max(np.linalg.norm(s), 1e-12)
    assert rec < tol
    np.testing.assert_allclose(u.T @ u, np.eye(r), atol=tol)
    np.testing.assert_allclose(v.T @ v, np.eye(r), atol=tol)
    assert np.all(sigma >= 0) and np.all(np.diff(sigma) <= 0)


@pytest.mark.parametrize("shape", [(5, 5), (8, 8), (6, 3), (3, 6), (64, 64), (1, 4), (4, 1)])
def test_reconstruction_and_orthonormality(shape):
    s = np.random.default_rng(hash(shape) % 2 ** 32).normal(size=shape)
    _assert_valid(s, *svd_numpy(s))


def test_singular_values_match_lapack():
    s = np.random.default_rng(3).normal(size=(9, 7))
    np.testing.assert_allclose(svd_numpy(s)[1], np.linalg.svd(s, compute_uv=False), rtol=1e-12)


def test_rank_deficient_matrix_gets_complete_bases():
    rng = np.random.default_rng(5)
    s = rng.normal(size=(10, 3)) @ rng.normal(size=(3, 10))
    u, sigma, v = svd_numpy(s)
    _assert_valid(s, u, sigma, v)
    assert np.all(sigma[3:] < 1e-10)


def test_diagonal_example():
    u, sigma, v = svd_numpy(np.diag([3.0, 1.0]))
    np.testing.assert_array_equal(sigma, [3.0, 1.0])
    np.testing.assert_array_equal(u, np.eye(2))
    np.testing.assert_array_equal(v, np.eye(2))


def test_nilpotent_example():
    s = np.array([[0.0, 2.0], [0.0, 0.0]])
    u, sigma, v = svd_numpy(s)
    np.testing.assert_allclose(sigma, [2.0, 0.0], atol=1e-15)
    _assert_valid(s, u, sigma, v)


def test_zero_matrix():
    u, sigma, v = svd_numpy(np.zeros((3, 3)))
    np.testing.assert_array_equal(sigma, 0.0)
    _assert_valid(np.zeros((3, 3)), u, sigma, v)


def test_sign_convention(rng):
    for _ in range(20):
        u, _, v = svd_numpy(rng.normal(size=(6, 6)))
        lead = np.argmax(np.abs(u), axis=0)
        assert np.all(u[lead, np.arange(6)] > 0)


def test_sign_convention_ties_use_lowest_index():
    # first column of U is (1, -1)/sqrt2 up to sign: tie resolved at index 0
    s = np.array([[1.0, 0.0], [-1.0, 0.0]])
    u, _, _ = svd_numpy(s)
    assert u[0, 0] > 0


def test_deterministic_factorization(rng):
    s = rng.normal(size=(7, 7))
    a, b = svd_numpy(s), svd_numpy(s.copy())
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_grad_sigma_k_examples():
    s = Tensor(np.diag([2.0, 1.0]))
    u, sigma, v = T.svd(s)
    np.testing.assert_array_equal(grad_sigma_k(u, v, 1).data, [[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(grad_sigma_k(u, v, 2).data, [[0.0, 0.0], [0.0, 1.0]])


@pytest.mark.parametrize("k", [0, 3])
def test_grad_sigma_k_out_of_range(k):
    u, _, v = T.svd(Tensor(np.diag([2.0, 1.0])))
    with pytest.raises(IndexError):
        grad_sigma_k(u, v, k)


@pytest.mark.parametrize("seed", range(5))
def test_grad_sigma_k_matches_finite_differences_6x6(seed):
    s = np.random.default_rng(seed).normal(size=(6, 6))
    u, sigma, v = svd_numpy(s)
    for k in range(1, 7):
        num = numeric_grad(lambda: svd_numpy(s)[1][k - 1], s)
        g = grad_sigma_k(u, v, k).data
        assert np.abs(g - num).max() / np.abs(num).max() < 1e-4


def test_taped_sigma_gradient_equals_outer_product(rng):
    s = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    u, sigma, v = T.svd(s)
    T.getitem(sigma, 0).backward()
    np.testing.assert_allclose(s.grad, np.outer(u.data[:, 0], v.data[:, 0]), atol=1e-15)


def test_degenerate_spectrum_warns_and_proceeds():
    with pytest.warns(DegenerateSpectrumWarning):
        u, sigma, v = T.svd(Tensor(np.eye(3)))
    np.testing.assert_allclose(sigma.data, 1.0)
    with pytest.warns(DegenerateSpectrumWarning):
        grad_sigma_k(u, v, 1, sigma=sigma)


def test_no_warning_for_separated_spectrum(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        T.svd(Tensor(np.diag([3.0, 2.0, 1.0])))
