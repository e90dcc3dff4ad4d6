import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racecar.exceptions import ShapeError
from racecar.linalg import gram_schmidt, matmul, power_iteration, spectral_norm, svd


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def char_poly_eigs(g):
    # lambda^3 - tr lambda^2 + c2 lambda - det for a symmetric 3x3 matrix
    tr = np.trace(g)
    c2 = g[0, 0] * g[1, 1] + g[0, 0] * g[2, 2] + g[1, 1] * g[2, 2] - g[0, 1] ** 2 - g[0, 2] ** 2 - g[1, 2] ** 2
    det = np.linalg.det(g)
    return np.sort(np.real(np.roots([1.0, -tr, c2, -det])))[::-1]


def test_matmul_small_cases():
    a = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(matmul(np.eye(2), a), a)
    assert np.array_equal(matmul(np.array([[1.0, 0], [0, 0]]), np.array([[0.0], [1]])), np.zeros((2, 1)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.max(np.abs(matmul(a, b) - triple_loop(a, b))) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_svd_diagonal():
    res = svd(np.diag([3.0, 2.0]))
    assert np.allclose(res.sigma, [3, 2])
    assert np.allclose(np.abs(res.u), np.eye(2))
    assert np.allclose(np.abs(res.v), np.eye(2))


def test_svd_orthogonal_has_unit_sigma():
    q, _ = np.linalg.qr(np.random.default_rng(3).normal(size=(5, 5)))
    assert np.allclose(svd(q).sigma, 1.0, atol=1e-12)


def test_svd_5x3_against_gram_characteristic_polynomial():
    m = np.random.default_rng(7).normal(size=(5, 3))
    res = svd(m)
    assert np.linalg.norm(res.reconstruct() - m) < 1e-8
    assert np.allclose(res.sigma, np.sqrt(char_poly_eigs(m.T @ m)), atol=1e-9)


@pytest.mark.parametrize("rows", range(1, 17, 3))
@pytest.mark.parametrize("cols", range(1, 17, 3))
def test_svd_invariants_all_shapes(rows, cols):
    m = np.random.default_rng(rows * 31 + cols).normal(size=(rows, cols))
    res = svd(m)
    assert res.u.shape == (rows, rows) and res.v.shape == (cols, cols)
    assert np.linalg.norm(res.u.T @ res.u - np.eye(rows)) < 1e-8
    assert np.linalg.norm(res.v.T @ res.v - np.eye(cols)) < 1e-8
    assert np.linalg.norm(res.reconstruct() - m) / max(1.0, np.linalg.norm(m)) < 1e-8
    assert np.all(np.diff(res.sigma) <= 1e-12) and np.all(res.sigma >= 0)


def test_svd_sign_convention():
    v = svd(np.random.default_rng(0).normal(size=(4, 6))).v
    for j in range(v.shape[1]):
        first = v[np.flatnonzero(np.abs(v[:, j]) > 1e-12)[0], j]
        assert first > 0


def test_svd_rank_deficient():
    u = np.random.default_rng(2).normal(size=(6, 1))
    m = u @ u.T
    res = svd(m)
    assert np.sum(res.sigma > 1e-8) == 1
    assert np.linalg.norm(res.v.T @ res.v - np.eye(6)) < 1e-8


def test_spectral_norm_examples():
    assert abs(spectral_norm(np.diag([3.0, 2.0])) - 3.0) < 1e-9
    assert spectral_norm(np.zeros((3, 2))) == 0.0


def test_spectral_norm_vs_svd_random_trials():
    rng = np.random.default_rng(11)
    for _ in range(100):
        m = rng.normal(size=(6, 4))
        s = svd(m).sigma[0]
        assert abs(spectral_norm(m, max_iters=100, tol=1e-6) - s) <= 1e-6 * s


def test_power_iteration_returns_unit_vector():
    sigma, vec = power_iteration(np.diag([1.0, 5.0, 2.0]))
    assert abs(sigma - 5) < 1e-9 and abs(abs(vec[1]) - 1) < 1e-9


def test_gram_schmidt_examples():
    out = gram_schmidt([np.array([1.0, 0]), np.array([0.0, 1])])
    assert np.allclose(out, np.eye(2))
    out = gram_schmidt([np.array([1.0, 0]), np.array([2.0, 0])])
    assert len(out) == 1 and np.allclose(out[0], [1, 0])
    assert gram_schmidt([]) == []


def test_gram_schmidt_random_span():
    rng = np.random.default_rng(5)
    vs = rng.normal(size=(5, 8))
    q = np.array(gram_schmidt(list(vs)))
    assert np.abs(q @ q.T - np.eye(5)).max() < 1e-10
    # every input lies in the span: least-squares residual vanishes
    coef, *_ = np.linalg.lstsq(q.T, vs.T, rcond=None)
    assert np.abs(q.T @ coef - vs.T).max() < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_gram_schmidt_count_equals_rank(n, rank, seed):
    rng = np.random.default_rng(seed)
    r = min(rank, n)
    vs = rng.normal(size=(n, r)) @ rng.normal(size=(r, 7))
    q = gram_schmidt(list(vs))
    assert len(q) == int(np.sum(svd(vs).sigma > 1e-10))
