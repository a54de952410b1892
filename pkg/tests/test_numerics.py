import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedlora import numerics as nm
from fedlora.numerics import frobenius_norm, make_rng, matmul, pinv, sample_gaussian, svd


def triple_loop(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def rel(a, b):
    denom = max(np.linalg.norm(b), 1e-300)
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.5, -2.0], [0.25, 7.0]])
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_hand_example(self):
        out = matmul([[1, 2], [3, 4]], [[0], [1]])
        assert np.array_equal(out, [[2.0], [4.0]])
        assert np.array_equal(out, triple_loop([[1, 2], [3, 4]], [[0], [1]]))

    def test_zero_annihilates(self):
        out = matmul(np.zeros((3, 2)), np.arange(10.0).reshape(2, 5))
        assert out.shape == (3, 5) and not out.any()

    def test_mismatch_is_descriptive(self):
        with pytest.raises(ValueError, match="2x3.*2x3"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
        assert rel(matmul(a, b), triple_loop(a, b)) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6),
           st.integers(0, 2**32 - 1))
    def test_associative(self, m, k, l, n, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(m, k)), rng.normal(size=(k, l)), rng.normal(size=(l, n))
        assert rel(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-10


class TestFrobenius:
    def test_zero(self):
        assert frobenius_norm(np.zeros((3, 4))) == 0.0

    def test_hand(self):
        assert frobenius_norm([[3, 4]]) == 5.0

    def test_identity(self):
        assert frobenius_norm(np.eye(3)) == pytest.approx(np.sqrt(3), abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**32 - 1))
    def test_trace_identity(self, m, n, seed):
        a = np.random.default_rng(seed).normal(size=(m, n))
        assert abs(frobenius_norm(a) - np.sqrt(np.trace(a.T @ a))) <= 1e-12 * max(1.0, frobenius_norm(a))


class TestSVD:
    def test_diagonal(self):
        _, s, _ = svd(np.diag([3.0, 1.0]))
        assert np.allclose(s, [3.0, 1.0], atol=1e-15)

    def test_zero(self):
        u, s, v = svd(np.zeros((2, 2)))
        assert np.array_equal(s, [0.0, 0.0])
        assert np.allclose(u.T @ u, np.eye(2)) and np.allclose(v.T @ v, np.eye(2))

    @pytest.mark.parametrize("shape", [(4, 3), (3, 4), (1, 5), (5, 1), (16, 4), (8, 32), (7, 7)])
    def test_reconstruction_and_orthogonality(self, shape):
        m = np.random.default_rng(sum(shape)).normal(size=shape)
        u, s, v = svd(m)
        k = min(shape)
        assert u.shape == (shape[0], k) and s.shape == (k,) and v.shape == (shape[1], k)
        assert rel(u @ np.diag(s) @ v.T, m) < 1e-10
        assert np.all(s >= 0) and np.all(np.diff(s) <= 0)
        assert np.abs(u.T @ u - np.eye(k)).max() < 1e-10
        assert np.abs(v.T @ v - np.eye(k)).max() < 1e-10

    def test_rank_deficient_keeps_orthonormal_u(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(6, 2)) @ rng.normal(size=(2, 5))
        u, s, v = svd(m)
        assert np.abs(u.T @ u - np.eye(5)).max() < 1e-10
        assert rel(u @ np.diag(s) @ v.T, m) < 1e-10
        assert s[2:].max() < 1e-12 * s[0]

    def test_singular_values_match_lapack(self):
        m = np.random.default_rng(4).normal(size=(9, 6))
        assert np.allclose(svd(m)[1], np.linalg.svd(m, compute_uv=False), rtol=1e-12)

    def test_deterministic(self):
        m = np.random.default_rng(5).normal(size=(10, 4))
        assert np.array_equal(svd(m)[1], svd(m.copy())[1])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            svd([[np.nan, 1.0]])

    def test_iteration_cap_is_named(self, monkeypatch):
        monkeypatch.setattr(nm, "_jacobi_sweeps", lambda *a: -1)
        with pytest.raises(nm.SVDConvergenceError, match="100 sweeps"):
            svd(np.random.default_rng(0).normal(size=(4, 3)))


def penrose_errors(m, p):
    return (
        rel(m @ p @ m, m),
        rel(p @ m @ p, p),
        rel((m @ p).T, m @ p),
        rel((p @ m).T, p @ m),
    )


class TestPinv:
    def test_identity(self):
        assert np.allclose(pinv(np.eye(3)), np.eye(3), atol=1e-15)

    def test_zero(self):
        out = pinv(np.zeros((2, 3)))
        assert out.shape == (3, 2) and not out.any()

    def test_row_vector_normal_equations(self):
        a = np.array([[1.0, 1.0]])
        oracle = a.T @ np.linalg.inv(a @ a.T)  # [[0.5], [0.5]] by hand
        assert np.allclose(oracle, [[0.5], [0.5]])
        assert np.allclose(pinv(a), oracle, atol=1e-15)

    @pytest.mark.parametrize("shape", [(3, 5), (5, 3), (4, 4), (16, 4), (4, 16)])
    def test_penrose_identities(self, shape):
        m = np.random.default_rng(shape[0] * 7 + shape[1]).normal(size=shape)
        assert max(penrose_errors(m, pinv(m))) < 1e-8

    def test_penrose_rank_deficient(self):
        rng = np.random.default_rng(8)
        m = rng.normal(size=(7, 2)) @ rng.normal(size=(2, 5))
        assert max(penrose_errors(m, pinv(m))) < 1e-8

    def test_double_pinv(self):
        m = np.random.default_rng(9).normal(size=(6, 4))
        assert rel(pinv(pinv(m)), m) < 1e-8

    def test_full_row_rank_right_inverse(self):
        a = np.random.default_rng(10).normal(size=(3, 9))
        assert np.abs(a @ pinv(a) - np.eye(3)).max() < 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_lapack_on_square(self, seed):
        m = np.random.default_rng(seed).normal(size=(8, 8))
        assert rel(pinv(m), np.linalg.pinv(m)) < 1e-12

    def test_explicit_tol_truncates(self):
        m = np.diag([2.0, 1e-3])
        assert np.allclose(pinv(m, tol=1e-2), np.diag([0.5, 0.0]))

    def test_negative_tol(self):
        with pytest.raises(ValueError):
            pinv(np.eye(2), tol=-1.0)


class TestGaussian:
    def test_zero_std(self):
        out = sample_gaussian(3, 4, 0.0, make_rng(0))
        assert out.shape == (3, 4) and not out.any()

    def test_same_seed_same_draws(self):
        assert np.array_equal(sample_gaussian(2, 2, 1.0, make_rng(42)),
                              sample_gaussian(2, 2, 1.0, make_rng(42)))

    def test_stream_advances(self):
        rng = make_rng(42)
        assert not np.array_equal(sample_gaussian(2, 2, 1.0, rng), sample_gaussian(2, 2, 1.0, rng))

    def test_zero_std_still_advances(self):
        a, b = make_rng(1), make_rng(1)
        sample_gaussian(3, 3, 0.0, a)
        sample_gaussian(3, 3, 1.0, b)
        assert a.bit_generator.state == b.bit_generator.state

    def test_odd_count(self):
        assert sample_gaussian(3, 3, 1.0, make_rng(0)).shape == (3, 3)

    def test_variance_law_of_large_numbers(self):
        z = sample_gaussian(1000, 1000, 0.5, make_rng(7))
        assert abs(z.var() - 0.25) < 0.01
        assert abs(z.mean()) < 0.005

    def test_negative_std(self):
        with pytest.raises(ValueError):
            sample_gaussian(1, 1, -0.1, make_rng(0))
