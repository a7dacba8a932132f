import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agop_collapse.linalg import (
    LinalgError,
    as_matrix,
    column_normalize,
    pearson_flat,
    psd_sqrt,
    spd_solve,
    spectral_norm,
    sym_eig,
)


def _rand_sym(rng, n):
    A = rng.standard_normal((n, n))
    return A + A.T


class TestAsMatrix:
    def test_rejects_nan(self):
        with pytest.raises(LinalgError, match="non-finite"):
            as_matrix([[1.0, np.nan]])

    def test_rejects_empty(self):
        with pytest.raises(LinalgError):
            as_matrix(np.zeros((0, 3)))

    def test_vector_becomes_column(self):
        assert as_matrix([1, 2, 3]).shape == (3, 1)


class TestSymEig:
    def test_identity(self):
        np.testing.assert_array_equal(sym_eig(np.eye(3)).eigenvalues, [1, 1, 1])

    def test_diagonal_descending(self):
        np.testing.assert_allclose(sym_eig(np.diag([4.0, 9.0])).eigenvalues, [9, 4])

    @pytest.mark.parametrize("seed", range(5))
    def test_reconstruction(self, seed):
        A = _rand_sym(np.random.default_rng(seed), 30)
        w, V = sym_eig(A)
        err = np.linalg.norm(V @ np.diag(w) @ V.T - A) / np.linalg.norm(A)
        assert err <= 1e-8

    def test_asymmetric_rejected(self):
        with pytest.raises(LinalgError, match="symmetric"):
            sym_eig([[1.0, 2.0], [0.0, 1.0]])


class TestPsdSqrt:
    def test_identity(self):
        np.testing.assert_array_equal(psd_sqrt(np.eye(4)), np.eye(4))

    def test_diagonal(self):
        np.testing.assert_allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_square_back(self, seed):
        rng = np.random.default_rng(seed)
        B = rng.standard_normal((20, 7))  # rank deficient on purpose
        M = B @ B.T
        R = psd_sqrt(M)
        assert np.linalg.norm(R @ R - M) <= 1e-8 * np.linalg.norm(M)
        np.testing.assert_array_equal(R, R.T)

    def test_indefinite_rejected(self):
        with pytest.raises(LinalgError, match="not PSD"):
            psd_sqrt(np.diag([1.0, -0.1]))

    def test_roundoff_negative_clamped(self):
        R = psd_sqrt(np.diag([1.0, -1e-14]))
        assert R[1, 1] == 0.0


class TestSpdSolve:
    def test_identity(self):
        B = np.random.default_rng(0).standard_normal((4, 3))
        np.testing.assert_array_equal(spd_solve(np.eye(4), B).solution, B)

    def test_scalar(self):
        x, jitter = spd_solve([[2.0]], [[4.0]])
        assert x[0, 0] == pytest.approx(2.0, rel=1e-15) and jitter == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_residual(self, seed):
        rng = np.random.default_rng(seed)
        C = rng.standard_normal((25, 25))
        A = C @ C.T + 0.1 * np.eye(25)
        B = rng.standard_normal((25, 4))
        x, _ = spd_solve(A, B)
        assert np.linalg.norm(A @ x - B) <= 1e-8 * np.linalg.norm(B)

    def test_singular_uses_jitter(self):
        v = np.array([[1.0], [1.0]])
        x, jitter = spd_solve(v @ v.T, np.ones((2, 1)))
        assert jitter > 0
        assert np.all(np.isfinite(x))

    def test_indefinite_fails(self):
        with pytest.raises(LinalgError, match="Cholesky"):
            spd_solve(np.diag([1.0, -1.0]), np.ones((2, 1)))


class TestPearsonFlat:
    A = np.arange(12.0).reshape(3, 4) ** 1.5

    def test_self(self):
        assert pearson_flat(self.A, self.A) == pytest.approx(1.0, abs=1e-15)

    def test_negation(self):
        assert pearson_flat(self.A, -self.A) == pytest.approx(-1.0, abs=1e-15)

    @pytest.mark.parametrize("c", [-3.0, 0.5, 1e3])
    def test_mean_shift(self, c):
        assert pearson_flat(self.A, self.A + c) == pytest.approx(1.0, abs=1e-12)

    def test_constant_rejected(self):
        with pytest.raises(LinalgError, match="constant"):
            pearson_flat(np.ones((2, 2)), self.A[:2, :2])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        r = pearson_flat(rng.standard_normal((3, 5)), rng.standard_normal((3, 5)))
        assert -1.0 <= r <= 1.0


class TestSpectralNorm:
    def test_identity(self):
        assert spectral_norm(np.eye(3)) == pytest.approx(1.0, rel=1e-12)

    def test_diagonal(self):
        assert spectral_norm(np.diag([1.0, -5.0])) == pytest.approx(5.0, rel=1e-12)

    def test_zero(self):
        assert spectral_norm(np.zeros((3, 3))) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_svd_oracle(self, seed):
        A = np.random.default_rng(seed).standard_normal((15, 10))
        assert spectral_norm(A) == pytest.approx(np.linalg.svd(A, compute_uv=False)[0], rel=1e-8)

    def test_deterministic(self):
        A = np.random.default_rng(3).standard_normal((8, 8))
        assert spectral_norm(A) == spectral_norm(A.copy())


class TestColumnNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(column_normalize([[3.0], [4.0]]).ravel(), [0.6, 0.8])

    def test_idempotent(self):
        X = column_normalize(np.random.default_rng(0).standard_normal((5, 7)))
        np.testing.assert_allclose(column_normalize(X), X, atol=1e-15)

    def test_zero_column_names_index(self):
        X = np.ones((3, 4))
        X[:, 2] = 0.0
        with pytest.raises(LinalgError, match="column 2"):
            column_normalize(X)
