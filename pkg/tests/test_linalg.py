import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from projuq.errors import DimensionMismatch, OutOfRange, RankDeficient
from projuq.linalg import (
    CovarianceFactor,
    MatrixHandle,
    OrthonormalBasis,
    SpdEnsembleSpec,
    apply,
    apply_t,
    geometric_spd,
    inverse_factor,
    normal_inverse_factor,
    nullspace_basis,
    orthonormalize,
    pseudo_quadform,
    random_spd,
)


def random_csr(n, rng, density=0.4):
    m = sp.random(n, n, density=density, random_state=np.random.RandomState(int(rng.integers(1 << 31))), format="csr")
    return MatrixHandle.from_scipy(m)


class TestApply:
    def test_identity(self):
        A = MatrixHandle.from_dense(np.eye(3))
        np.testing.assert_array_equal(apply(A, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])

    def test_diagonal(self):
        A = MatrixHandle.from_dense(np.diag([2.0, 3.0]))
        np.testing.assert_array_equal(apply(A, np.ones(2)), [2.0, 3.0])

    def test_dimension_mismatch(self):
        A = MatrixHandle.from_dense(np.eye(3))
        with pytest.raises(DimensionMismatch):
            apply(A, np.ones(4))

    def test_csr_matches_dense(self, rng):
        for _ in range(100):
            A = random_csr(8, rng)
            D = MatrixHandle.from_dense(A.to_dense())
            x = rng.standard_normal(8)
            y = apply(A, x)
            ref = apply(D, x)
            assert np.linalg.norm(y - ref) <= 1e-14 * max(np.linalg.norm(ref), 1e-300)
            np.testing.assert_allclose(apply_t(A, x), A.to_dense().T @ x, rtol=1e-14, atol=1e-15)

    def test_csr_block_apply(self, rng):
        A = random_csr(12, rng)
        X = rng.standard_normal((12, 3))
        np.testing.assert_allclose(A @ X, A.to_dense() @ X, rtol=1e-14, atol=1e-14)

    def test_deterministic(self, rng):
        A = random_csr(50, rng)
        x = rng.standard_normal(50)
        assert np.array_equal(apply(A, x), apply(A, x))

    def test_csr_invariants_checked(self):
        with pytest.raises(ValueError):
            MatrixHandle.from_csr(np.array([0, 2, 1]), np.array([0, 1]), np.array([1.0, 1.0]), (2, 2))
        with pytest.raises(ValueError):
            MatrixHandle.from_csr(np.array([0, 1, 2]), np.array([0, 5]), np.array([1.0, 1.0]), (2, 2))


class TestOrthonormalize:
    def test_scaled_identity(self):
        Q = orthonormalize(2.0 * np.eye(2)).columns
        np.testing.assert_allclose(np.abs(Q), np.eye(2), atol=1e-15)

    def test_range_preserved(self):
        C = np.array([[1.0, 1.0], [0.0, 1.0]])
        Q = orthonormalize(C).columns
        np.testing.assert_allclose(Q.T @ Q, np.eye(2), atol=1e-12)
        P_ref = C @ np.linalg.solve(C.T @ C, C.T)
        np.testing.assert_allclose(Q @ Q.T, P_ref, atol=1e-12)

    def test_duplicated_column(self):
        C = np.array([[1.0, 1.0], [2.0, 2.0], [0.5, 0.5]])
        with pytest.raises(RankDeficient) as exc:
            orthonormalize(C)
        assert exc.value.column == 1

    def test_projector_idempotent(self, rng):
        Q = orthonormalize(rng.standard_normal((15, 6))).columns
        Q2 = orthonormalize(Q).columns
        assert np.linalg.norm(Q @ Q.T - Q2 @ Q2.T, 2) <= 1e-12

    def test_orthonormal_basis_checks(self):
        with pytest.raises(ValueError):
            OrthonormalBasis(np.array([[1.0, 1.0], [0.0, 1.0]]))


class TestNullspace:
    def test_coordinate_row(self):
        Y = nullspace_basis(np.array([[1.0, 0.0, 0.0]])).columns
        assert Y.shape == (3, 2)
        np.testing.assert_allclose(Y @ Y.T, np.diag([0.0, 1.0, 1.0]), atol=1e-15)

    def test_full_rank_square(self, rng):
        assert nullspace_basis(rng.standard_normal((4, 4))).k == 0

    def test_wta(self, rng):
        A = rng.standard_normal((10, 10)) + 5 * np.eye(10)
        W = rng.standard_normal((10, 3))
        Y = nullspace_basis(W.T @ A).columns
        assert Y.shape[1] == 7
        assert np.linalg.norm(W.T @ A @ Y) <= 1e-10

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2 ** 32 - 1))
    def test_rank_nullity(self, n, k, seed):
        g = np.random.default_rng(seed)
        r = min(k, n)
        M = g.standard_normal((k, r)) @ g.standard_normal((r, n)) if r < k else g.standard_normal((k, n))
        rank = np.linalg.matrix_rank(M)
        assert nullspace_basis(M).k + rank == n


class TestPseudoQuadform:
    def test_identity(self, rng):
        v = rng.standard_normal(5)
        assert pseudo_quadform(CovarianceFactor(np.eye(5)), v) == pytest.approx(v @ v, rel=1e-14)

    def test_projector_covariance(self, rng):
        Y = orthonormalize(rng.standard_normal((7, 3))).columns
        c = rng.standard_normal(3)
        assert pseudo_quadform(CovarianceFactor(Y), Y @ c) == pytest.approx(c @ c, rel=1e-12)

    def test_svd_oracle(self, rng):
        F = rng.standard_normal((6, 3))
        v = F @ rng.standard_normal(3)
        ref = v @ np.linalg.pinv(F @ F.T, rcond=1e-12) @ v
        assert pseudo_quadform(CovarianceFactor(F), v) == pytest.approx(ref, rel=1e-10)

    def test_out_of_range(self, rng):
        F = rng.standard_normal((6, 3))
        with pytest.raises(OutOfRange):
            pseudo_quadform(CovarianceFactor(F), rng.standard_normal(6))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 12), st.integers(0, 2 ** 32 - 1))
    def test_factor_quadform_property(self, n, seed):
        g = np.random.default_rng(seed)
        k = int(g.integers(1, n + 1))
        X = g.standard_normal((n, k))
        d = g.standard_normal(k)
        U, s, Vt = np.linalg.svd(X @ X.T)
        keep = s > 1e-12 * s[0]
        pinv = (U[:, keep] / s[keep]) @ U[:, keep].T
        ref = (X @ d) @ pinv @ (X @ d)
        assert pseudo_quadform(CovarianceFactor(X), X @ d) == pytest.approx(ref, rel=1e-9, abs=1e-12)


class TestRandomSpd:
    def test_scalar_case(self, rng):
        A = random_spd(SpdEnsembleSpec(1, 10.0), rng)
        assert A.shape == (1, 1) and A.to_dense()[0, 0] > 0

    def test_mean_eigenvalue(self):
        g = np.random.default_rng(7)
        means = [np.linalg.eigvalsh(random_spd(SpdEnsembleSpec(50, 10.0), g).to_dense()).mean() for _ in range(200)]
        assert 8.5 <= np.mean(means) <= 11.5

    def test_symmetric_and_cholesky(self, rng):
        for _ in range(20):
            a = random_spd(SpdEnsembleSpec(30, 10.0), rng).to_dense()
            assert np.array_equal(a, a.T)
            sla.cholesky(a)

    def test_bit_reproducible(self):
        a = random_spd(SpdEnsembleSpec(20, 10.0, seed=3)).to_dense()
        b = random_spd(SpdEnsembleSpec(20, 10.0, seed=3)).to_dense()
        assert np.array_equal(a, b)

    def test_spec_invariants(self):
        with pytest.raises(ValueError):
            SpdEnsembleSpec(0, 1.0)
        with pytest.raises(ValueError):
            SpdEnsembleSpec(3, 0.0)

    def test_geometric_spectrum(self, rng):
        lam = np.linalg.eigvalsh(geometric_spd(40, 1e3, rng).to_dense())
        np.testing.assert_allclose(lam, np.geomspace(1, 1e3, 40), rtol=1e-10)


class TestBaselineFactors:
    def test_inverse_factor(self, rng):
        a = random_spd(SpdEnsembleSpec(8, 10.0), rng).to_dense()
        L = inverse_factor(MatrixHandle.from_dense(a))
        np.testing.assert_allclose(L @ L.T, np.linalg.inv(a), rtol=1e-8, atol=1e-10)

    def test_normal_inverse_factor(self, rng):
        a = rng.standard_normal((6, 6)) + 4 * np.eye(6)
        L = normal_inverse_factor(MatrixHandle.from_dense(a))
        np.testing.assert_allclose(L @ L.T, np.linalg.inv(a.T @ a), rtol=1e-8, atol=1e-10)
