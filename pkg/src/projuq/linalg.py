"""Matrix handles, orthonormal bases, covariance factors and random SPD ensembles."""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import _kernels
from .errors import DimensionMismatch, OutOfRange, RankDeficient

#: singular values below ``RANK_RTOL * sigma_max`` count as zero
RANK_RTOL = 1e-12
#: relative tolerance of the support-membership gate in pseudo quadratic forms
RANGE_RTOL = 1e-8
#: allowed deviation of Q.T Q from the identity (spectral norm)
ORTHO_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class MatrixHandle:
    """Dense or CSR real matrix with a uniform apply / apply-transpose interface.

    Use the ``from_*`` constructors; the raw fields are validated on creation.
    """

    kind: str
    shape: tuple
    dense: np.ndarray = None
    indptr: np.ndarray = None
    indices: np.ndarray = None
    data: np.ndarray = None

    def __post_init__(self):
        n_rows, n_cols = self.shape
        if self.kind == "dense":
            if self.dense is None or self.dense.shape != (n_rows, n_cols):
                raise DimensionMismatch("dense storage does not match shape")
        elif self.kind == "csr":
            if self.indptr.shape != (n_rows + 1,) or self.indptr[0] != 0:
                raise ValueError("bad CSR row pointer array")
            if np.any(np.diff(self.indptr) < 0):
                raise ValueError("CSR row pointers must be nondecreasing")
            if self.indices.shape != self.data.shape or self.indptr[-1] != self.data.shape[0]:
                raise ValueError("CSR index/value arrays inconsistent with row pointers")
            if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n_cols):
                raise ValueError("CSR column index out of bounds")
        else:
            raise ValueError(f"unknown matrix kind {self.kind!r}")

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dense(cls, a):
        a = np.array(a, dtype=np.float64, ndmin=2)
        a.setflags(write=False)
        return cls("dense", a.shape, dense=a)

    @classmethod
    def from_csr(cls, indptr, indices, data, shape):
        return cls(
            "csr",
            (int(shape[0]), int(shape[1])),
            indptr=np.ascontiguousarray(indptr, dtype=np.int64),
            indices=np.ascontiguousarray(indices, dtype=np.int64),
            data=np.ascontiguousarray(data, dtype=np.float64),
        )

    @classmethod
    def from_coo(cls, rows, cols, vals, shape):
        """CSR from triplets; duplicate entries are summed, explicit zeros kept."""
        m = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        return cls.from_csr(m.indptr, m.indices, m.data, shape)

    @classmethod
    def from_scipy(cls, m):
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls.from_csr(m.indptr, m.indices, m.data, m.shape)

    # -- basic properties ------------------------------------------------

    @property
    def n_rows(self):
        return self.shape[0]

    @property
    def n_cols(self):
        return self.shape[1]

    @property
    def nnz(self):
        return self.n_rows * self.n_cols if self.kind == "dense" else int(self.data.shape[0])

    def apply(self, x):
        """``A @ x`` for a vector or an (n_cols, k) block."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.n_cols:
            raise DimensionMismatch(f"expected leading dimension {self.n_cols}, got {x.shape[0]}")
        if self.kind == "dense":
            return self.dense @ x
        X = x.reshape(x.shape[0], -1)
        Y = _kernels.csr_matmat(self.indptr, self.indices, self.data, X, self.n_rows)
        return Y.reshape((self.n_rows,) + x.shape[1:])

    def apply_t(self, x):
        """``A.T @ x``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.n_rows:
            raise DimensionMismatch(f"expected leading dimension {self.n_rows}, got {x.shape[0]}")
        if self.kind == "dense":
            return self.dense.T @ x
        X = x.reshape(x.shape[0], -1)
        Y = _kernels.csr_rmatmat(self.indptr, self.indices, self.data, X, self.n_cols)
        return Y.reshape((self.n_cols,) + x.shape[1:])

    __matmul__ = apply

    @property
    def T(self):
        if self.kind == "dense":
            return MatrixHandle.from_dense(self.dense.T)
        return MatrixHandle.from_scipy(self.to_scipy().T)

    def to_dense(self):
        if self.kind == "dense":
            return np.array(self.dense)
        return self.to_scipy().toarray()

    def to_scipy(self):
        if self.kind == "dense":
            return sp.csr_matrix(self.dense)
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def diagonal(self):
        if self.kind == "dense":
            return np.diag(self.dense).copy()
        return self.to_scipy().diagonal()

    def is_symmetric(self, rtol=0.0):
        if self.n_rows != self.n_cols:
            return False
        if self.kind == "dense":
            d = self.dense - self.dense.T
            scale = np.abs(self.dense).max(initial=0.0)
        else:
            s = self.to_scipy()
            d = (s - s.T).toarray() if self.n_rows <= 2048 else (s - s.T).data
            scale = np.abs(self.data).max(initial=0.0)
        return bool(np.abs(d).max(initial=0.0) <= rtol * scale)


def as_matrix(a):
    """Coerce arrays, scipy sparse matrices or handles to a :class:`MatrixHandle`."""
    if isinstance(a, MatrixHandle):
        return a
    if sp.issparse(a):
        return MatrixHandle.from_scipy(a)
    return MatrixHandle.from_dense(a)


def apply(A, x):
    return as_matrix(A).apply(x)


def apply_t(A, x):
    return as_matrix(A).apply_t(x)


# ---------------------------------------------------------------------------
# bases and factors
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OrthonormalBasis:
    """Columns with ``Q.T @ Q = I``."""

    columns: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.columns, dtype=np.float64)
        if Q.ndim != 2:
            raise DimensionMismatch("basis columns must form a 2-D array")
        if Q.shape[1] and np.linalg.norm(Q.T @ Q - np.eye(Q.shape[1]), 2) > ORTHO_TOL:
            raise ValueError("columns are not orthonormal")
        object.__setattr__(self, "columns", Q)

    @property
    def n(self):
        return self.columns.shape[0]

    @property
    def k(self):
        return self.columns.shape[1]

    def project(self, x):
        """Orthogonal projection of ``x`` onto the span."""
        Q = self.columns
        return Q @ (Q.T @ x)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.columns, dtype=dtype)


@dataclass(frozen=True, eq=False)
class CovarianceFactor:
    """Covariance ``factor @ factor.T`` kept in factored form.

    The numerical rank and a thin orthonormal basis of the range are derived
    lazily from an SVD of the factor (never of the n x n product).
    """

    factor: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.factor, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        object.__setattr__(self, "factor", f)

    @classmethod
    def empty(cls, n):
        return cls(np.zeros((n, 0)))

    @property
    def n(self):
        return self.factor.shape[0]

    @cached_property
    def _svd(self):
        if self.factor.shape[1] == 0:
            return np.zeros((self.n, 0)), np.zeros(0)
        U, s, _ = np.linalg.svd(self.factor, full_matrices=False)
        if s.size == 0 or s[0] == 0.0:
            return np.zeros((self.n, 0)), np.zeros(0)
        keep = s > RANK_RTOL * s[0]
        return U[:, keep], s[keep]

    @property
    def rank(self):
        return self._svd[1].shape[0]

    @property
    def range_basis(self):
        return self._svd[0]

    @property
    def eigenvalues(self):
        """Nonzero eigenvalues of the represented covariance."""
        return self._svd[1] ** 2

    def scaled(self, c):
        """Factor of ``c * Sigma``."""
        return CovarianceFactor(np.sqrt(c) * self.factor)

    def dense(self):
        return self.factor @ self.factor.T

    def range_residual(self, v):
        """``||v - P v|| / ||v||`` with ``P`` the orthogonal projector onto the range."""
        v = np.asarray(v, dtype=np.float64)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        U = self.range_basis
        return float(np.linalg.norm(v - U @ (U.T @ v)) / nv)


def orthonormalize(cols, rtol=RANK_RTOL):
    """Orthonormal basis of ``range(cols)`` via Gram-Schmidt with one reorthogonalization pass.

    Raises :class:`RankDeficient` naming the first dependent column.
    """
    C = np.array(cols, dtype=np.float64, ndmin=2)
    if C.ndim != 2:
        raise DimensionMismatch("expected a 2-D array of columns")
    n, k = C.shape
    if k > n:
        raise RankDeficient(n, f"{k} columns cannot be independent in dimension {n}")
    scale = np.linalg.norm(C)
    Q = np.empty((n, k))
    for j in range(k):
        w = C[:, j].copy()
        for _ in range(2):
            w -= Q[:, :j] @ (Q[:, :j].T @ w)
        r = np.linalg.norm(w)
        if r < rtol * scale or r == 0.0:
            raise RankDeficient(j)
        Q[:, j] = w / r
    return OrthonormalBasis(Q)


def nullspace_basis(M, tol=RANK_RTOL):
    """Orthonormal basis of ``Null(M)`` from a full SVD, rank cut at ``tol * sigma_max``."""
    M = np.array(M, dtype=np.float64, ndmin=2)
    k, n = M.shape
    if k == 0:
        return OrthonormalBasis(np.eye(n))
    _, s, Vt = np.linalg.svd(M, full_matrices=True)
    rank = int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0
    return OrthonormalBasis(Vt[rank:].T.copy())


def pseudo_quadform(cov, v, rtol=RANGE_RTOL):
    """``v.T @ pinv(Sigma) @ v`` for ``Sigma = F F.T`` without forming the pseudo-inverse.

    ``v`` must lie in ``range(Sigma)`` up to ``rtol`` relative residual,
    otherwise :class:`OutOfRange` is raised.
    """
    if not isinstance(cov, CovarianceFactor):
        cov = CovarianceFactor(cov)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != cov.n:
        raise DimensionMismatch(f"vector of length {v.shape[0]} for covariance of size {cov.n}")
    res = cov.range_residual(v)
    if res > rtol:
        raise OutOfRange(res)
    U, s = cov._svd
    c = (U.T @ v) / s
    return float(c @ c)


# ---------------------------------------------------------------------------
# random SPD ensemble
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpdEnsembleSpec:
    n: int
    scale: float = 10.0
    seed: int = field(default=0)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")


def haar_orthogonal(n, rng):
    """Haar-distributed orthogonal matrix (QR of a Gaussian, R-diagonal sign fix)."""
    Z = rng.standard_normal((n, n))
    Q, R = np.linalg.qr(Z)
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return Q * d


def random_spd_factors(n, scale, rng):
    """Eigenvectors and eigenvalues ``(U, lam)`` of a draw ``A = U diag(lam) U.T``."""
    U = haar_orthogonal(n, rng)
    lam = rng.exponential(scale, size=n)
    # an exact zero has probability zero but would break positivity
    lam = np.where(lam > 0.0, lam, np.finfo(float).tiny)
    return U, lam


def spd_from_factors(U, lam):
    A = (U * lam) @ U.T
    return 0.5 * (A + A.T)


def random_spd(spec, rng=None):
    """Draw from the random SPD ensemble: Haar eigenvectors, exponential eigenvalues."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    U, lam = random_spd_factors(spec.n, spec.scale, rng)
    return MatrixHandle.from_dense(spd_from_factors(U, lam))


def geometric_spd(n, cond, rng):
    """Haar eigenvectors with eigenvalues spaced geometrically in ``[1, cond]``.

    A stand-in for discretized operators: CG converges slowly and the A-norm
    error is spread over many eigencomponents.
    """
    if n < 1 or not cond >= 1:
        raise ValueError("need n >= 1 and cond >= 1")
    U = haar_orthogonal(n, rng)
    return MatrixHandle.from_dense(spd_from_factors(U, np.geomspace(1.0, cond, n)))


# ---------------------------------------------------------------------------
# dense helpers for the small-matrix baselines
# ---------------------------------------------------------------------------


def inverse_factor(A):
    """``L`` with ``L L.T = inv(A)`` for SPD ``A`` (dense, from a Cholesky factor)."""
    a = as_matrix(A).to_dense()
    C = sla.cholesky(a, lower=True)
    return sla.solve_triangular(C, np.eye(a.shape[0]), lower=True).T


def normal_inverse_factor(A):
    """``L`` with ``L L.T = inv(A.T A)``, namely ``inv(A)``."""
    a = as_matrix(A).to_dense()
    return sla.inv(a)
