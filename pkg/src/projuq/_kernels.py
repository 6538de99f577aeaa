"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with the same signature.  The numba
versions are used unless ``PROJUQ_DISABLE_NUMBA`` is set to a truthy value
or numba cannot be imported.  Both paths use a fixed, sequential summation
order so results are reproducible run to run (the two paths may differ from
each other in the last bits).
"""
import math
import os

import numpy as np

_DISABLED = os.environ.get("PROJUQ_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by PROJUQ_DISABLE_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# stencil of the 2-D biharmonic operator: (di, dj, weight)
_BIHARMONIC_STENCIL = np.array(
    [
        (0, 0, 20.0),
        (-1, 0, -8.0), (1, 0, -8.0), (0, -1, -8.0), (0, 1, -8.0),
        (-1, -1, 2.0), (-1, 1, 2.0), (1, -1, 2.0), (1, 1, 2.0),
        (-2, 0, 1.0), (2, 0, 1.0), (0, -2, 1.0), (0, 2, 1.0),
    ]
)


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def _csr_matmat_np(indptr, indices, data, X, n_rows):
    rows = np.repeat(np.arange(n_rows), np.diff(indptr))
    Y = np.empty((n_rows, X.shape[1]))
    for c in range(X.shape[1]):
        Y[:, c] = np.bincount(rows, weights=data * X[indices, c], minlength=n_rows)
    return Y


def _csr_rmatmat_np(indptr, indices, data, X, n_cols):
    n_rows = indptr.shape[0] - 1
    rows = np.repeat(np.arange(n_rows), np.diff(indptr))
    Y = np.empty((n_cols, X.shape[1]))
    for c in range(X.shape[1]):
        Y[:, c] = np.bincount(indices, weights=data * X[rows, c], minlength=n_cols)
    return Y


def _kde_eval_np(samples, grid, h, chunk=256):
    out = np.empty(grid.shape[0])
    norm = _INV_SQRT_2PI / (samples.shape[0] * h)
    for start in range(0, grid.shape[0], chunk):
        g = grid[start:start + chunk]
        u = (g[:, None] - samples[None, :]) / h
        out[start:start + chunk] = np.exp(-0.5 * u * u).sum(axis=1) * norm
    return out


def _biharmonic_triplets_np(N):
    ii, jj = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    ii = ii.ravel()
    jj = jj.ravel()
    rows, cols, vals = [], [], []
    for di, dj, w in _BIHARMONIC_STENCIL:
        di = int(di)
        dj = int(dj)
        ti = ii + di
        tj = jj + dj
        # clamped edge: ghost two cells out mirrors onto the node itself
        ti = np.where(ti == -2, ii, ti)
        ti = np.where(ti == N + 1, ii, ti)
        tj = np.where(tj == -2, jj, tj)
        tj = np.where(tj == N + 1, jj, tj)
        keep = (ti >= 0) & (ti < N) & (tj >= 0) & (tj < N)
        rows.append((ii * N + jj)[keep])
        cols.append((ti * N + tj)[keep])
        vals.append(np.full(keep.sum(), w))
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _csr_matmat_nb(indptr, indices, data, X, n_rows):
        k = X.shape[1]
        Y = np.zeros((n_rows, k))
        for i in range(n_rows):
            for p in range(indptr[i], indptr[i + 1]):
                a = data[p]
                j = indices[p]
                for c in range(k):
                    Y[i, c] += a * X[j, c]
        return Y

    @njit(cache=True)
    def _csr_rmatmat_nb(indptr, indices, data, X, n_cols):
        n_rows = indptr.shape[0] - 1
        k = X.shape[1]
        Y = np.zeros((n_cols, k))
        for i in range(n_rows):
            for p in range(indptr[i], indptr[i + 1]):
                a = data[p]
                j = indices[p]
                for c in range(k):
                    Y[j, c] += a * X[i, c]
        return Y

    @njit(cache=True)
    def _kde_eval_nb(samples, grid, h):
        n = samples.shape[0]
        out = np.empty(grid.shape[0])
        norm = _INV_SQRT_2PI / (n * h)
        for g in range(grid.shape[0]):
            acc = 0.0
            x = grid[g]
            for s in range(n):
                u = (x - samples[s]) / h
                acc += math.exp(-0.5 * u * u)
            out[g] = acc * norm
        return out

    @njit(cache=True)
    def _biharmonic_triplets_nb(N, stencil):
        cap = N * N * stencil.shape[0]
        rows = np.empty(cap, dtype=np.int64)
        cols = np.empty(cap, dtype=np.int64)
        vals = np.empty(cap)
        nnz = 0
        for s in range(stencil.shape[0]):
            di = int(stencil[s, 0])
            dj = int(stencil[s, 1])
            w = stencil[s, 2]
            for i in range(N):
                for j in range(N):
                    ti = i + di
                    tj = j + dj
                    if ti == -2 or ti == N + 1:
                        ti = i
                    if tj == -2 or tj == N + 1:
                        tj = j
                    if ti < 0 or ti >= N or tj < 0 or tj >= N:
                        continue
                    rows[nnz] = i * N + j
                    cols[nnz] = ti * N + tj
                    vals[nnz] = w
                    nnz += 1
        return rows[:nnz], cols[:nnz], vals[:nnz]


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def csr_matmat(indptr, indices, data, X, n_rows, backend=None):
    """``Y = A @ X`` for CSR ``A`` and 2-D ``X``."""
    if _use_numba(backend):
        return _csr_matmat_nb(indptr, indices, data, np.ascontiguousarray(X, dtype=np.float64), n_rows)
    return _csr_matmat_np(indptr, indices, data, np.asarray(X, dtype=np.float64), n_rows)


def csr_rmatmat(indptr, indices, data, X, n_cols, backend=None):
    """``Y = A.T @ X`` for CSR ``A`` and 2-D ``X``."""
    if _use_numba(backend):
        return _csr_rmatmat_nb(indptr, indices, data, np.ascontiguousarray(X, dtype=np.float64), n_cols)
    return _csr_rmatmat_np(indptr, indices, data, np.asarray(X, dtype=np.float64), n_cols)


def kde_eval(samples, grid, h, backend=None):
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if _use_numba(backend):
        return _kde_eval_nb(samples, grid, float(h))
    return _kde_eval_np(samples, grid, float(h))


def biharmonic_triplets(N, backend=None):
    """COO triplets of the clamped 13-point biharmonic stencil on an N x N grid.

    Duplicate (row, col) pairs occur next to the boundary and must be summed.
    """
    if _use_numba(backend):
        return _biharmonic_triplets_nb(int(N), _BIHARMONIC_STENCIL)
    return _biharmonic_triplets_np(int(N))


def _use_numba(backend):
    if backend is None:
        return HAVE_NUMBA
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but unavailable")
        return True
    if backend == "numpy":
        return False
    raise ValueError(f"unknown backend {backend!r}")
