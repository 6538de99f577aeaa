"""Test problems: Matrix Market files, the clamped biharmonic operator and a FEM heat problem."""
import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import trapezoid

from . import _kernels
from .calibration import calibrate_by_observation
from .errors import MatrixMarketError
from .linalg import MatrixHandle, as_matrix
from .projection import full_space_pair, krylov_builder, krylov_pair, make_p2

T_TARGET = 0.5
_FIELDS = ("real", "integer", "pattern")
_SYMMETRIES = ("general", "symmetric", "skew-symmetric")


# ---------------------------------------------------------------------------
# Matrix Market
# ---------------------------------------------------------------------------


def read_matrix_market(path):
    """Read a real coordinate or array Matrix Market file into CSR.

    Symmetric and skew-symmetric storage is expanded; duplicate coordinate
    entries are summed.  Malformed input raises :class:`MatrixMarketError`
    with the offending line number.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MatrixMarketError(1, "empty file")
    head = lines[0].split()
    if len(head) != 5 or head[0].lower() != "%%matrixmarket" or head[1].lower() != "matrix":
        raise MatrixMarketError(1, "missing '%%MatrixMarket matrix' banner")
    fmt, fld, sym = (t.lower() for t in head[2:])
    if fmt not in ("coordinate", "array"):
        raise MatrixMarketError(1, f"unsupported format {fmt!r}")
    if fld not in _FIELDS:
        raise MatrixMarketError(1, f"unsupported field {fld!r}")
    if sym not in _SYMMETRIES:
        raise MatrixMarketError(1, f"unsupported symmetry {sym!r}")
    if fmt == "array" and fld == "pattern":
        raise MatrixMarketError(1, "pattern field requires coordinate format")

    body = [(no, ln.split()) for no, ln in enumerate(lines[1:], start=2) if ln.strip() and not ln.lstrip().startswith("%")]
    if not body:
        raise MatrixMarketError(len(lines), "missing size line")
    size_no, size_tok = body[0]
    want = 3 if fmt == "coordinate" else 2
    if len(size_tok) != want:
        raise MatrixMarketError(size_no, f"size line needs {want} integers")
    try:
        dims = [int(t) for t in size_tok]
    except ValueError:
        raise MatrixMarketError(size_no, "size line is not integer") from None
    n_rows, n_cols = dims[0], dims[1]
    if n_rows < 0 or n_cols < 0 or (sym != "general" and n_rows != n_cols):
        raise MatrixMarketError(size_no, "invalid matrix dimensions")
    entries = body[1:]

    if fmt == "coordinate":
        nnz = dims[2]
        if len(entries) != nnz:
            line = entries[nnz][0] if len(entries) > nnz else len(lines)
            raise MatrixMarketError(line, f"expected {nnz} entries, found {len(entries)}")
        ntok = 2 if fld == "pattern" else 3
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.ones(nnz)
        for t, (no, tok) in enumerate(entries):
            if len(tok) != ntok:
                raise MatrixMarketError(no, f"expected {ntok} fields, got {len(tok)}")
            try:
                i, j = int(tok[0]), int(tok[1])
                if ntok == 3:
                    vals[t] = float(tok[2])
            except ValueError:
                raise MatrixMarketError(no, "unparsable entry") from None
            if not (1 <= i <= n_rows and 1 <= j <= n_cols):
                raise MatrixMarketError(no, f"index ({i}, {j}) outside {n_rows}x{n_cols}")
            if sym != "general" and j > i:
                raise MatrixMarketError(no, "symmetric storage must list the lower triangle")
            rows[t] = i - 1
            cols[t] = j - 1
    else:
        if sym == "general":
            pos = [(i, j) for j in range(n_cols) for i in range(n_rows)]
        elif sym == "symmetric":
            pos = [(i, j) for j in range(n_cols) for i in range(j, n_rows)]
        else:
            pos = [(i, j) for j in range(n_cols) for i in range(j + 1, n_rows)]
        if len(entries) != len(pos):
            line = entries[len(pos)][0] if len(entries) > len(pos) else len(lines)
            raise MatrixMarketError(line, f"expected {len(pos)} values, found {len(entries)}")
        rows = np.array([p[0] for p in pos], dtype=np.int64)
        cols = np.array([p[1] for p in pos], dtype=np.int64)
        vals = np.empty(len(pos))
        for t, (no, tok) in enumerate(entries):
            if len(tok) != 1:
                raise MatrixMarketError(no, "array entries need exactly one value")
            try:
                vals[t] = float(tok[0])
            except ValueError:
                raise MatrixMarketError(no, "unparsable value") from None

    if sym != "general":
        off = rows != cols
        sign = -1.0 if sym == "skew-symmetric" else 1.0
        rows, cols, vals = (
            np.concatenate([rows, cols[off]]),
            np.concatenate([cols, rows[off]]),
            np.concatenate([vals, sign * vals[off]]),
        )
    return MatrixHandle.from_coo(rows, cols, vals, (n_rows, n_cols))


def write_matrix_market(path, A, comment=None):
    """Write a matrix in coordinate format (lower triangle if exactly symmetric)."""
    A = as_matrix(A)
    m = A.to_scipy().tocoo()
    symmetric = A.is_symmetric()
    if symmetric:
        keep = m.row >= m.col
        rows, cols, vals = m.row[keep], m.col[keep], m.data[keep]
    else:
        rows, cols, vals = m.row, m.col, m.data
    order = np.lexsort((rows, cols))
    with open(path, "w") as fh:
        fh.write(f"%%MatrixMarket matrix coordinate real {'symmetric' if symmetric else 'general'}\n")
        if comment:
            for ln in comment.splitlines():
                fh.write(f"% {ln}\n")
        fh.write(f"{A.n_rows} {A.n_cols} {len(vals)}\n")
        for t in order:
            fh.write(f"{rows[t] + 1} {cols[t] + 1} {vals[t]:.17g}\n")


# ---------------------------------------------------------------------------
# biharmonic operator
# ---------------------------------------------------------------------------


def biharmonic_matrix(levels, backend=None):
    """Clamped-plate 13-point biharmonic matrix on a ``(2^levels - 1)^2`` interior grid.

    Unscaled stencil (centre 20, cross -8, diagonal 2, far 1).  Boundary
    values vanish; the zero normal derivative is imposed with a mirrored ghost
    node, which adds 1 to the centre for every clamped side within reach.
    Unknowns are ordered row-major, ``index = i * N + j``.
    """
    if levels < 2:
        raise ValueError("levels must be >= 2")
    N = 2 ** levels - 1
    rows, cols, vals = _kernels.biharmonic_triplets(N, backend=backend)
    return MatrixHandle.from_coo(rows, cols, vals, (N * N, N * N))


# ---------------------------------------------------------------------------
# FEM heat problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FemProblem:
    """Bilinear (tent-product) FEM discretisation of ``-Laplace T = point sources`` on the unit square."""

    L: int
    A: MatrixHandle
    T_target: float = T_TARGET

    @property
    def N(self):
        return 2 ** self.L - 1

    @property
    def n(self):
        return self.N * self.N

    @property
    def h(self):
        return 2.0 ** -self.L

    @property
    def nodes(self):
        return self.h * np.arange(1, self.N + 1)


def tent(x, L):
    """Hat function of half-width ``2^-L`` centred at zero."""
    h = 2.0 ** -L
    return np.clip(1.0 - np.abs(np.asarray(x, dtype=np.float64)) / h, 0.0, None)


def fem_assemble(L, T_target=T_TARGET):
    """Stiffness matrix ``K (x) M + M (x) K`` from exact 1-D tent integrals."""
    if L < 2:
        raise ValueError("L must be >= 2")
    N = 2 ** L - 1
    h = 2.0 ** -L
    e = np.ones(N)
    K1 = sp.diags([-e[1:], 2 * e, -e[1:]], [-1, 0, 1]) / h
    M1 = sp.diags([e[1:], 4 * e, e[1:]], [-1, 0, 1]) * (h / 6.0)
    A = sp.kron(K1, M1) + sp.kron(M1, K1)
    return FemProblem(L, MatrixHandle.from_scipy(A), T_target)


def source_points(r):
    """Four unit sources on the vertices of a square of circumradius ``r`` about (1/2, 1/2)."""
    c = r * math.cos(math.pi / 4)
    s = r * math.sin(math.pi / 4)
    return np.array([(0.5 + c, 0.5 + s), (0.5 - c, 0.5 + s), (0.5 - c, 0.5 - s), (0.5 + c, 0.5 - s)])


def fem_rhs(problem, r=None, points=None):
    """Load vector ``b_ij = sum_s phi_i(x_s) phi_j(y_s)`` of unit point sources."""
    pts = source_points(r) if points is None else np.atleast_2d(np.asarray(points, dtype=np.float64))
    if np.any(pts <= 0.0) or np.any(pts >= 1.0):
        raise ValueError("point sources must lie strictly inside the unit square")
    x = problem.nodes
    b = np.zeros((problem.N, problem.N))
    for px, py in pts:
        b += np.outer(tent(x - px, problem.L), tent(x - py, problem.L))
    return b.ravel()


def pde_loss(T, T_target=T_TARGET):
    """Mean squared deviation of nodal temperatures from the target."""
    T = np.asarray(T, dtype=np.float64)
    return np.mean((T - T_target) ** 2, axis=0)


def direct_solver(A):
    """Sparse LU factorization reused across right-hand sides."""
    lu = spla.splu(as_matrix(A).to_scipy().tocsc())
    return lu.solve


@dataclass(frozen=True, eq=False)
class LossCurve:
    r_grid: np.ndarray
    exact: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    m: int

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "exact", "mean", "sd"])
            for row in zip(self.r_grid, self.exact, self.mean, self.sd):
                w.writerow([f"{v:.17g}" for v in row])

    def mean_abs_gap(self):
        """Riemann approximation of ``int |mu_m(r) - exact(r)| dr`` over the grid."""
        gap = np.abs(self.mean - self.exact)
        return float(trapezoid(gap, self.r_grid)) if self.r_grid.size > 1 else float(gap.sum())


def default_r_grid(count=64):
    return np.linspace(0.05, 0.65, count)


def calibrate_fem(problem, m, k=1, seed=0, variant="cg_like"):
    """Observation-based Z calibration for the FEM matrix (done once per matrix and ``m``)."""
    rng = np.random.default_rng(seed)
    return calibrate_by_observation(
        problem.A,
        krylov_builder(variant),
        lambda g: g.standard_normal(problem.n),
        m,
        k,
        stat="Z",
        rng=rng,
    )


def pde_uncertainty_band(problem, r_grid, m, samples=30, calibration=None, seed=0):
    """Exact loss and posterior mean / sd of the loss along ``r_grid`` for projection size ``m``.

    Posterior samples are ``x_tilde + sqrt(E[s]) P2 y`` with the scale taken
    from ``calibration``; ``m >= n`` uses the full-space projection, whose
    posterior is a point mass.
    """
    if samples < 2:
        raise ValueError("need at least two posterior samples")
    A = problem.A
    n = problem.n
    r_grid = np.asarray(r_grid, dtype=np.float64)
    solve = direct_solver(A)
    full = m >= n
    if not full:
        if calibration is None:
            calibration = calibrate_fem(problem, m, seed=seed)
        scale = calibration.point_scale
        if scale is None:
            raise ValueError("calibration has no finite point scale")
    exact = np.empty(r_grid.size)
    mean = np.empty(r_grid.size)
    sd = np.empty(r_grid.size)
    for idx, r in enumerate(r_grid):
        b = fem_rhs(problem, r)
        exact[idx] = pde_loss(solve(b), problem.T_target)
        if full:
            xt = full_space_pair(A).solve(b)
            mean[idx] = pde_loss(xt, problem.T_target)
            sd[idx] = 0.0
            continue
        pair = krylov_pair(A, b, m, "cg_like")
        xt = pair.solve(b)
        P2 = make_p2(A, pair.W)
        rng = np.random.default_rng([seed, idx])
        T = xt[:, None] + math.sqrt(scale) * P2.apply(rng.standard_normal((n, samples)))
        losses = pde_loss(T, problem.T_target)
        mean[idx] = losses.mean()
        sd[idx] = losses.std(ddof=1)
    return LossCurve(r_grid, exact, mean, sd, m)
