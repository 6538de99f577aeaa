"""Projection solves, Gaussian conditioning, projectors, Krylov bases and CG."""
import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import stats

from .distributions import DensityEstimate
from .errors import (
    BreakdownAt,
    DimensionMismatch,
    IllPosedConditioning,
    IllPosedProjection,
    NotSpd,
)
from .linalg import RANK_RTOL, CovarianceFactor, MatrixHandle, OrthonormalBasis, as_matrix, nullspace_basis, orthonormalize

#: condition-number limit of the projected core matrix W.T A V
CORE_COND_LIMIT = 1e14
#: a Krylov vector shorter than this fraction of ||A q_j|| signals an invariant subspace
BREAKDOWN_RTOL = 1e-12

VARIANTS = ("cg_like", "gmres_like")


def _block(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


@dataclass(frozen=True, eq=False)
class ProjectionPair:
    """Search basis ``V``, constraint basis ``W`` and the LU-factored core ``W.T A V``."""

    A: MatrixHandle
    V: np.ndarray
    W: np.ndarray
    AV: np.ndarray
    core: np.ndarray
    lu: tuple = field(repr=False, default=None)

    @classmethod
    def build(cls, A, V, W):
        A = as_matrix(A)
        V = _block(V)
        W = _block(W)
        n = A.n_rows
        if V.shape != W.shape or V.shape[0] != n or A.n_cols != n:
            raise DimensionMismatch(f"V {V.shape} and W {W.shape} incompatible with A {A.shape}")
        if V.shape[1] > n:
            raise DimensionMismatch("more search directions than unknowns")
        AV = A.apply(V)
        core = W.T @ AV
        lu = None
        if core.shape[0]:
            cond = np.linalg.cond(core)
            if not np.isfinite(cond) or cond > CORE_COND_LIMIT:
                raise IllPosedProjection(f"W.T A V is singular or ill-conditioned (cond={cond:.3e})")
            lu = sla.lu_factor(core)
        return cls(A, V, W, AV, core, lu)

    @property
    def n(self):
        return self.V.shape[0]

    @property
    def m(self):
        return self.V.shape[1]

    def solve_core(self, r):
        """``inv(W.T A V) @ r``."""
        if self.m == 0:
            return np.zeros_like(np.asarray(r, dtype=np.float64))
        return sla.lu_solve(self.lu, r)

    def coefficients(self, b, x0=None):
        """``delta = inv(W.T A V) W.T (b - A x0)``; ``b`` may hold several right-hand sides as columns."""
        r = np.asarray(b, dtype=np.float64)
        if x0 is not None:
            r = r - self.A.apply(x0)
        return self.solve_core(self.W.T @ r)

    def solve(self, b, x0=None):
        delta = self.coefficients(b, x0)
        x = self.V @ delta
        return x if x0 is None else x + x0


def full_space_pair(A):
    """``V = W = I``: the projection reproduces ``inv(A) b`` exactly."""
    A = as_matrix(A)
    I = np.eye(A.n_rows)
    return ProjectionPair.build(A, I, I)


def petrov_galerkin_solve(A, b, x0, pair):
    """``x0 + V inv(W.T A V) W.T (b - A x0)``."""
    if as_matrix(A).shape != pair.A.shape:
        raise DimensionMismatch("pair was built for a different matrix")
    return pair.solve(b, x0)


def general_posterior(sigma0, A, S, b, x0):
    """Condition ``N(x0, Sigma0)`` on ``S.T A x = S.T b``.

    ``sigma0`` is a :class:`CovarianceFactor` ``L`` (``Sigma0 = L L.T``).  With
    ``M = L.T A.T S`` the posterior covariance is ``L (I - M pinv(M)) L.T``; it
    is returned as the factor ``L Q`` where ``Q`` spans ``range(M)``'s
    orthogonal complement, so it is PSD by construction.
    """
    A = as_matrix(A)
    L = sigma0.factor if isinstance(sigma0, CovarianceFactor) else np.asarray(sigma0, dtype=np.float64)
    S = _block(S)
    b = np.asarray(b, dtype=np.float64)
    x0 = np.zeros(A.n_cols) if x0 is None else np.asarray(x0, dtype=np.float64)
    M = A.apply(L).T @ S
    k, m = M.shape
    if m > k:
        raise IllPosedConditioning(f"{m} observations exceed prior rank {k}")
    U, s, Vt = np.linalg.svd(M, full_matrices=True)
    if m and (s[-1] <= RANK_RTOL * s[0] or s[0] == 0.0):
        raise IllPosedConditioning("S.T A Sigma0 A.T S is singular")
    r = S.T @ (b - A.apply(x0))
    coef = U[:, :m] @ ((Vt @ r) / s) if m else np.zeros(k)
    mean = x0 + L @ coef
    return mean, CovarianceFactor(L @ U[:, m:])


# ---------------------------------------------------------------------------
# projectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FactoredProjector:
    """Projector onto ``Null(W.T A)`` applied without forming an n x n matrix.

    ``oblique``:    ``x - V inv(W.T A V) W.T A x``  (stores the pair)
    ``orthogonal``: ``x - Q Q.T x`` with ``Q`` an orthonormal basis of ``range(A.T W)``
    """

    kind: str
    n: int
    pair: ProjectionPair = None
    Q: np.ndarray = None

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "oblique":
            p = self.pair
            if p.m == 0:
                return x.copy()
            return x - p.V @ p.solve_core(p.W.T @ p.A.apply(x))
        return x - self.Q @ (self.Q.T @ x)

    __matmul__ = apply

    @property
    def rank(self):
        k = self.pair.m if self.kind == "oblique" else self.Q.shape[1]
        return self.n - k

    def densify(self, max_n=64):
        if self.n > max_n:
            raise ValueError(f"refusing to densify a {self.n}x{self.n} projector (max_n={max_n})")
        return self.apply(np.eye(self.n))

    def range_basis(self):
        """Orthonormal basis of the range, ``Null(W.T A)`` (dense n x (n - m))."""
        if self.kind == "orthogonal":
            return nullspace_basis(self.Q.T)
        p = self.pair
        return nullspace_basis(p.W.T @ p.A.apply(np.eye(self.n)))

    def covariance_factor(self):
        """For the orthogonal projector: ``F`` with ``F F.T = P2``."""
        if self.kind != "orthogonal":
            raise ValueError("the oblique projector is not a covariance")
        return CovarianceFactor(self.range_basis().columns)


def make_p1(pair, A=None):
    if A is not None and as_matrix(A).shape != pair.A.shape:
        raise DimensionMismatch("pair was built for a different matrix")
    return FactoredProjector("oblique", pair.n, pair=pair)


def make_p2(A, W):
    """Orthogonal projector onto ``Null(W.T A)`` built from ``range(A.T W)``."""
    A = as_matrix(A)
    W = _block(W)
    if W.shape[1] == 0:
        return FactoredProjector("orthogonal", A.n_cols, Q=np.zeros((A.n_cols, 0)))
    Q = orthonormalize(A.apply_t(W)).columns
    return FactoredProjector("orthogonal", A.n_cols, Q=Q)


# ---------------------------------------------------------------------------
# Krylov bases
# ---------------------------------------------------------------------------


def krylov_basis(A, start, m, orthonormal=True, breakdown_rtol=BREAKDOWN_RTOL):
    """Basis of ``K_m(A, start)``.

    Orthonormal (Arnoldi with full reorthogonalization) by default; with
    ``orthonormal=False`` the raw monomial columns ``[s, A s, ..., A^(m-1) s]``
    for ``s = start / ||start||`` are returned.  Raises :class:`BreakdownAt`
    when the space becomes invariant before ``m`` vectors.
    """
    A = as_matrix(A)
    start = np.asarray(start, dtype=np.float64)
    n = A.n_rows
    if m > n:
        raise DimensionMismatch(f"m={m} exceeds n={n}")
    beta = np.linalg.norm(start)
    if beta == 0.0:
        raise BreakdownAt(0, "Krylov start vector is zero")
    Q = np.empty((n, m))
    raw = None if orthonormal else np.empty((n, m))
    if m == 0:
        return Q
    Q[:, 0] = start / beta
    if raw is not None:
        raw[:, 0] = Q[:, 0]
    for j in range(1, m):
        if raw is not None:
            raw[:, j] = A.apply(raw[:, j - 1])
        w = A.apply(Q[:, j - 1])
        aw = np.linalg.norm(w)
        for _ in range(2):
            w -= Q[:, :j] @ (Q[:, :j].T @ w)
        h = np.linalg.norm(w)
        if h <= breakdown_rtol * aw or h == 0.0:
            raise BreakdownAt(j)
        Q[:, j] = w / h
    return Q if orthonormal else raw


def krylov_pair(A, b, m, variant="cg_like", orthonormal=True):
    """``V`` spans ``K_m(A, b)``; ``W = V`` (CG-like) or ``W = A V`` (GMRES-like)."""
    A = as_matrix(A)
    V = krylov_basis(A, b, m, orthonormal=orthonormal)
    if variant == "cg_like":
        W = V
    elif variant == "gmres_like":
        W = A.apply(V)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return ProjectionPair.build(A, V, W)


def krylov_builder(variant="cg_like", seed_vector=None, orthonormal=True):
    """``(A, b, m) -> ProjectionPair`` for calibration loops.

    With ``seed_vector`` the Krylov space ``K_m(A, seed_vector)`` ignores ``b``.
    """

    def build(A, b, m):
        start = b if seed_vector is None else seed_vector
        return krylov_pair(A, start, m, variant=variant, orthonormal=orthonormal)

    return build


# ---------------------------------------------------------------------------
# conjugate gradient
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class CgTrace:
    """Record of plain conjugate gradient.

    Index ``i`` of ``gammas``, ``etas``, ``deltas``, ``gains`` and
    ``directions[:, i]`` refers to iteration ``i + 1``;
    ``residual_norms[i]`` is ``||r_i||`` starting from ``r_0``.
    """

    A: MatrixHandle
    b: np.ndarray
    x0: np.ndarray
    x: np.ndarray
    directions: np.ndarray
    gammas: np.ndarray
    etas: np.ndarray
    deltas: np.ndarray
    residual_norms: np.ndarray
    iterates: np.ndarray = None
    residuals: np.ndarray = None

    @property
    def iterations(self):
        return self.gammas.shape[0]

    @property
    def gains(self):
        """``gamma_i ||r_(i-1)||^2`` per iteration."""
        return self.gammas * self.residual_norms[:-1] ** 2

    def scaled_directions(self):
        """``v_i / sqrt(eta_i)``, A-normalized search directions."""
        return self.directions / np.sqrt(self.etas)

    def iterate(self, i):
        if self.iterates is None:
            raise ValueError("trace was recorded without iterates")
        return self.iterates[:, i]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual_norm", "gamma", "gain"])
            for i, (rn, g, gain) in enumerate(zip(self.residual_norms[1:], self.gammas, self.gains), start=1):
                w.writerow([i, f"{rn:.17g}", f"{g:.17g}", f"{gain:.17g}"])


def cg(A, b, x0=None, m=None, store_iterates=True, store_residuals=False, rtol=0.0):
    """Conjugate gradient for SPD ``A``, ``m`` sweeps (default ``n``).

    Stops early once ``||r_i|| <= rtol ||r_0||`` (with ``rtol=0`` only on an
    exactly vanishing residual).  Raises :class:`NotSpd` on nonpositive
    curvature ``v.T A v``.
    """
    A = as_matrix(A)
    b = np.asarray(b, dtype=np.float64)
    n = A.n_rows
    m = n if m is None else int(m)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    x_init = x.copy()
    r = b - A.apply(x)
    rr = r @ r
    rr0 = rr
    v = r.copy()
    dirs, gammas, etas, deltas, rnorms = [], [], [], [], [np.sqrt(rr)]
    its = [x.copy()] if store_iterates else None
    res = [r.copy()] if store_residuals else None
    for i in range(1, m + 1):
        if rr == 0.0 or rr <= rtol * rtol * rr0:
            break
        Av = A.apply(v)
        eta = v @ Av
        if not eta > 0:
            raise NotSpd(i, float(eta))
        gamma = rr / eta
        dirs.append(v.copy())
        x = x + gamma * v
        r = r - gamma * Av
        rr_new = r @ r
        delta = rr_new / rr
        v = r + delta * v
        gammas.append(gamma)
        etas.append(eta)
        deltas.append(delta)
        rnorms.append(np.sqrt(rr_new))
        rr = rr_new
        if its is not None:
            its.append(x.copy())
        if res is not None:
            res.append(r.copy())
    return CgTrace(
        A=A,
        b=b,
        x0=x_init,
        x=x,
        directions=np.array(dirs).T if dirs else np.zeros((n, 0)),
        gammas=np.array(gammas),
        etas=np.array(etas),
        deltas=np.array(deltas),
        residual_norms=np.array(rnorms),
        iterates=np.array(its).T if its is not None else None,
        residuals=np.array(res).T if res is not None else None,
    )


# ---------------------------------------------------------------------------
# structured priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StructuredPrior:
    """``x = x0 + V v + sqrt(tail_scale) T y`` with ``W.T A T = 0``.

    ``tail`` is either a :class:`CovarianceFactor` (``T`` = its factor, for
    example ``Y G^(1/2)``) or an orthogonal :class:`FactoredProjector`
    (``T = P2``, so the tail covariance is ``tail_scale * P2``).
    """

    x0: np.ndarray
    V: np.ndarray
    tail: object
    tail_scale: float = 1.0

    @classmethod
    def build(cls, pair, tail, x0=None, tail_scale=1.0, check=True, rtol=1e-8):
        x0 = np.zeros(pair.n) if x0 is None else np.asarray(x0, dtype=np.float64)
        prior = cls(x0, pair.V, tail, float(tail_scale))
        if check:
            rng = np.random.default_rng(0)
            T = prior._tail_apply(rng.standard_normal((prior._tail_width, 4)))
            AT = pair.A.apply(T)
            lhs = np.linalg.norm(pair.W.T @ AT)
            ref = np.linalg.norm(pair.W) * np.linalg.norm(AT)
            if lhs > rtol * ref:
                raise ValueError(f"tail is not in Null(W.T A): relative residual {lhs / ref:.3e}")
        return prior

    @property
    def n(self):
        return self.x0.shape[0]

    @property
    def _tail_width(self):
        if isinstance(self.tail, CovarianceFactor):
            return self.tail.factor.shape[1]
        return self.n

    def _tail_apply(self, y):
        if isinstance(self.tail, CovarianceFactor):
            return self.tail.factor @ y
        return self.tail.apply(y)

    def sample(self, rng, size=None):
        """One draw, or ``size`` draws as columns of an (n, size) array."""
        k = self.V.shape[1]
        shape = () if size is None else (size,)
        v = rng.standard_normal((k,) + shape)
        y = rng.standard_normal((self._tail_width,) + shape)
        x = self.V @ v + np.sqrt(self.tail_scale) * self._tail_apply(y)
        return x + (self.x0 if size is None else self.x0[:, None])

    def tail_factor(self):
        """Factor of the tail covariance (dense range basis for projector tails)."""
        if isinstance(self.tail, CovarianceFactor):
            return self.tail.scaled(self.tail_scale)
        return self.tail.covariance_factor().scaled(self.tail_scale)

    def covariance_factor(self):
        return CovarianceFactor(np.hstack([self.V, self.tail_factor().factor]))


def sample_prior_solution(prior, rng):
    return prior.sample(rng)


def nullspace_tail(pair, G=None):
    """``Y G^(1/2)`` with ``Y`` an orthonormal basis of ``Null(W.T A)``."""
    Y = nullspace_basis(pair.W.T @ pair.A.apply(np.eye(pair.n))).columns
    if G is None:
        return CovarianceFactor(Y)
    G = np.asarray(G, dtype=np.float64)
    if G.ndim == 1:
        return CovarianceFactor(Y * np.sqrt(G))
    w, Z = np.linalg.eigh(G)
    return CovarianceFactor(Y @ (Z * np.sqrt(np.clip(w, 0.0, None))))


# ---------------------------------------------------------------------------
# error alignment
# ---------------------------------------------------------------------------


def alignment_cosine(error, Ysub):
    """``e.T P e / e.T e`` with ``P`` the orthogonal projector onto ``span(Ysub)``.

    ``Ysub`` must have orthonormal columns.  ``error`` may be a vector or an
    (n, k) block of errors (one value per column).
    """
    Y = np.asarray(Ysub, dtype=np.float64)
    e = np.asarray(error, dtype=np.float64)
    ee = np.sum(e * e, axis=0)
    if np.any(ee == 0.0):
        raise ValueError("alignment undefined for a zero error")
    c = Y.T @ e
    return np.sum(c * c, axis=0) / ee


def _alignment_scale(n, m, p, s):
    if p < 1 or n - m - p < 1:
        raise ValueError("need p >= 1 and n - m - p >= 1")
    return (n - m - p) / (s * s * p)


def alignment_cdf(n, m, p, s, c):
    """``P(cos <= c)`` where ``cos = 1 / (1 + a z)``, ``z ~ F(n-m-p, p)``."""
    a = _alignment_scale(n, m, p, s)
    c = np.asarray(c, dtype=np.float64)
    with np.errstate(divide="ignore"):
        z = (1.0 / c - 1.0) / a
    return np.where(c <= 0, 0.0, np.where(c >= 1, 1.0, stats.f.sf(z, n - m - p, p)))


def alignment_density(n, m, p, s, grid):
    """Density of the alignment cosine on ``grid`` (change of variables from F)."""
    a = _alignment_scale(n, m, p, s)
    grid = np.asarray(grid, dtype=np.float64)
    inside = (grid > 0) & (grid < 1)
    vals = np.zeros_like(grid)
    c = grid[inside]
    z = (1.0 / c - 1.0) / a
    vals[inside] = stats.f.pdf(z, n - m - p, p) / (a * c * c)
    return DensityEstimate(grid, vals)


def alignment_tail(pair, p, s):
    """Tail factor ``Y G^(1/2)`` with ``G = s^2 I_p (+) I`` and the block ``Y[:, :p]``."""
    Y = nullspace_basis(pair.W.T @ pair.A.apply(np.eye(pair.n))).columns
    g = np.ones(Y.shape[1])
    g[:p] = s
    return CovarianceFactor(Y * g), OrthonormalBasis(Y[:, :p].copy())
