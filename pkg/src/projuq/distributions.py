"""Degenerate Gaussian/Student laws, scalar densities, KDE and the L1 discrepancy."""
import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import gammaln

from . import _kernels
from .errors import DegenerateSample, DimensionMismatch, ImproperPosterior, OutOfRange
from .linalg import RANGE_RTOL, CovarianceFactor

_LOG_2PI = math.log(2.0 * math.pi)


def _as_factor(cov):
    return cov if isinstance(cov, CovarianceFactor) else CovarianceFactor(cov)


@dataclass(frozen=True, eq=False)
class DegenerateGaussian:
    """Normal law supported on ``mean + range(cov)``."""

    mean: np.ndarray
    cov: CovarianceFactor

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "cov", _as_factor(self.cov))
        if self.cov.n != self.mean.shape[0]:
            raise DimensionMismatch("mean and covariance sizes differ")

    @property
    def n(self):
        return self.mean.shape[0]

    def sample(self, rng, size=None):
        """One draw, or ``size`` draws stacked as rows."""
        F = self.cov.factor
        if size is None:
            return self.mean + F @ rng.standard_normal(F.shape[1])
        return self.mean[None, :] + rng.standard_normal((size, F.shape[1])) @ F.T

    def logpdf(self, x):
        """Log density on the support; raises :class:`OutOfRange` off it."""
        d = np.asarray(x, dtype=np.float64) - self.mean
        q = _quadform(self.cov, d)
        k = self.cov.rank
        return -0.5 * q - 0.5 * (k * _LOG_2PI + np.sum(np.log(self.cov.eigenvalues)))

    def pdf(self, x):
        try:
            return math.exp(self.logpdf(x))
        except OutOfRange:
            return 0.0


@dataclass(frozen=True, eq=False)
class DegenerateStudent:
    """Multivariate Student law with ``dof`` degrees of freedom on ``mean + range(scale)``."""

    mean: np.ndarray
    scale: CovarianceFactor
    dof: float

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "scale", _as_factor(self.scale))
        if not self.dof > 0:
            raise ValueError("degrees of freedom must be positive")
        if self.scale.n != self.mean.shape[0]:
            raise DimensionMismatch("mean and scale sizes differ")

    @property
    def n(self):
        return self.mean.shape[0]

    def sample(self, rng, size=None):
        # Gaussian with an inverse-gamma mixed scale, s ~ IG(dof/2, dof/2)
        F = self.scale.factor
        half = 0.5 * self.dof
        if size is None:
            s = half / rng.gamma(half)
            return self.mean + math.sqrt(s) * (F @ rng.standard_normal(F.shape[1]))
        s = half / rng.gamma(half, size=size)
        z = rng.standard_normal((size, F.shape[1])) @ F.T
        return self.mean[None, :] + np.sqrt(s)[:, None] * z

    def logpdf(self, x):
        d = np.asarray(x, dtype=np.float64) - self.mean
        q = _quadform(self.scale, d)
        k = self.scale.rank
        nu = self.dof
        logc = (
            gammaln(0.5 * (nu + k))
            - gammaln(0.5 * nu)
            - 0.5 * k * math.log(math.pi * nu)
            - 0.5 * np.sum(np.log(self.scale.eigenvalues))
        )
        return logc - 0.5 * (nu + k) * math.log1p(q / nu)

    def pdf(self, x):
        try:
            return math.exp(self.logpdf(x))
        except OutOfRange:
            return 0.0


def _quadform(cov, d):
    # same gate as linalg.pseudo_quadform, but reuse the cached SVD for speed
    res = cov.range_residual(d)
    if res > RANGE_RTOL:
        raise OutOfRange(res)
    if cov.rank == 0:
        return 0.0
    c = (cov.range_basis.T @ d) / np.sqrt(cov.eigenvalues)
    return float(c @ c)


def gaussian_sample(g, rng):
    return g.sample(rng)


def gaussian_logpdf(g, x):
    return g.logpdf(x)


def student_sample(t, rng):
    return t.sample(rng)


def student_logpdf(t, x):
    return t.logpdf(x)


# ---------------------------------------------------------------------------
# scale posterior
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalePosterior:
    """Inverse-gamma law ``IG(alpha, beta)`` on a covariance scale.

    ``alpha = beta = 0`` is the improper ``1/s`` prior; it is accepted as a
    starting point for conjugate updates but has no density.
    """

    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("inverse-gamma parameters must be nonnegative")

    @property
    def proper(self):
        return self.alpha > 0 and self.beta > 0

    @property
    def improper(self):
        return not self.proper

    def mean(self):
        if self.alpha <= 1:
            raise ImproperPosterior(f"inverse-gamma mean undefined for alpha={self.alpha} <= 1")
        return self.beta / (self.alpha - 1.0)

    def updated(self, d_alpha, d_beta):
        return ScalePosterior(self.alpha + d_alpha, self.beta + d_beta)

    def pdf(self, s):
        if not self.proper:
            raise ImproperPosterior("improper inverse-gamma has no density")
        return ig_pdf(s, self.alpha, self.beta)

    def sample(self, rng, size=None):
        if not self.proper:
            raise ImproperPosterior("cannot sample an improper inverse-gamma")
        return self.beta / rng.gamma(self.alpha, size=size)


def ig_pdf(x, alpha, beta):
    """Inverse-gamma density ``beta^a / Gamma(a) x^(-a-1) exp(-beta/x)``; zero off support."""
    return stats.invgamma.pdf(x, alpha, scale=beta)


def chi2_pdf(x, k):
    return stats.chi2.pdf(x, k)


def f_pdf(x, d1, d2):
    return stats.f.pdf(x, d1, d2)


# ---------------------------------------------------------------------------
# kernel density estimates and the L1 discrepancy
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if g.shape != v.shape or g.ndim != 1:
            raise DimensionMismatch("grid and values must be 1-D and aligned")
        if np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)

    def mass(self):
        return float(np.sum(self.values * cell_widths(self.grid)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["grid", "value"])
            for g, v in zip(self.grid, self.values):
                w.writerow([f"{g:.17g}", f"{v:.17g}"])

    @classmethod
    def from_csv(cls, path):
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(arr[:, 0], arr[:, 1])


def make_grid(lo, hi, count=512):
    """Midpoints of ``count`` equal cells covering ``[lo, hi]``."""
    edges = np.linspace(lo, hi, count + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def cell_widths(grid):
    """Widths of the cells centred on ``grid`` (boundaries at midpoints)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 1:
        return np.ones(1)
    mid = 0.5 * (grid[1:] + grid[:-1])
    edges = np.concatenate(([grid[0] - (mid[0] - grid[0])], mid, [grid[-1] + (grid[-1] - mid[-1])]))
    return np.diff(edges)


def silverman_bandwidth(samples):
    samples = np.asarray(samples, dtype=np.float64)
    return 1.06 * samples.std(ddof=1) * samples.size ** (-0.2)


def kde(samples, grid, bandwidth=None, backend=None):
    """Gaussian-kernel density estimate on ``grid`` (Silverman bandwidth by default)."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size < 2:
        raise DegenerateSample("need at least two samples")
    if not np.all(np.isfinite(samples)):
        raise DegenerateSample("samples contain non-finite values")
    h = silverman_bandwidth(samples) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise DegenerateSample("samples have zero spread")
    grid = np.asarray(grid, dtype=np.float64)
    return DensityEstimate(grid, _kernels.kde_eval(samples, grid, h, backend=backend))


def density_on_grid(pdf, grid):
    grid = np.asarray(grid, dtype=np.float64)
    return DensityEstimate(grid, pdf(grid))


def l1_distance(p, q):
    """Central Riemann approximation of ``int |p - q|``."""
    if p.grid.shape != q.grid.shape or not np.array_equal(p.grid, q.grid):
        raise DimensionMismatch("densities are tabulated on different grids")
    return float(np.sum(np.abs(p.values - q.values) * cell_widths(p.grid)))
