"""Ensemble assessment of posterior calibration.

Random SPD matrices are drawn, each is solved for several random exact
solutions with a Krylov projection method, and the resulting errors are turned
into Z-statistics under one of several posterior covariances.  The empirical
density of the statistic is compared with its theoretical target (chi-squared
or F) through the L1 distance of kernel density estimates.

Regimes
-------
``point``
    The calibrated scale is replaced by its posterior mean ``E[s]`` and the
    statistic is compared with ``chi2(n - m)``.
``hierarchical``
    The scale is marginalized; the statistic is divided by ``n - m`` and
    compared with ``F(n - m, 2 alpha_post)``.
``exact``
    The generating tail scale is used as is.  Only meaningful when exact
    solutions are drawn from the structured prior itself; the statistic is then
    exactly ``chi2(n - m)``.
"""
import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .calibration import (
    calibrate_by_observation,
    calibrate_cheap,
    reid_covariance,
    reid_underestimate,
    s_statistic_samples,
)
from .distributions import DensityEstimate, ScalePosterior, cell_widths, kde, l1_distance, make_grid
from .errors import (
    BreakdownAt,
    DegenerateSample,
    IllPosedConditioning,
    IllPosedProjection,
    ImproperPosterior,
    OutOfRange,
    ProjUQError,
)
from .linalg import RANGE_RTOL, CovarianceFactor, SpdEnsembleSpec, as_matrix, inverse_factor, normal_inverse_factor, random_spd
from .projection import VARIANTS, FactoredProjector, cg, general_posterior, krylov_builder, make_p2

_LOG = logging.getLogger(__name__)

PRIOR_MODES = ("trivial", "inverse", "normal_inverse", "cheap", "expensive")
REGIMES = ("point", "hierarchical", "exact")
BASES = ("krylov_b", "krylov_seed")
SOLUTIONS = ("standard", "prior")
#: dense baselines are refused above this size
BASELINE_MAX_N = 512
#: abort when more than this fraction of solves break down
MAX_BREAKDOWN_FRACTION = 0.1
MIN_DISCREPANCY_SAMPLES = 50


@dataclass(frozen=True)
class AssessmentSpec:
    """Parameters of one assessment run.

    ``m`` may be an int or a list (a sweep); :meth:`configs` splits a sweep
    into single-``m`` specs.  ``basis='krylov_seed'`` builds the Krylov space
    from a random vector drawn once per matrix instead of from ``b``, which
    makes the search space independent of the solution; it is required for
    ``solution='prior'``.
    """

    n: int = 100
    m: object = 10
    M: int = 50
    N: int = 5
    variant: str = "cg_like"
    prior_mode: str = "expensive"
    regime: str = "point"
    k: int = 1
    master_seed: int = 0
    scale: float = 10.0
    alpha: float = 0.0
    beta: float = 0.0
    basis: str = "krylov_b"
    solution: str = "standard"
    tail_scale: float = 1.0

    @property
    def m_values(self):
        return list(self.m) if isinstance(self.m, (list, tuple)) else [int(self.m)]

    def configs(self):
        return [AssessmentSpec(**{**asdict(self), "m": int(m)}) for m in self.m_values]

    def validate(self):
        if self.n < 1 or self.M < 1 or self.N < 1:
            raise ValueError("n, M and N must be positive")
        for m in self.m_values:
            if not 0 <= m < self.n:
                raise ValueError(f"need 0 <= m < n, got m={m}, n={self.n}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.basis not in BASES:
            raise ValueError(f"basis must be one of {BASES}")
        if self.solution not in SOLUTIONS:
            raise ValueError(f"solution must be one of {SOLUTIONS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.scale <= 0 or self.tail_scale <= 0:
            raise ValueError("scales must be positive")
        baseline = self.prior_mode in ("trivial", "inverse", "normal_inverse")
        if baseline and self.regime != "point":
            raise ValueError(f"prior_mode {self.prior_mode!r} has no calibrated scale; use regime 'point'")
        if self.prior_mode in ("inverse", "normal_inverse") and self.n > BASELINE_MAX_N:
            raise ValueError(f"dense baselines are limited to n <= {BASELINE_MAX_N}")
        if self.solution == "prior":
            if self.basis != "krylov_seed":
                raise ValueError("prior-consistent solutions need basis='krylov_seed'")
            if self.prior_mode not in ("cheap", "expensive"):
                raise ValueError("prior-consistent solutions need a structured prior mode")
        if self.regime == "exact" and self.prior_mode not in ("cheap", "expensive"):
            raise ValueError("regime 'exact' needs a structured prior mode")
        for m in self.m_values:
            a = self.alpha_post(m)
            if self.regime == "point" and not baseline and a <= 1:
                raise ImproperPosterior(f"E[s] undefined: posterior alpha {a} <= 1 at m={m}")
            if self.regime == "hierarchical" and a <= 0:
                raise ImproperPosterior(f"posterior alpha {a} <= 0 at m={m}")
        return self

    def alpha_post(self, m):
        if self.prior_mode == "cheap":
            return self.alpha + 0.5 * m
        if self.prior_mode == "expensive":
            return self.alpha + 0.5 * self.k * (self.n - m)
        return math.inf

    def target(self, m):
        """``('chi2', (df,))`` or ``('f', (d1, d2))``."""
        if self.regime == "hierarchical":
            return ("f", (self.n - m, 2.0 * self.alpha_post(m)))
        return ("chi2", (self.n - m,))


@dataclass(frozen=True, eq=False)
class StatisticSeries:
    samples: np.ndarray
    target: tuple
    m: int
    kind: str = "Z"
    breakdown_count: int = 0
    max_leak: float = 0.0
    spec: AssessmentSpec = field(default=None, compare=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError("statistic samples must be finite and nonnegative")
        object.__setattr__(self, "samples", s)

    def target_dist(self):
        name, params = self.target
        return stats.chi2(*params) if name == "chi2" else stats.f(*params)

    def target_pdf(self, x):
        return self.target_dist().pdf(x)

    def ks(self):
        """Kolmogorov-Smirnov distance between the samples and the target."""
        return float(stats.kstest(self.samples, self.target_dist().cdf).statistic)

    def describe_target(self):
        name, params = self.target
        return f"{name}({', '.join(f'{p:g}' for p in params)})"

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "statistic"])
            for i, v in enumerate(self.samples):
                w.writerow([i, f"{v:.17g}"])


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def _z_with_leak(xstar, xm, cov, scale, clamp):
    d = np.asarray(xstar, dtype=np.float64) - np.asarray(xm, dtype=np.float64)
    nd = np.linalg.norm(d)
    if isinstance(cov, FactoredProjector):
        if cov.kind != "orthogonal":
            raise ValueError("only the orthogonal projector is a covariance")
        pd = cov.apply(d)
        leak = float(np.linalg.norm(d - pd) / nd) if nd else 0.0
        rank = cov.rank
    else:
        cov = cov if isinstance(cov, CovarianceFactor) else CovarianceFactor(cov)
        U = cov.range_basis
        c = U.T @ d
        pd = U @ c
        leak = float(np.linalg.norm(d - pd) / nd) if nd else 0.0
        rank = cov.rank
    if leak > RANGE_RTOL:
        if not clamp:
            raise OutOfRange(leak)
        _LOG.debug("error leaks out of the covariance range (relative %.3e); projecting", leak)
    if isinstance(cov, FactoredProjector):
        value = float(pd @ pd) / scale
    elif cov.rank == 0:
        value = 0.0
    else:
        w = (cov.range_basis.T @ pd) / np.sqrt(cov.eigenvalues)
        value = float(w @ w) / scale
    return value, leak, rank


def z_statistic(xstar, xm, cov, normalize=False, clamp=False, scale=1.0):
    """``(x* - x_m).T pinv(scale * Sigma) (x* - x_m)``, divided by ``rank(Sigma)`` when ``normalize``.

    ``cov`` is a :class:`CovarianceFactor` or an orthogonal
    :class:`FactoredProjector` (whose pseudo-inverse is itself).  An error
    outside the covariance range raises :class:`OutOfRange`, or is projected
    onto the range when ``clamp`` is set.
    """
    value, _, rank = _z_with_leak(xstar, xm, cov, scale, clamp)
    if normalize:
        if rank == 0:
            raise ValueError("cannot normalize by a zero rank")
        value /= rank
    return value


def discrepancy_grid(series, grid_points=512, quantile=0.995):
    hi = max(float(np.quantile(series.samples, quantile)), float(series.target_dist().ppf(quantile)))
    return make_grid(0.0, hi, grid_points)


def discrepancy(series, grid_points=512, backend=None):
    """L1 distance between the KDE of the samples and the target density, in ``[0, 2]``.

    Both densities are tabulated on ``grid_points`` cell midpoints covering
    ``[0, q]`` with ``q`` the larger of the 99.5% sample and target quantiles;
    the target enters as its exact average over each cell.
    """
    if series.samples.size < MIN_DISCREPANCY_SAMPLES:
        raise DegenerateSample(f"need at least {MIN_DISCREPANCY_SAMPLES} samples, got {series.samples.size}")
    grid = discrepancy_grid(series, grid_points)
    emp = kde(series.samples, grid, backend=backend)
    # cell averages of the target from its CDF: exact mass per cell even when
    # the grid is far too coarse to resolve the target's peak
    w = cell_widths(grid)
    edges = np.concatenate(([grid[0] - 0.5 * w[0]], grid + 0.5 * w))
    tgt = DensityEstimate(grid, np.diff(series.target_dist().cdf(edges)) / w)
    return min(l1_distance(emp, tgt), 2.0)


# ---------------------------------------------------------------------------
# the ensemble loop
# ---------------------------------------------------------------------------


class _MatrixContext:
    """Per-matrix state shared by the solves of one matrix."""

    def __init__(self, spec, A, rng):
        self.spec = spec
        self.A = A
        self.n = A.n_rows
        self.seed_vector = rng.standard_normal(self.n) if spec.basis == "krylov_seed" else None
        self.builder = krylov_builder(spec.variant, seed_vector=self.seed_vector)
        self.fixed_pair = None
        self.L = None
        if spec.prior_mode == "inverse":
            self.L = inverse_factor(A)
        elif spec.prior_mode == "normal_inverse":
            self.L = normal_inverse_factor(A)

    def pair_for(self, b, m):
        if self.seed_vector is None:
            return self.builder(self.A, b, m)
        if self.fixed_pair is None:
            self.fixed_pair = self.builder(self.A, None, m)
        return self.fixed_pair

    def draw_solution(self, rng, m, pair=None):
        spec = self.spec
        if spec.solution == "standard":
            return rng.standard_normal(self.n)
        pair = self.pair_for(None, m) if pair is None else pair
        P2 = make_p2(self.A, pair.W)
        v = rng.standard_normal(pair.m)
        y = rng.standard_normal(self.n)
        s = spec.tail_scale
        if spec.prior_mode == "cheap":
            return math.sqrt(s) * (pair.V @ v + P2.apply(y))
        return pair.V @ v + math.sqrt(s) * P2.apply(y)


def _structured_statistic(ctx, spec, m, xstar, b, pair, rng):
    x = pair.solve(b)
    P2 = make_p2(ctx.A, pair.W)
    if spec.prior_mode == "cheap":
        cal = calibrate_cheap(ctx.A, b, None, pair, ScalePosterior(spec.alpha, spec.beta))
    else:
        cal = calibrate_by_observation(
            ctx.A,
            lambda A, bb, mm: ctx.pair_for(bb, mm),
            lambda g: ctx.draw_solution(g, m, pair if ctx.seed_vector is not None else None),
            m,
            spec.k,
            prior=ScalePosterior(spec.alpha, spec.beta),
            stat="Z",
            rng=rng,
            mode="factored",
        )
    post = cal.posterior
    if spec.regime == "point":
        scale = post.mean()
    elif spec.regime == "hierarchical":
        scale = post.beta / post.alpha
    else:
        scale = spec.tail_scale
    value, leak, rank = _z_with_leak(xstar, x, P2, scale, clamp=True)
    if spec.regime == "hierarchical":
        value /= rank
    return value, leak


def _baseline_statistic(ctx, spec, m, xstar, b, pair):
    if spec.prior_mode == "trivial":
        x = pair.solve(b)
        # the posterior is a point mass: every error is "outside" its range,
        # so the clamped statistic is identically zero and the leak is not news
        value, _, _ = _z_with_leak(xstar, x, CovarianceFactor.empty(ctx.n), 1.0, clamp=True)
        return value, 0.0
    S = pair.V if spec.prior_mode == "inverse" else ctx.A.apply(pair.V)
    mean, cov = general_posterior(CovarianceFactor(ctx.L), ctx.A, S, b, None)
    value, leak, _ = _z_with_leak(xstar, mean, cov, 1.0, clamp=True)
    return value, leak


def _run_single(spec):
    m = spec.m_values[0]
    values = []
    breakdowns = 0
    attempted = 0
    max_leak = 0.0
    for i in range(spec.M):
        rng = np.random.default_rng([spec.master_seed, i])
        A = random_spd(SpdEnsembleSpec(spec.n, spec.scale), rng)
        ctx = _MatrixContext(spec, A, rng)
        for _ in range(spec.N):
            attempted += 1
            try:
                pair = ctx.pair_for(None, m) if ctx.seed_vector is not None else None
                xstar = ctx.draw_solution(rng, m, pair)
                b = A.apply(xstar)
                if pair is None:
                    pair = ctx.pair_for(b, m)
                if spec.prior_mode in ("cheap", "expensive"):
                    value, leak = _structured_statistic(ctx, spec, m, xstar, b, pair, rng)
                else:
                    value, leak = _baseline_statistic(ctx, spec, m, xstar, b, pair)
            except (BreakdownAt, IllPosedProjection, IllPosedConditioning) as exc:
                breakdowns += 1
                _LOG.info("matrix %d: solve skipped (%s)", i, exc)
                if breakdowns > MAX_BREAKDOWN_FRACTION * spec.M * spec.N:
                    raise ProjUQError(f"{breakdowns} of {attempted} solves broke down; aborting assessment") from exc
                continue
            values.append(value)
            max_leak = max(max_leak, leak)
    if max_leak > RANGE_RTOL:
        _LOG.warning("m=%d: largest relative error leak out of the covariance range %.3e (clamped)", m, max_leak)
    kind = "z_normalized" if spec.regime == "hierarchical" else "Z"
    return StatisticSeries(np.array(values), spec.target(m), m, kind, breakdowns, max_leak, spec)


def run_assessment(spec):
    """Run the ensemble for a single ``m`` (a one-element sweep is accepted)."""
    spec.validate()
    if len(spec.m_values) != 1:
        raise ValueError("run_assessment takes a single m; use run_sweep for lists")
    return _run_single(spec.configs()[0])


def run_sweep(spec):
    spec.validate()
    return [_run_single(s) for s in spec.configs()]


# ---------------------------------------------------------------------------
# S-statistic comparison on a single SPD matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SstatRow:
    m: int
    exact_A_error: float
    reid_q05: float
    reid_q95: float
    ours_q05: float
    ours_q95: float
    ours_q01: float
    ours_q99: float
    reid_underestimate: float

    @classmethod
    def header(cls):
        return list(cls.__dataclass_fields__)


def sstat_comparison(A, checkpoints, d=5, samples=100, seed=0):
    """Exact ``e.T A e`` of the CG iterate against Reid and observation-calibrated S samples.

    For each checkpoint ``m``: the A-norm error of CG on ``b = A x*``
    (``x* ~ N(0, I)``); ``samples`` draws of ``delta.T A delta`` with
    ``delta`` from the rank-``d`` CG covariance built from iterations
    ``m+1..m+d``; and ``samples`` draws of ``E[s] chi2(n - m)`` with ``E[s]``
    from one CG-mode observation with the S statistic.  Returns the rows and
    the CG trace of the target solve.
    """
    A = as_matrix(A)
    n = A.n_rows
    checkpoints = [int(m) for m in checkpoints]
    if any(m < 1 or m + d > n or n - m <= 2 for m in checkpoints):
        raise ValueError("checkpoints must satisfy 1 <= m, m + d <= n and n - m > 2")
    rng_target = np.random.default_rng([seed, 0])
    rng_reid = np.random.default_rng([seed, 1])
    rng_obs = np.random.default_rng([seed, 2])
    rng_chi = np.random.default_rng([seed, 3])
    xstar = rng_target.standard_normal(n)
    b = A.apply(xstar)
    trace = cg(A, b, None, max(checkpoints) + d)
    if trace.iterations < max(checkpoints) + d:
        raise ProjUQError(f"CG converged after {trace.iterations} iterations, before the last checkpoint")
    rows = []
    for m in checkpoints:
        e = xstar - trace.iterate(m)
        exact = float(e @ A.apply(e))
        if d > 0:
            rc = reid_covariance(trace, m, d)
            D = rc.sample(rng_reid, samples)
            reid = np.sum(D * A.apply(D), axis=0)
            under = reid_underestimate(trace, m, d)
        else:
            reid = np.zeros(samples)
            under = 0.0
        cal = calibrate_by_observation(A, None, lambda g: g.standard_normal(n), m, 1, stat="S", rng=rng_obs, mode="cg")
        ours = s_statistic_samples(cal, n - m, samples, rng_chi)
        rq = np.quantile(reid, [0.05, 0.95])
        oq = np.quantile(ours, [0.05, 0.95, 0.01, 0.99])
        rows.append(SstatRow(m, exact, rq[0], rq[1], oq[0], oq[1], oq[2], oq[3], under))
    return rows, trace


def write_sstat_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SstatRow.header())
        for r in rows:
            w.writerow([r.m] + [f"{getattr(r, k):.17g}" for k in SstatRow.header()[1:]])


__all__ = [
    "AssessmentSpec",
    "SstatRow",
    "StatisticSeries",
    "discrepancy",
    "run_assessment",
    "run_sweep",
    "sstat_comparison",
    "z_statistic",
]
