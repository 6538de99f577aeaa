"""Inverse-gamma calibration of the posterior covariance scale.

Two conjugate updates are provided.  The cheap one reuses the projection
coefficients of the solve itself; the observation-based one reruns the
projection method on right-hand sides with known solutions and feeds the
resulting errors (squared 2-norm for the Z statistic, squared A-norm for the
S statistic) into the inverse-gamma posterior.  The module also hosts the
low-rank CG covariance built from extra iterations and its A-norm error
underestimate.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .distributions import DegenerateStudent, ScalePosterior
from .errors import BreakdownAt, ImproperPosterior, ProjUQError
from .linalg import CovarianceFactor, as_matrix
from .projection import cg

_LOG = logging.getLogger(__name__)

STATISTICS = ("Z", "S")
#: above this size observation errors come from CG iterates instead of the factored projector
CG_MODE_THRESHOLD = 1000


@dataclass(frozen=True)
class CalibrationResult:
    prior: ScalePosterior
    posterior: ScalePosterior
    statistic: str
    k: int
    deltas: tuple = field(default=(), compare=False)

    @property
    def point_scale(self):
        """``E[s] = beta / (alpha - 1)``, or ``None`` when undefined."""
        try:
            return self.posterior.mean()
        except ImproperPosterior:
            return None

    def to_json_dict(self):
        return {
            "alpha": self.prior.alpha,
            "beta": self.prior.beta,
            "alpha_post": self.posterior.alpha,
            "beta_post": self.posterior.beta,
            "statistic": self.statistic,
            "k": self.k,
            "point_scale": self.point_scale,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            ScalePosterior(d["alpha"], d["beta"]),
            ScalePosterior(d["alpha_post"], d["beta_post"]),
            d["statistic"],
            int(d["k"]),
        )


def calibrate_cheap(A, b, x0, pair, prior=ScalePosterior()):
    """Scale posterior from the projection coefficients of a single solve.

    ``alpha += m / 2`` and ``beta += delta.T delta / 2`` with
    ``delta = inv(W.T A V) W.T (b - A x0)``.
    """
    delta = pair.coefficients(b, x0)
    dd = float(delta @ delta)
    return CalibrationResult(prior, prior.updated(0.5 * pair.m, 0.5 * dd), "Z", 0, (dd,))


def observation_error(A, x_star, m, proj_builder=None, mode="factored"):
    """Error ``P1 x*`` of the projection method on ``b = A x*`` started from zero.

    ``mode='factored'`` applies the oblique projector of the pair returned by
    ``proj_builder``; ``mode='cg'`` uses ``x* - x_m`` with ``x_m`` the m-th
    plain CG iterate, which keeps the rounding behaviour of CG itself.
    """
    A = as_matrix(A)
    b = A.apply(x_star)
    if mode == "cg":
        return x_star - cg(A, b, None, m, store_iterates=False).x
    if mode != "factored":
        raise ValueError(f"unknown mode {mode!r}")
    pair = proj_builder(A, b, m)
    return x_star - pair.solve(b)


def calibrate_by_observation(A, proj_builder, prior_sampler, m, k, prior=ScalePosterior(), stat="Z", rng=None, mode="auto"):
    """Observation-based calibration loop.

    For each of ``k`` observations: draw ``x*`` from ``prior_sampler(rng)``,
    set ``b = A x*``, rebuild the projection, take the error ``e = P1 x*`` and
    add ``e.T e / 2`` (Z) or ``e.T A e / 2`` (S) to beta.  Alpha grows by
    ``k (n - m) / 2``.
    """
    if stat not in STATISTICS:
        raise ValueError(f"statistic must be one of {STATISTICS}")
    if k < 1:
        raise ValueError("need at least one observation")
    A = as_matrix(A)
    n = A.n_rows
    if mode == "auto":
        mode = "factored" if n <= CG_MODE_THRESHOLD else "cg"
    rng = np.random.default_rng() if rng is None else rng
    deltas = []
    for i in range(k):
        x_star = np.asarray(prior_sampler(rng), dtype=np.float64)
        if x_star.shape != (n,):
            raise ValueError(f"prior sampler returned shape {x_star.shape}, expected ({n},)")
        try:
            e = observation_error(A, x_star, m, proj_builder, mode)
        except BreakdownAt as exc:
            err = BreakdownAt(exc.j, f"Krylov breakdown after {exc.j} vectors in observation {i}")
            err.observation = i
            raise err from exc
        deltas.append(float(e @ e) if stat == "Z" else float(e @ A.apply(e)))
    post = prior.updated(0.5 * k * (n - m), 0.5 * float(np.sum(deltas)))
    return CalibrationResult(prior, post, stat, k, tuple(deltas))


def predictive_student(xtilde, psi, post):
    """Student predictive ``St_(2a)(xtilde, (b / a) Psi)`` after marginalizing the scale."""
    if not post.proper:
        raise ImproperPosterior("predictive needs alpha > 0 and beta > 0")
    psi = psi if isinstance(psi, CovarianceFactor) else CovarianceFactor(psi)
    return DegenerateStudent(xtilde, psi.scaled(post.beta / post.alpha), 2.0 * post.alpha)


def s_statistic_samples(result, n_minus_m, count, rng):
    """Draws of ``E[s] chi2_(n-m)``."""
    scale = result.point_scale
    if scale is None:
        raise ImproperPosterior(f"E[s] undefined for alpha={result.posterior.alpha} <= 1")
    return scale * rng.chisquare(n_minus_m, size=count)


# ---------------------------------------------------------------------------
# low-rank CG covariance
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReidCovariance:
    """``sum_i g_i u_i u_i.T`` over ``d`` A-orthonormal CG directions ``u_i``."""

    directions: np.ndarray
    gains: np.ndarray
    A: object = None

    @property
    def d(self):
        return self.gains.shape[0]

    def factor(self):
        return CovarianceFactor(self.directions * np.sqrt(self.gains))

    def sample(self, rng, size=None):
        """One draw, or ``size`` draws as columns."""
        g = np.sqrt(self.gains)
        if size is None:
            return self.directions @ (g * rng.standard_normal(self.d))
        return self.directions @ (g[:, None] * rng.standard_normal((self.d, size)))


def _a_orthonormalize(A, U):
    U = U.copy()
    AU = np.empty_like(U)
    for j in range(U.shape[1]):
        u = U[:, j]
        for _ in range(2):
            if j:
                u = u - U[:, :j] @ (AU[:, :j].T @ u)
        au = A.apply(u)
        nrm = np.sqrt(u @ au)
        U[:, j] = u / nrm
        AU[:, j] = au / nrm
    return U


def reid_covariance(trace, m, d, reorthogonalize=True, tol=1e-6):
    """Covariance from CG iterations ``m+1 .. m+d``: gains ``gamma_i ||r_(i-1)||^2`` and directions ``v_i / sqrt(eta_i)``."""
    if m < 0 or d < 0:
        raise ValueError("m and d must be nonnegative")
    if trace.iterations < m + d:
        raise ProjUQError(f"trace has {trace.iterations} iterations, need {m + d}")
    A = trace.A
    U = trace.scaled_directions()[:, m:m + d]
    gains = trace.gains[m:m + d].copy()
    if d and reorthogonalize:
        U = _a_orthonormalize(A, U)
        G = U.T @ A.apply(U)
        err = np.abs(G - np.eye(d)).max()
        if err > tol:
            raise ProjUQError(f"could not A-orthonormalize CG directions (error {err:.2e})")
    return ReidCovariance(U, gains, A)


def reid_sample(rc, rng):
    return rc.sample(rng)


def reid_underestimate(trace, m, d):
    """``sum_(i=m+1)^(m+d) gamma_i ||r_(i-1)||^2``, a lower bound on ``||x* - x_m||_A^2``."""
    if trace.iterations < m + d:
        raise ProjUQError(f"trace has {trace.iterations} iterations, need {m + d}")
    return float(np.sum(trace.gains[m:m + d]))


def gain_sequence(trace):
    return trace.gains.copy()


def op_norm_a_ainv(d):
    """``||B||_(A, A^-1)`` for ``B = sum_j d_j u_j u_j.T`` with A-orthonormal ``u_j``: the largest coefficient."""
    d = np.asarray(d, dtype=np.float64)
    return float(d.max()) if d.size else 0.0


def truncation_error(d, r):
    """Error of the best rank-``r`` approximation in the same norm: the (r+1)-th largest coefficient."""
    d = np.sort(np.asarray(d, dtype=np.float64))[::-1]
    return float(d[r]) if r < d.size else 0.0
