import json
import math

import numpy as np
import pytest
import scipy.linalg as sla
from scipy import integrate, stats

from conftest import spd_dense
from projuq.calibration import (
    CalibrationResult,
    calibrate_by_observation,
    calibrate_cheap,
    gain_sequence,
    op_norm_a_ainv,
    predictive_student,
    reid_covariance,
    reid_sample,
    reid_underestimate,
    s_statistic_samples,
    truncation_error,
)
from projuq.distributions import DegenerateGaussian, ScalePosterior, density_on_grid, kde, l1_distance, make_grid
from projuq.errors import BreakdownAt, ImproperPosterior, ProjUQError
from projuq.linalg import CovarianceFactor, SpdEnsembleSpec, pseudo_quadform, random_spd
from projuq.projection import cg, full_space_pair, general_posterior, krylov_builder, krylov_pair, make_p1, make_p2


def quadrature_posterior(alpha, beta, dof, sumsq):
    """Moment-matched IG parameters of the posterior over ``s``.

    Prior ``IG(alpha, beta)``, Gaussian evidence ``s^(-dof/2) exp(-sumsq / (2 s))``;
    the posterior moments come from 1-D quadrature in ``log s``.
    """

    def log_post(t):
        s = math.exp(t)
        return -(alpha + 1) * t - beta / s - 0.5 * dof * t - 0.5 * sumsq / s + t

    # centre the integrand at its maximum for numerical stability
    a_tot, b_tot = alpha + 0.5 * dof, beta + 0.5 * sumsq
    t_mode = math.log(b_tot / a_tot)
    ref = log_post(t_mode)

    def moment(k):
        f = lambda t: math.exp(log_post(t) - ref + k * t)
        val, _ = integrate.quad(f, t_mode - 40, t_mode + 40, epsabs=0, epsrel=1e-13, limit=500, points=[t_mode])
        return val

    z = moment(0)
    m1 = moment(1) / z
    m2 = moment(2) / z
    var = m2 - m1 * m1
    a = m1 * m1 / var + 2
    return a, m1 * (a - 1)


class TestCheap:
    def test_update_formula(self):
        a = np.diag(np.arange(1.0, 11.0))
        c = np.full(10, 2 / math.sqrt(10))
        res = calibrate_cheap(a, a @ c, None, full_space_pair(a))
        assert res.posterior.alpha == 5.0
        assert res.posterior.beta == pytest.approx(2.0, rel=1e-12)

    def test_zero_residual(self, rng):
        a = spd_dense(12, rng)
        x0 = rng.standard_normal(12)
        pair = krylov_pair(a, rng.standard_normal(12), 4)
        res = calibrate_cheap(a, a @ x0, x0, pair, ScalePosterior(1.5, 0.7))
        assert res.posterior.beta == 0.7
        assert res.posterior.alpha == 3.5

    def test_quadrature_oracle(self, rng):
        n, m = 20, 6
        a = spd_dense(n, rng)
        b = rng.standard_normal(n)
        pair = krylov_pair(a, b, m, "gmres_like")
        prior = ScalePosterior(3.0, 2.0)
        res = calibrate_cheap(a, b, None, pair, prior)
        delta = pair.coefficients(b)
        a_q, b_q = quadrature_posterior(3.0, 2.0, m, float(delta @ delta))
        assert res.posterior.alpha == pytest.approx(a_q, rel=1e-6)
        assert res.posterior.beta == pytest.approx(b_q, rel=1e-6)

    def test_residual_in_range_of_v_enters_only_through_delta(self, rng):
        # b = A x0 + A V c: the whole residual lives in range(V), only beta sees it
        n, m = 15, 4
        a = spd_dense(n, rng)
        x0 = rng.standard_normal(n)
        pair = krylov_pair(a, rng.standard_normal(n), m)
        c = rng.standard_normal(m)
        res = calibrate_cheap(a, a @ x0 + a @ pair.V @ c, x0, pair)
        assert res.posterior.beta == pytest.approx(0.5 * c @ c, rel=1e-10)
        # the posterior mean recovers x0 + Vc exactly, so the error the tail must explain is zero
        xs = x0 + pair.V @ c
        np.testing.assert_allclose(pair.solve(a @ xs, x0), xs, rtol=1e-10)


class TestObservation:
    def test_alpha_update(self, rng):
        a = random_spd(SpdEnsembleSpec(100, 10.0), rng)
        res = calibrate_by_observation(a, krylov_builder(), lambda g: g.standard_normal(100), 20, 1, rng=rng)
        assert res.posterior.alpha == 40.0
        assert res.k == 1 and res.statistic == "Z"

    def test_range_of_v_gives_zero_error(self, rng):
        a = spd_dense(10, rng)
        rho = rng.standard_normal(10)
        build = krylov_builder(seed_vector=rho)
        V = build(a, None, 3).V
        res = calibrate_by_observation(a, build, lambda g: V @ g.standard_normal(3), 3, 4, ScalePosterior(0.0, 1.5), rng=rng)
        assert res.posterior.beta == pytest.approx(1.5, abs=1e-20 + 1e-12)

    @pytest.mark.parametrize("stat", ["Z", "S"])
    def test_densified_projector_oracle(self, stat):
        n, m, k = 30, 5, 3
        g = np.random.default_rng(4)
        a = spd_dense(n, g)
        xs = [g.standard_normal(n) for _ in range(k)]
        it = iter(xs)
        res = calibrate_by_observation(a, krylov_builder(), lambda _: next(it), m, k, stat=stat, rng=g)
        total = 0.0
        for x in xs:
            P1 = make_p1(krylov_pair(a, a @ x, m)).densify()
            e = P1 @ x
            total += e @ e if stat == "Z" else e @ a @ e
        assert res.posterior.beta == pytest.approx(0.5 * total, rel=1e-10)

    def test_quadrature_oracle(self):
        g = np.random.default_rng(8)
        n, m, k = 25, 5, 2
        a = spd_dense(n, g)
        prior = ScalePosterior(2.5, 1.0)
        res = calibrate_by_observation(a, krylov_builder(), lambda r: r.standard_normal(n), m, k, prior, rng=g)
        a_q, b_q = quadrature_posterior(2.5, 1.0, k * (n - m), sum(res.deltas))
        assert res.posterior.alpha == pytest.approx(a_q, rel=1e-6)
        assert res.posterior.beta == pytest.approx(b_q, rel=1e-6)

    def test_cg_mode_agrees(self, rng):
        a = spd_dense(40, rng, cond=50)
        x = rng.standard_normal(40)
        f = calibrate_by_observation(a, krylov_builder(), lambda _: x, 6, 1, mode="factored")
        c = calibrate_by_observation(a, krylov_builder(), lambda _: x, 6, 1, mode="cg")
        assert c.posterior.beta == pytest.approx(f.posterior.beta, rel=1e-8)

    def test_breakdown_carries_observation(self):
        with pytest.raises(BreakdownAt) as exc:
            calibrate_by_observation(np.eye(5), krylov_builder(), lambda g: g.standard_normal(5), 2, 2, rng=np.random.default_rng(0))
        assert exc.value.observation == 0

    def test_bad_arguments(self, rng):
        with pytest.raises(ValueError):
            calibrate_by_observation(np.eye(3), krylov_builder(), lambda g: np.ones(3), 1, 0)
        with pytest.raises(ValueError):
            calibrate_by_observation(np.eye(3), krylov_builder(), lambda g: np.ones(4), 1, 1)
        with pytest.raises(ValueError):
            calibrate_by_observation(np.eye(3), krylov_builder(), lambda g: np.ones(3), 1, 1, stat="Q")

    def test_json_roundtrip(self, rng):
        a = spd_dense(10, rng)
        res = calibrate_by_observation(a, krylov_builder(), lambda g: g.standard_normal(10), 2, 2, rng=rng)
        d = json.loads(json.dumps(res.to_json_dict()))
        assert set(d) == {"alpha", "beta", "alpha_post", "beta_post", "statistic", "k", "point_scale"}
        back = CalibrationResult.from_json_dict(d)
        assert back == res
        assert d["point_scale"] == pytest.approx(res.posterior.beta / (res.posterior.alpha - 1))


class TestPredictive:
    def test_gaussian_limit(self, rng):
        F = rng.standard_normal((4, 2))
        xt = rng.standard_normal(4)
        c = 0.7
        post = ScalePosterior(1e7, c * 1e7)
        t = predictive_student(xt, CovarianceFactor(F), post)
        assert t.dof == 2e7
        g = DegenerateGaussian(xt, CovarianceFactor(F).scaled(c))
        for _ in range(10):
            x = xt + F @ rng.standard_normal(2)
            assert t.pdf(x) == pytest.approx(g.pdf(x), rel=1e-3)

    def test_improper(self):
        with pytest.raises(ImproperPosterior):
            predictive_student(np.zeros(2), np.eye(2), ScalePosterior(0.0, 1.0))

    def test_mixture_quadrature(self, rng):
        a, b = 2.0, 3.0
        F = rng.standard_normal((3, 2))
        xt = rng.standard_normal(3)
        t = predictive_student(xt, CovarianceFactor(F), ScalePosterior(a, b))
        x = xt + F @ rng.standard_normal(2)

        def integrand(s):
            return DegenerateGaussian(xt, CovarianceFactor(F).scaled(s)).pdf(x) * stats.invgamma(a, scale=b).pdf(s)

        val, _ = integrate.quad(integrand, 0, np.inf, epsabs=0, epsrel=1e-10, limit=200)
        assert t.pdf(x) == pytest.approx(val, rel=1e-4)


class TestSStatistic:
    def test_mean(self, rng):
        res = CalibrationResult(ScalePosterior(), ScalePosterior(3.0, 2.0), "S", 1)
        draws = s_statistic_samples(res, 30, 100_000, rng)
        assert abs(draws.mean() / 30 - 1) <= 0.02

    def test_point_scale(self):
        assert CalibrationResult(ScalePosterior(), ScalePosterior(3.0, 4.0), "S", 1).point_scale == 2.0

    def test_density(self, rng):
        res = CalibrationResult(ScalePosterior(), ScalePosterior(3.0, 4.0), "S", 1)
        draws = s_statistic_samples(res, 20, 10_000, rng)
        grid = make_grid(0, 150, 512)
        assert l1_distance(kde(draws, grid), density_on_grid(stats.chi2(20, scale=2.0).pdf, grid)) <= 0.05

    def test_undefined_mean(self, rng):
        res = CalibrationResult(ScalePosterior(), ScalePosterior(1.0, 4.0), "S", 1)
        assert res.point_scale is None
        with pytest.raises(ImproperPosterior):
            s_statistic_samples(res, 5, 10, rng)


class TestReid:
    def test_zero_rank(self, rng):
        tr = cg(spd_dense(10, rng), rng.standard_normal(10))
        rc = reid_covariance(tr, 3, 0)
        assert rc.d == 0
        np.testing.assert_array_equal(reid_sample(rc, rng), np.zeros(10))
        assert reid_underestimate(tr, 3, 0) == 0.0

    def test_a_norm_moment(self):
        g = np.random.default_rng(2)
        a = spd_dense(20, g, cond=100)
        tr = cg(a, g.standard_normal(20))
        rc = reid_covariance(tr, 5, 4)
        D = rc.sample(g, 10_000)
        mean = np.mean(np.sum(D * (a @ D), axis=0))
        assert mean == pytest.approx(tr.gains[5:9].sum(), rel=0.05)
        np.testing.assert_allclose(rc.directions.T @ a @ rc.directions, np.eye(4), atol=1e-6)

    def test_rank(self, rng):
        a = random_spd(SpdEnsembleSpec(20, 10.0), rng).to_dense()
        rc = reid_covariance(cg(a, rng.standard_normal(20)), 5, 3)
        assert np.linalg.matrix_rank(rc.factor().dense(), tol=1e-10 * rc.gains.max()) == 3

    def test_samples_in_span(self, rng):
        a = spd_dense(15, rng)
        rc = reid_covariance(cg(a, rng.standard_normal(15)), 2, 4)
        d = reid_sample(rc, rng)
        Q, _ = np.linalg.qr(rc.directions)
        assert np.linalg.norm(d - Q @ (Q.T @ d)) <= 1e-12 * np.linalg.norm(d)

    def test_trace_too_short(self, rng):
        tr = cg(spd_dense(10, rng), rng.standard_normal(10), m=4)
        with pytest.raises(ProjUQError):
            reid_covariance(tr, 3, 2)
        with pytest.raises(ProjUQError):
            reid_underestimate(tr, 3, 2)

    def test_telescoping(self):
        g = np.random.default_rng(6)
        a = spd_dense(12, g, cond=20)
        b = g.standard_normal(12)
        tr = cg(a, b)
        xs = np.linalg.solve(a, b)
        for m in (0, 3, 7):
            e = xs - tr.iterate(m)
            assert reid_underestimate(tr, m, 12 - m) == pytest.approx(e @ a @ e, rel=1e-6)
        assert gain_sequence(tr).sum() == pytest.approx(xs @ a @ xs, rel=1e-6)

    def test_monotone_in_d(self, rng):
        tr = cg(spd_dense(20, rng), rng.standard_normal(20))
        vals = [reid_underestimate(tr, 4, d) for d in range(0, 12)]
        assert all(x <= y for x, y in zip(vals, vals[1:]))

    def test_underestimates_error(self):
        for seed in range(10):
            g = np.random.default_rng(seed)
            a = spd_dense(50, g, cond=1e3)
            b = g.standard_normal(50)
            tr = cg(a, b, m=40)
            xs = np.linalg.solve(a, b)
            for m in (5, 15, 30):
                e = xs - tr.iterate(m)
                exact = e @ a @ e
                assert reid_underestimate(tr, m, 5) <= exact * (1 + 1e-8)

    def test_equivalence_with_general_posterior(self):
        g = np.random.default_rng(9)
        n, m = 25, 6
        a = spd_dense(n, g, cond=30)
        tr = cg(a, g.standard_normal(n))
        full = reid_covariance(tr, 0, n)
        L = full.factor().factor
        S = full.directions[:, :m]
        _, cov = general_posterior(CovarianceFactor(L), a, S, np.zeros(n), None)
        ref = reid_covariance(tr, m, n - m).factor().dense()
        assert np.linalg.norm(cov.dense() - ref) <= 1e-7 * np.linalg.norm(ref)


class TestGains:
    def test_identity(self):
        b = np.array([3.0, 4.0])
        np.testing.assert_allclose(gain_sequence(cg(np.eye(2), b)), [25.0])

    def test_non_monotone_somewhere(self):
        increases = 0
        for i in range(20):
            g = np.random.default_rng([7, i])
            a = random_spd(SpdEnsembleSpec(30, 10.0), g)
            gains = gain_sequence(cg(a, g.standard_normal(30)))
            increases += int(np.any(np.diff(gains) > 0))
        assert increases >= 1


class TestOperatorNorm:
    def test_single_term(self):
        assert op_norm_a_ainv([3.0]) == 3.0

    def test_empty(self):
        assert op_norm_a_ainv([]) == 0.0

    def test_truncation(self):
        assert truncation_error([5.0, 2.0, 1.0], 1) == 2.0
        assert truncation_error([1.0, 5.0, 2.0], 0) == 5.0
        assert truncation_error([1.0, 5.0, 2.0], 3) == 0.0

    def test_generalized_eigen_oracle(self):
        g = np.random.default_rng(12)
        for _ in range(20):
            n = int(g.integers(2, 13))
            a = spd_dense(n, g)
            # A-orthonormal basis: columns of inv(chol(A)).T
            C = np.linalg.cholesky(a)
            U = sla.solve_triangular(C.T, np.linalg.qr(g.standard_normal((n, n)))[0], lower=False)
            r = int(g.integers(1, n + 1))
            d = g.random(r) * 5
            B = (U[:, :r] * d) @ U[:, :r].T
            lam = sla.eigh(B @ a @ B, np.linalg.inv(a), eigvals_only=True)
            assert op_norm_a_ainv(d) == pytest.approx(math.sqrt(lam.max()), rel=1e-8)


class TestZSimplification:
    def test_projector_quadform_is_squared_norm(self, rng):
        a = spd_dense(12, rng)
        pair = krylov_pair(a, rng.standard_normal(12), 4, "gmres_like")
        P2 = make_p2(a, pair.W)
        e = P2.apply(rng.standard_normal(12))
        assert pseudo_quadform(P2.covariance_factor(), e) == pytest.approx(e @ e, rel=1e-10)
