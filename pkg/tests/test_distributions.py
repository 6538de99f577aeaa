import math

import numpy as np
import pytest
from scipy import integrate, stats

from projuq.distributions import (
    DegenerateGaussian,
    DegenerateStudent,
    DensityEstimate,
    ScalePosterior,
    chi2_pdf,
    density_on_grid,
    f_pdf,
    gaussian_logpdf,
    gaussian_sample,
    ig_pdf,
    kde,
    l1_distance,
    make_grid,
    silverman_bandwidth,
    student_sample,
)
from projuq.errors import DegenerateSample, DimensionMismatch, ImproperPosterior, OutOfRange
from projuq.linalg import CovarianceFactor, orthonormalize


class TestGaussian:
    def test_rank_zero_returns_mean(self, rng):
        g = DegenerateGaussian(np.arange(3.0), CovarianceFactor.empty(3))
        np.testing.assert_array_equal(gaussian_sample(g, rng), np.arange(3.0))

    def test_sample_covariance(self, rng):
        g = DegenerateGaussian(np.zeros(2), np.eye(2))
        X = g.sample(rng, 100_000)
        assert np.abs(np.cov(X.T) - np.eye(2)).max() <= 0.05

    def test_range_restriction(self, rng):
        Y = orthonormalize(rng.standard_normal((5, 2))).columns
        mean = rng.standard_normal(5)
        g = DegenerateGaussian(mean, Y)
        for _ in range(50):
            x = gaussian_sample(g, rng)
            assert np.linalg.norm((np.eye(5) - Y @ Y.T) @ (x - mean)) <= 1e-12

    def test_logpdf_standard_mode(self):
        g = DegenerateGaussian(np.zeros(1), np.ones((1, 1)))
        assert gaussian_logpdf(g, np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi), rel=1e-14)

    def test_logpdf_dense_oracle(self, rng):
        B = rng.standard_normal((4, 4))
        S = B @ B.T + np.eye(4)
        mu = rng.standard_normal(4)
        g = DegenerateGaussian(mu, np.linalg.cholesky(S))
        for _ in range(5):
            x = rng.standard_normal(4)
            assert gaussian_logpdf(g, x) == pytest.approx(stats.multivariate_normal(mu, S).logpdf(x), rel=1e-10)

    def test_logpdf_off_support(self):
        g = DegenerateGaussian(np.zeros(3), np.array([[1.0], [0.0], [0.0]]))
        with pytest.raises(OutOfRange):
            gaussian_logpdf(g, np.array([0.0, 1.0, 0.0]))
        assert g.pdf(np.array([0.0, 1.0, 0.0])) == 0.0

    def test_covariance_error_decreases(self):
        g_rng = np.random.default_rng(5)
        F = np.array([[1.0, 0.0], [0.5, 1.0], [0.0, 2.0]])
        S = F @ F.T
        g = DegenerateGaussian(np.zeros(3), F)
        errs = [np.linalg.norm(np.cov(g.sample(g_rng, N).T) - S) for N in (1_000, 10_000, 100_000)]
        assert errs[0] > errs[1] > errs[2]

    def test_mismatch(self):
        with pytest.raises(DimensionMismatch):
            DegenerateGaussian(np.zeros(3), np.eye(2))


class TestStudent:
    def test_large_dof_matches_gaussian(self, rng):
        t = DegenerateStudent(np.zeros(2), np.eye(2), 1e6)
        X = t.sample(rng, 100_000)
        assert np.abs(np.cov(X.T) - np.eye(2)).max() <= 0.05

    def test_rank_zero(self, rng):
        t = DegenerateStudent(np.ones(2), CovarianceFactor.empty(2), 3.0)
        np.testing.assert_array_equal(student_sample(t, rng), np.ones(2))

    def test_variance_moment(self, rng):
        t = DegenerateStudent(np.zeros(1), np.ones((1, 1)), 4.0)
        x = t.sample(rng, 100_000)
        assert abs(x.var() / 2.0 - 1.0) <= 0.1

    def test_logpdf_matches_scipy(self, rng):
        B = rng.standard_normal((3, 3))
        S = B @ B.T + np.eye(3)
        t = DegenerateStudent(np.zeros(3), np.linalg.cholesky(S), 5.0)
        ref = stats.multivariate_t(np.zeros(3), S, df=5.0)
        for _ in range(5):
            x = rng.standard_normal(3)
            assert t.logpdf(x) == pytest.approx(ref.logpdf(x), rel=1e-10)

    def test_mixture_identity(self, rng):
        """N(x | mu, s Sigma) integrated against IG(s | a, b) equals St_2a(x | mu, (b/a) Sigma)."""
        a, b = 2.5, 1.7
        F = rng.standard_normal((3, 2))
        mu = rng.standard_normal(3)
        t = DegenerateStudent(mu, CovarianceFactor(F).scaled(b / a), 2 * a)
        for _ in range(20):
            x = mu + F @ rng.standard_normal(2)

            def integrand(logs):
                s = math.exp(logs)
                g = DegenerateGaussian(mu, CovarianceFactor(F).scaled(s))
                return g.pdf(x) * ig_pdf(s, a, b) * s

            val, _ = integrate.quad(integrand, -30, 30, epsabs=0, epsrel=1e-10, limit=200)
            assert t.pdf(x) == pytest.approx(val, rel=1e-4)

    def test_invalid_dof(self):
        with pytest.raises(ValueError):
            DegenerateStudent(np.zeros(1), np.ones((1, 1)), 0.0)


class TestScalarDensities:
    def test_chi2_two(self):
        assert chi2_pdf(2.0, 2) == pytest.approx(math.exp(-1) / 2, rel=1e-14)

    def test_f_mode_grid(self):
        d1, d2 = 6, 12
        grid = np.linspace(1e-4, 5, 200_001)
        mode_numeric = grid[np.argmax(f_pdf(grid, d1, d2))]
        mode = (d1 - 2) / d1 * d2 / (d2 + 2)
        assert abs(mode_numeric - mode) <= grid[1] - grid[0]

    def test_ig_integrates(self):
        val, _ = integrate.quad(lambda s: ig_pdf(s, 3.0, 2.0), 0, np.inf, epsabs=1e-12)
        assert val == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("pdf", [lambda x: chi2_pdf(x, 7), lambda x: f_pdf(x, 5, 9)])
    def test_unit_mass(self, pdf):
        val, _ = integrate.quad(pdf, 0, np.inf, epsabs=1e-12)
        assert val == pytest.approx(1.0, abs=1e-6)

    def test_out_of_support_zero(self):
        assert chi2_pdf(-1.0, 3) == 0.0
        assert f_pdf(-1.0, 3, 4) == 0.0
        assert ig_pdf(-1.0, 3, 4) == 0.0


class TestScalePosterior:
    def test_improper_flags(self):
        p = ScalePosterior()
        assert p.improper and not p.proper
        with pytest.raises(ImproperPosterior):
            p.pdf(1.0)
        with pytest.raises(ImproperPosterior):
            p.mean()

    def test_mean(self):
        assert ScalePosterior(3.0, 4.0).mean() == 2.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            ScalePosterior(-1.0, 0.0)


class TestKde:
    def test_symmetry(self):
        g = make_grid(-5, 5, 1001)
        d = kde(np.array([-1.0, 1.0]), g)
        assert np.abs(d.values - d.values[::-1]).max() <= 1e-12

    def test_normal_consistency(self, rng):
        g = make_grid(-6, 6, 1024)
        est = kde(rng.standard_normal(100_000), g)
        assert l1_distance(est, density_on_grid(stats.norm.pdf, g)) <= 0.05

    def test_mass(self, rng):
        for dist in (rng.standard_normal(1000), rng.exponential(2.0, 1000) + 3):
            mu, sd = dist.mean(), dist.std()
            est = kde(dist, make_grid(mu - 6 * sd, mu + 6 * sd, 2048))
            assert 0.98 <= est.mass() <= 1.02

    def test_degenerate(self):
        with pytest.raises(DegenerateSample):
            kde(np.full(10, 3.0), make_grid(0, 5, 10))

    def test_silverman(self, rng):
        x = rng.standard_normal(500)
        assert silverman_bandwidth(x) == pytest.approx(1.06 * x.std(ddof=1) * 500 ** -0.2)


class TestL1:
    def test_identity(self):
        g = make_grid(0, 1, 100)
        p = DensityEstimate(g, np.ones(100))
        assert l1_distance(p, p) == 0.0

    def test_disjoint(self):
        g = make_grid(0, 2, 2000)
        p = DensityEstimate(g, np.where(g < 1, 1.0, 0.0))
        q = DensityEstimate(g, np.where(g >= 1, 1.0, 0.0))
        assert l1_distance(p, q) == pytest.approx(2.0, abs=1e-9)

    def test_shifted_normals(self):
        g = make_grid(-10, 10, 20_000)
        p = density_on_grid(stats.norm(0, 1).pdf, g)
        q = density_on_grid(stats.norm(0.5, 1).pdf, g)
        assert l1_distance(p, q) == pytest.approx(2 * (2 * stats.norm.cdf(0.25) - 1), abs=1e-3)

    def test_grid_mismatch(self):
        with pytest.raises(DimensionMismatch):
            l1_distance(DensityEstimate(make_grid(0, 1, 10), np.ones(10)), DensityEstimate(make_grid(0, 2, 10), np.ones(10)))

    def test_csv_roundtrip(self, tmp_path, rng):
        d = DensityEstimate(make_grid(0, 1, 7), rng.random(7))
        d.to_csv(tmp_path / "d.csv")
        e = DensityEstimate.from_csv(tmp_path / "d.csv")
        np.testing.assert_array_equal(d.grid, e.grid)
        np.testing.assert_array_equal(d.values, e.values)
