import numpy as np
import pytest

from hiermix.integrate import ReKernel, adapt_locations, gh_grid, gh_rule, halton, kernel_draws


def normal_moment(k: int) -> float:
    """E[X^k] for X ~ N(0,1): 0 for odd k, double factorial for even."""
    if k % 2 == 1:
        return 0.0
    out = 1.0
    for j in range(k - 1, 0, -2):
        out *= j
    return out


class TestGhRule:
    def test_single_point(self):
        r = gh_rule(1)
        np.testing.assert_array_equal(r.nodes, [0.0])
        np.testing.assert_array_equal(r.weights, [1.0])

    def test_two_points(self):
        r = gh_rule(2)
        np.testing.assert_allclose(r.nodes, [-1.0, 1.0], atol=1e-14)
        np.testing.assert_allclose(r.weights, [0.5, 0.5], atol=1e-14)

    def test_three_points(self):
        r = gh_rule(3)
        np.testing.assert_allclose(r.nodes, [-np.sqrt(3), 0.0, np.sqrt(3)], atol=1e-13)
        np.testing.assert_allclose(r.weights, [1 / 6, 2 / 3, 1 / 6], atol=1e-13)

    @pytest.mark.parametrize("q", range(1, 21))
    def test_moment_exactness(self, q):
        # the rule integrates x^k against N(0,1) exactly for k <= 2q-1.
        # High moments are astronomically large (k=38 is ~8e21) and odd
        # moments are exact zeros reached by cancelling ~1e18-sized
        # terms, so the 1e-12 tolerance is relative to the integrand
        # scale E|X|^k (floor 1), the conditioning of the quadrature sum
        r = gh_rule(q)
        for k in range(2 * q):
            approx = float(r.weights @ r.nodes**k)
            exact = normal_moment(k)
            scale = max(1.0, float(r.weights @ np.abs(r.nodes) ** k))
            assert abs(approx - exact) < 1e-12 * scale, (q, k)

    def test_symmetry(self):
        r = gh_rule(8)
        np.testing.assert_array_equal(r.nodes, -r.nodes[::-1])
        np.testing.assert_array_equal(r.weights, r.weights[::-1])

    def test_grid(self):
        r = gh_rule(3)
        nodes, logw = gh_grid(r, 2)
        assert nodes.shape == (9, 2)
        assert abs(np.exp(logw).sum() - 1.0) < 1e-12


class TestHalton:
    def test_base2_sequence(self):
        h = halton(4, 1, skip=0)
        np.testing.assert_allclose(h.values[:, 0], [0.5, 0.25, 0.75, 0.125])

    def test_base3_sequence(self):
        h = halton(4, 2, skip=0)
        np.testing.assert_allclose(h.values[:, 1], [1 / 3, 2 / 3, 1 / 9, 4 / 9])

    def test_first_bases_are_primes(self):
        h = halton(1, 6, skip=0)
        assert h.bases == (2, 3, 5, 7, 11, 13)

    def test_mean_near_half(self):
        h = halton(1000, 1, skip=0)
        assert abs(h.values.mean() - 0.5) < 0.01

    def test_prefix_stability(self):
        a = halton(50, 3, skip=15)
        b = halton(200, 3, skip=15)
        np.testing.assert_array_equal(a.values, b.values[:50])

    def test_open_interval(self):
        h = halton(500, 4, skip=0)
        assert np.all(h.values > 0) and np.all(h.values < 1)

    def test_skip_shifts(self):
        a = halton(10, 1, skip=5)
        b = halton(15, 1, skip=0)
        np.testing.assert_array_equal(a.values, b.values[5:])


class TestKernelDraws:
    def test_median_uniform_maps_to_zero(self):
        kern = ReKernel(2)
        u = halton(3, 2, 0)
        u = type(u)(np.full((3, 2), 0.5), u.bases, 0)
        draws = kernel_draws(kern, u, np.eye(2))
        np.testing.assert_allclose(draws, 0.0, atol=1e-12)

    def test_normal_covariance(self):
        kern = ReKernel(2)
        chol = np.array([[1.0, 0.0], [0.6, 0.8]])
        u = halton(50_000, 2, skip=15)
        draws = kernel_draws(kern, u, chol)
        cov = np.cov(draws.T)
        target = chol @ chol.T
        np.testing.assert_allclose(cov, target, rtol=0.02, atol=0.02)

    def test_t_covariance_inflation(self):
        # t(5) has covariance df/(df-2) = 5/3 times the scale matrix
        kern = ReKernel(2, dist="t", df=5)
        chol = np.array([[1.0, 0.0], [0.3, 0.9]])
        u = halton(200_000, 3, skip=15)
        draws = kernel_draws(kern, u, chol)
        cov = np.cov(draws.T)
        target = (5.0 / 3.0) * chol @ chol.T
        np.testing.assert_allclose(cov, target, rtol=0.05, atol=0.05)

    def test_t_needs_extra_column(self):
        kern = ReKernel(2, dist="t", df=4)
        with pytest.raises(ValueError):
            kernel_draws(kern, halton(10, 2, 0), np.eye(2))

    def test_gh_nodes_through_scale_transform(self):
        # pushing GH nodes through the Cholesky scale reproduces the rule
        # for the scaled normal: weights unchanged, second moment L L'
        rule = gh_rule(7)
        chol = np.array([[1.7]])
        x = rule.nodes[:, None] @ chol.T
        np.testing.assert_allclose(float(rule.weights @ x[:, 0] ** 2), 1.7**2, rtol=1e-12)
        np.testing.assert_allclose(float(rule.weights @ x[:, 0]), 0.0, atol=1e-12)

    def test_density_normal(self):
        kern = ReKernel(1)
        chol = np.array([[2.0]])
        b = np.array([[1.0]])
        expected = -0.5 * np.log(2 * np.pi) - np.log(2.0) - 0.5 * (1.0 / 2.0) ** 2
        np.testing.assert_allclose(kern.log_density(b, chol)[0], expected)

    def test_density_t_matches_scipy(self):
        from scipy.stats import t as t_dist

        kern = ReKernel(1, dist="t", df=4)
        chol = np.array([[1.5]])
        b = np.array([[0.7]])
        expected = t_dist.logpdf(0.7 / 1.5, df=4) - np.log(1.5)
        np.testing.assert_allclose(kern.log_density(b, chol)[0], expected, rtol=1e-12)


class TestAdaptLocations:
    def test_conjugate_gaussian_posterior(self):
        # y_j ~ N(b, s2), b ~ N(0, sb2): posterior mean/var in closed form
        rng = np.random.default_rng(11)
        y = rng.normal(1.2, 0.5, size=8)
        s2, sb2 = 0.25, 1.44
        post_var = 1.0 / (len(y) / s2 + 1.0 / sb2)
        post_mean = post_var * y.sum() / s2

        def logcond(b):
            return np.sum(-0.5 * np.log(2 * np.pi * s2) - 0.5 * (y[None, :] - b) ** 2 / s2, axis=1)

        kern = ReKernel(1)
        res = adapt_locations(logcond, kern, np.array([[np.sqrt(sb2)]]), gh_rule(9))
        assert not res.flagged
        assert abs(res.shift[0] - post_mean) < 1e-8
        assert abs(res.chol[0, 0] - np.sqrt(post_var)) < 1e-8

    def test_flat_likelihood_keeps_prior(self):
        kern = ReKernel(1)
        chol = np.array([[0.8]])
        res = adapt_locations(lambda x: np.zeros(len(x)), kern, chol, gh_rule(9))
        assert abs(res.shift[0]) < 1e-8
        assert abs(res.chol[0, 0] - 0.8) < 1e-6

    def test_nonfinite_integrand_flags_fallback(self):
        kern = ReKernel(1)
        chol = np.array([[1.0]])
        res = adapt_locations(lambda x: np.full(len(x), -np.inf), kern, chol, gh_rule(7))
        assert res.flagged
        np.testing.assert_array_equal(res.shift, [0.0])
        np.testing.assert_array_equal(res.chol, chol)

    def test_t_kernel_requires_df_above_two(self):
        kern = ReKernel(1, dist="t", df=2)
        with pytest.raises(ValueError):
            adapt_locations(lambda x: np.zeros(len(x)), kern, np.eye(1), gh_rule(5))
