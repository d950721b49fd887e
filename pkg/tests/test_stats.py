import numpy as np
import pytest
from scipy import integrate, special, stats as sps

from specmix import kernels, stats
from specmix import tensor as T
from specmix.errors import ContractError, DomainError, NumericError

from conftest import finite_diff_check


class TestSpecialFunctions:
    def test_lgamma_known_values(self):
        assert stats.lgamma(1.0) == pytest.approx(0.0, abs=1e-12)
        assert stats.lgamma(2.0) == pytest.approx(0.0, abs=1e-12)
        assert stats.lgamma(5.0) == pytest.approx(np.log(24.0), abs=1e-10)

    def test_digamma_euler_mascheroni(self):
        assert stats.digamma(1.0) == pytest.approx(-0.5772156649015329, abs=1e-10)

    @pytest.mark.parametrize("fn,ref", [
        (stats.lgamma, special.gammaln),
        (stats.digamma, special.digamma),
    ])
    def test_absolute_accuracy_on_wide_range(self, fn, ref):
        x = np.geomspace(1e-3, 1e3, 2000)
        assert np.max(np.abs(fn(x) - ref(x))) < 1e-10

    def test_trigamma_accuracy(self):
        # trigamma blows up ~1/x^2 at 0 so accept abs or rel tolerance per point
        x = np.geomspace(1e-3, 1e3, 2000)
        ref = special.polygamma(1, x)
        err = np.abs(stats.trigamma(x) - ref)
        assert np.all((err < 1e-10) | (err / np.abs(ref) < 1e-10))

    def test_domain_errors(self):
        for fn in (stats.lgamma, stats.digamma, stats.trigamma):
            with pytest.raises(DomainError):
                fn(0.0)
            with pytest.raises(DomainError):
                fn(-1.5)


class TestDirichletSample:
    def test_concentration_limit(self, rng):
        alpha = np.array([1e6, 1e-6, 1e-6])
        z = stats.dirichlet_sample(alpha, rng)
        np.testing.assert_allclose(z, [1.0, 0.0, 0.0], atol=1e-3)

    def test_simplex_invariants(self, rng):
        alpha = np.tile([0.5, 1.5, 3.0, 0.2], (2000, 1))
        z = stats.dirichlet_sample(alpha, rng)
        assert np.all(z > 0.0) and np.all(z < 1.0)
        np.testing.assert_allclose(z.sum(axis=1), 1.0, atol=1e-12)

    def test_empirical_mean(self, rng):
        alpha = np.tile([2.0, 3.0, 5.0], (100_000, 1))
        z = stats.dirichlet_sample(alpha, rng)
        np.testing.assert_allclose(z.mean(axis=0), [0.2, 0.3, 0.5], atol=0.01)

    def test_empirical_variance(self, rng):
        a = np.array([2.0, 3.0, 5.0])
        a0 = a.sum()
        alpha = np.tile(a, (100_000, 1))
        z = stats.dirichlet_sample(alpha, rng)
        analytic = a * (a0 - a) / (a0 ** 2 * (a0 + 1.0))
        np.testing.assert_allclose(z.var(axis=0), analytic, rtol=0.10)


class TestRsampleGrad:
    def test_degenerate_k1(self, rng):
        z, jac = stats.dirichlet_rsample_grad(np.array([2.5]), rng)
        assert z[0] == pytest.approx(1.0, abs=1e-12)
        assert jac[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_mean_derivative_vs_analytic(self):
        # E[z1] = a1/a0 so dE[z1]/da1 = a2/a0^2 = 3/25
        a = np.array([2.0, 3.0])
        n = 100_000
        rng = np.random.default_rng(7)
        total = 0.0
        for _ in range(n):
            _, jac = stats.dirichlet_rsample_grad(a, rng)
            total += jac[0, 0]
        est = total / n
        assert est == pytest.approx(3.0 / 25.0, rel=0.05)

    def test_log_mean_derivative_vs_digamma_identity(self):
        # E[log z1] = psi(a1) - psi(a0); d/da1 = psi'(a1) - psi'(a0)
        a = np.array([2.0, 3.0])
        n = 100_000
        rng = np.random.default_rng(8)
        total = 0.0
        for _ in range(n):
            z, jac = stats.dirichlet_rsample_grad(a, rng)
            total += jac[0, 0] / z[0]
        est = total / n
        truth = stats.trigamma(2.0) - stats.trigamma(5.0)
        assert est == pytest.approx(truth, rel=0.05)

    def test_pathwise_vs_crn_finite_differences(self):
        # 10 random (alpha, smooth f) pairs; spec invariant: agreement
        # within 3 standard errors at common random numbers
        failures = 0
        for trial in range(10):
            rng = np.random.default_rng(1000 + trial)
            k = int(rng.integers(2, 5))
            alpha = rng.uniform(0.4, 4.0, size=k)
            cq = rng.normal(size=k)
            cl = rng.uniform(0.5, 1.5, size=k)

            def f_grad(z):
                # f(z) = sum cq z^2 + sum cl log(z + 0.1)
                return 2.0 * cq * z + cl / (z + 0.1)

            n = 20_000
            u = np.random.default_rng(999).random((n, k))
            j = int(rng.integers(0, k))
            # pathwise estimator through the implementation
            samples = np.empty(n)
            for s in range(n):
                srng = _FixedUniform(u[s])
                z, jac = stats.dirichlet_rsample_grad(alpha, srng)
                samples[s] = f_grad(z) @ jac[:, j]
            est = samples.mean()
            se = samples.std(ddof=1) / np.sqrt(n)
            # CRN finite differences with scipy as the independent sampler
            h = 1e-4 * alpha[j]
            fd_vals = []
            for sign in (+1.0, -1.0):
                ap = alpha.copy()
                ap[j] += sign * h
                g = special.gammaincinv(ap, u)
                z = g / g.sum(axis=1, keepdims=True)
                fval = (cq * z * z).sum(axis=1) + (cl * np.log(z + 0.1)).sum(axis=1)
                fd_vals.append(fval.mean())
            fd = (fd_vals[0] - fd_vals[1]) / (2.0 * h)
            if abs(est - fd) > 3.0 * se + 1e-7:
                failures += 1
        assert failures == 0

    def test_score_function_cross_check(self):
        # score-function estimator agrees with the pathwise one on E[f]
        alpha = np.array([1.5, 2.5, 0.8])
        cq = np.array([0.3, -0.7, 1.1])
        n = 200_000
        rng = np.random.default_rng(3)
        z = stats.dirichlet_sample(np.tile(alpha, (n, 1)), rng)
        f = (cq * z * z).sum(axis=1)
        score = stats.dirichlet_score_grad(np.tile(alpha, (n, 1)), z)
        est_score = (f[:, None] * score).mean(axis=0)
        rng2 = np.random.default_rng(4)
        path = np.zeros(3)
        m = 50_000
        for _ in range(m):
            zz, jac = stats.dirichlet_rsample_grad(alpha, rng2)
            path += (2.0 * cq * zz) @ jac
        path /= m
        np.testing.assert_allclose(est_score, path, atol=0.05)

    def test_nonconvergence_raises_numeric_error(self, monkeypatch):
        def bad(a, x, **kw):
            out = np.zeros_like(np.asarray(a, dtype=float))
            out[...] = np.nan
            return out
        monkeypatch.setattr(kernels, "gamma_dcdf_da", bad)
        monkeypatch.setattr(stats.kernels, "gamma_dcdf_da", bad)
        with pytest.raises(NumericError, match="a="):
            stats.dirichlet_rsample_grad(np.array([2.0, 3.0]), np.random.default_rng(0))


class _FixedUniform:
    """Feeds a preset uniform vector to dirichlet_rsample_grad."""

    def __init__(self, u):
        self._u = np.asarray(u)

    def random(self, shape):
        assert np.shape(self._u) == tuple(np.atleast_1d(shape)) or self._u.shape == shape
        return self._u.copy()


class TestDirichletKL:
    def test_identical_is_zero(self):
        q = np.array([1.2, 3.4, 0.7])
        assert stats.dirichlet_kl(q, q) == pytest.approx(0.0, abs=1e-12)

    def test_beta_case_vs_quadrature(self):
        q = np.array([2.0, 3.0])
        p = np.array([1.0, 1.0])

        def integrand(x):
            return sps.beta.pdf(x, 2, 3) * (sps.beta.logpdf(x, 2, 3) - sps.beta.logpdf(x, 1, 1))
        val, err = integrate.quad(integrand, 0.0, 1.0, epsabs=1e-10)
        assert stats.dirichlet_kl(q, p) == pytest.approx(val, abs=1e-6)

    def test_nonnegative_for_random_pairs(self, rng):
        q = rng.uniform(0.05, 8.0, size=(1000, 3))
        p = rng.uniform(0.05, 8.0, size=(1000, 3))
        kl = stats.dirichlet_kl(q, p)
        assert np.all(kl >= -1e-12)

    def test_batched_matches_scalar(self, rng):
        q = rng.uniform(0.2, 5.0, size=(7, 4))
        p = rng.uniform(0.2, 5.0, size=4)
        batched = stats.dirichlet_kl(q, p)
        singles = [stats.dirichlet_kl(q[i], p) for i in range(7)]
        np.testing.assert_allclose(batched, singles, atol=1e-12)

    def test_kl_op_gradient(self, rng):
        alpha = T.Tensor(rng.uniform(0.5, 4.0, size=(3, 4)), requires_grad=True)
        prior = rng.uniform(0.5, 2.0, size=4)
        err = finite_diff_check(
            lambda: T.mean_all(stats.dirichlet_kl_op(alpha, prior)), [alpha])
        assert err < 1e-4


class TestGaussianLogLikelihood:
    def test_at_mode_unit_sigma(self):
        b = 17
        x = np.zeros((1, b))
        ll = stats.gaussian_log_likelihood(x, x.copy(), np.ones((1, b)))
        assert ll[0] == pytest.approx(-b * 0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_standard_normal_scalar(self):
        ll = stats.gaussian_log_likelihood(np.zeros((1, 1)), np.zeros((1, 1)), np.ones((1, 1)))
        assert ll[0] == pytest.approx(-0.9189385332046727, abs=1e-7)

    def test_matches_direct_formula(self, rng):
        x = rng.normal(size=(5, 9))
        mu = rng.normal(size=(5, 9))
        sig = rng.uniform(0.2, 2.0, size=(5, 9))
        direct = np.sum(-0.5 * np.log(2 * np.pi) - np.log(sig)
                        - 0.5 * ((x - mu) / sig) ** 2, axis=1)
        np.testing.assert_allclose(stats.gaussian_log_likelihood(x, mu, sig),
                                   direct, atol=1e-12)

    def test_maximized_at_mu_equals_x(self, rng):
        x = rng.normal(size=(1, 6))
        mu = T.Tensor(x.copy(), requires_grad=True)
        sig = T.Tensor(np.full((1, 6), 0.7), requires_grad=True)
        with T.Tape() as tape:
            loss = T.mean_all(stats.gaussian_loglik_op(mu, sig, x))
        T.backward(loss, tape)
        np.testing.assert_allclose(mu.grad, 0.0, atol=1e-14)

    def test_op_gradients(self, rng):
        mu = T.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        sig = T.Tensor(rng.uniform(0.3, 2.0, size=(3, 5)), requires_grad=True)
        x = rng.normal(size=(3, 5))
        err = finite_diff_check(
            lambda: T.mean_all(stats.gaussian_loglik_op(mu, sig, x)), [mu, sig])
        assert err < 1e-4

    def test_sigma_contract(self):
        with pytest.raises(ContractError):
            stats.DiagGaussianParams(np.zeros(3), np.array([1.0, -0.1, 0.5]))


class TestRsampleOpGradient:
    @pytest.mark.parametrize("seed", range(5))
    def test_frozen_noise_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        alpha = T.Tensor(rng.uniform(0.5, 5.0, size=(2, 3)), requires_grad=True)
        u = rng.random((2, 3))
        probe = rng.normal(size=(2, 3))
        err = finite_diff_check(
            lambda: T.mean_all(T.mul(stats.dirichlet_rsample_op(alpha, u), probe)),
            [alpha])
        assert err < 1e-4

    def test_sample_on_simplex(self, rng):
        alpha = T.Tensor(rng.uniform(0.1, 6.0, size=(50, 4)))
        z = stats.dirichlet_rsample_op(alpha, rng.random((50, 4)))
        assert np.all(z.data > 0)
        np.testing.assert_allclose(z.data.sum(axis=1), 1.0, atol=1e-12)
