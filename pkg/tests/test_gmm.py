"""Mixture density, refinement schedule, reverse kernel, and energy."""

import numpy as np
import pytest
from scipy.special import logsumexp

from tiltrl import gmm as gmm_mod
from tiltrl.evalmetrics import mode_histogram
from tiltrl.fixtures import gmm25_env, grid_means
from tiltrl.gmm import (
    LOG_2PI,
    Gmm,
    GmmDiffusionEnv,
    OutOfHorizonError,
    cosine_schedule,
)


def two_mode_env(steps=1, weights=(0.5, 0.5), target=(0.5, 0.5), sigma=0.1):
    means = np.array([[-0.5, 0.0], [0.5, 0.0]])
    prior = Gmm(means=means, weights=np.asarray(weights, float), sigma=sigma)
    return GmmDiffusionEnv(
        steps=steps,
        abar=cosine_schedule(steps),
        prior_gmm=prior,
        target_weights=np.asarray(target, float),
        alpha=1.0,
    )


class TestGmm:
    def test_standard_normal_at_mode(self):
        g = Gmm(means=np.zeros((1, 2)), weights=np.ones(1), sigma=1.0)
        assert g.logpdf(np.zeros(2)) == pytest.approx(np.log(1.0 / (2 * np.pi)), abs=1e-12)

    def test_logpdf_invariant_under_component_permutation(self):
        rng = np.random.default_rng(0)
        means = rng.normal(size=(4, 2))
        w = rng.dirichlet(np.ones(4))
        x = rng.normal(size=(10, 2))
        perm = np.array([2, 0, 3, 1])
        a = Gmm(means, w, 0.3).logpdf(x)
        b = Gmm(means[perm], w[perm], 0.3).logpdf(x)
        np.testing.assert_allclose(a, b, rtol=1e-14)

    def test_sample_mean_matches_mixture_mean(self):
        means = np.array([[-1.0, 0.0], [2.0, 1.0]])
        w = np.array([0.3, 0.7])
        g = Gmm(means, w, 0.2)
        x = g.sample(np.random.default_rng(7), 1_000_000)
        expected = w @ means
        se = np.sqrt((np.var(x, axis=0) / x.shape[0]))
        assert np.all(np.abs(x.mean(axis=0) - expected) < 3 * se + 1e-9)

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError):
            Gmm(np.zeros((2, 2)), np.array([0.5, 0.6]), 1.0)


class TestSchedule:
    def test_strictly_decreasing_in_open_interval(self):
        for steps in (1, 2, 10, 50):
            ab = cosine_schedule(steps)
            assert ab.shape == (steps,)
            assert np.all(ab > 0) and np.all(ab < 1)
            assert np.all(np.diff(ab) < 0)

    def test_last_level_near_zero(self):
        ab = cosine_schedule(10)
        assert ab[-1] <= 2e-4


class TestReverseKernel:
    def test_single_component_matches_gaussian_posterior(self):
        env = two_mode_env(steps=3)
        one = GmmDiffusionEnv(
            steps=3,
            abar=env.abar,
            prior_gmm=Gmm(np.array([[0.3, -0.2]]), np.ones(1), 0.1),
            target_weights=np.ones(1),
            alpha=1.0,
        )
        t = 1
        a, b, post_var, B = one._kernel_coeffs(t)
        x = np.array([[0.4, 0.1]])
        log_resp, comp_means, pv = one.reverse_kernel(x, t)
        assert log_resp[0, 0] == pytest.approx(0.0, abs=1e-12)
        mu = one.prior_gmm.means[0]
        s2 = one.prior_gmm.sigma**2
        A = a * s2 + 1.0 - a
        expected = np.sqrt(a) * mu + np.sqrt(b / a) * (A / B) * (x[0] - np.sqrt(b) * mu)
        np.testing.assert_allclose(comp_means[0, 0], expected, rtol=1e-12)
        assert pv == pytest.approx(A - (b / a) * A * A / B, rel=1e-12)

    def test_out_of_horizon_raises(self):
        env = two_mode_env(steps=2)
        with pytest.raises(OutOfHorizonError):
            env.reverse_kernel(np.zeros((1, 2)), 2)
        with pytest.raises(OutOfHorizonError):
            env.reverse_kernel(np.zeros((1, 2)), -1)

    def test_kernel_logpdf_integrates_to_one(self):
        # quadrature over a grid for a 2-component 1-step env
        env = two_mode_env(steps=1, sigma=0.2)
        x = np.array([[0.1, -0.3]])
        _, kern = env.prior_step(x, 0)
        lim, n = 2.5, 401
        axis = np.linspace(-lim, lim, n)
        h = axis[1] - axis[0]
        xx, yy = np.meshgrid(axis, axis, indexing="xy")
        pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        big = np.repeat(x, pts.shape[0], axis=0)
        _, kern_b = env.prior_step(big, 0)
        dens = np.exp(kern_b.logpdf(pts))
        assert dens.sum() * h * h == pytest.approx(1.0, abs=1e-3)

    def test_composed_prior_recovers_mixture_weights(self):
        env = gmm25_env()
        rng = np.random.default_rng(11)
        x = env.initial_sample(rng, 100_000)
        for t in range(env.steps):
            sample, _ = env.prior_step(x, t, rng)
            x = sample
        hist = mode_histogram(x, env.prior_gmm)
        assert hist.tv_against(env.prior_gmm.weights) < 0.02


class TestEnergy:
    def test_uniform_target_energy_is_zero(self):
        env = two_mode_env(target=(0.5, 0.5))
        rng = np.random.default_rng(1)
        x = rng.normal(size=(100, 2))
        np.testing.assert_allclose(env.energy(x), 0.0, atol=1e-12)

    def test_far_point_energy_approaches_weight_ratio(self):
        env = gmm25_env()
        # far along the diagonal, the nearest (corner) component dominates both
        x = np.array([10.0, 10.0])
        k_star = 24  # corner (1, 1) is nearest to (10, 10), and has max weight
        expected = -np.log(env.target_weights[k_star]) + np.log(1.0 / 25.0)
        assert env.energy(x) == pytest.approx(expected, abs=1e-9)

    def test_energy_reproduces_density_ratio(self):
        env = gmm25_env()
        axis = np.linspace(-1.2, 1.2, 25)
        xx, yy = np.meshgrid(axis, axis)
        pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        lhs = -np.asarray(env.energy(pts)) + env.prior_gmm.logpdf(pts)
        rhs = env.target_gmm().logpdf(pts)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_fixture_log_z_is_zero_at_alpha_one(self):
        # E = -log target + log prior, so E[exp(-E)] under the prior is
        # the integral of the target mixture = 1
        env = gmm25_env()
        rng = np.random.default_rng(5)
        x = env.prior_gmm.sample(rng, 200_000)
        log_w = -np.asarray(env.energy(x))
        est = logsumexp(log_w) - np.log(x.shape[0])
        assert abs(est) < 0.01


class TestFixture:
    def test_grid_means_layout(self):
        m = grid_means()
        assert m.shape == (25, 2)
        assert m.min() == -1.0 and m.max() == 1.0
        # row-major over the grid: first five share the lowest y
        np.testing.assert_allclose(m[:5, 1], -1.0)

    def test_fixture_parameters(self):
        env = gmm25_env()
        assert env.steps == 10
        assert env.prior_gmm.sigma == pytest.approx(0.02)
        np.testing.assert_allclose(
            env.target_weights, np.arange(1, 26) / np.arange(1, 26).sum()
        )
        np.testing.assert_allclose(env.prior_gmm.weights, 1.0 / 25.0)


class TestSerialization:
    def test_json_roundtrip(self, tmp_path):
        env = gmm25_env(alpha=1.5)
        path = tmp_path / "env.json"
        gmm_mod.save_json(env, path)
        back = gmm_mod.load_json(path)
        assert back.steps == env.steps
        assert back.alpha == env.alpha
        np.testing.assert_array_equal(back.abar, env.abar)
        np.testing.assert_array_equal(back.prior_gmm.means, env.prior_gmm.means)
        np.testing.assert_array_equal(back.target_weights, env.target_weights)

    def test_unknown_schema_rejected(self):
        with pytest.raises(ValueError):
            gmm_mod.from_json_dict({"schema": "nope/1"})
