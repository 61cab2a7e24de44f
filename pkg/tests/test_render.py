"""Density conversion and compositing identities."""

import numpy as np
import pytest

from trislam.render import render_ray, render_rays, sdf_to_density, sdf_to_density_vjp


def weights_oracle(sigma):
    """Loop-free restatement: w_n = exp(-cum_excl) - exp(-cum_incl)."""
    cum = np.cumsum(sigma, axis=1)
    return np.exp(-(cum - sigma)) - np.exp(-cum)


class TestSdfToDensity:
    def test_zero_sdf_gives_half_beta(self):
        assert sdf_to_density(0.0, 10.0) == pytest.approx(5.0)

    def test_inside_surface_value(self):
        # sigmoid(10) = 0.9999546
        assert sdf_to_density(-1.0, 10.0) == pytest.approx(10 / (1 + np.exp(-10)), rel=1e-12)
        assert sdf_to_density(-1.0, 10.0) == pytest.approx(9.999546, abs=1e-6)

    def test_free_space_value_and_range(self):
        assert sdf_to_density(1.0, 10.0) == pytest.approx(10 / (1 + np.exp(10)), rel=1e-12)
        assert sdf_to_density(1.0, 10.0) == pytest.approx(4.54e-4, rel=1e-2)
        rng = np.random.default_rng(0)
        # |beta * phi| < ~36.7 keeps the sigmoid representable away from 1,
        # where the open bound is exact; beyond that float64 rounds to beta
        phi = rng.uniform(-1, 1, 1000)
        beta = rng.uniform(0.1, 30, 1000)
        sigma = sdf_to_density(phi, beta)
        assert np.all(sigma > 0) and np.all(sigma < beta)
        beta_ext = rng.uniform(0.1, 1000, 1000)
        extreme = sdf_to_density(rng.uniform(-1, 1, 1000), beta_ext)
        assert np.all(np.isfinite(extreme))
        assert np.all(extreme >= 0) and np.all(extreme <= beta_ext)

    def test_monotone_decreasing_in_phi(self):
        phi = np.linspace(-1, 1, 100)
        sigma = sdf_to_density(phi, 7.0)
        assert np.all(np.diff(sigma) < 0)

    def test_vjp_matches_fd(self):
        rng = np.random.default_rng(1)
        phi = rng.uniform(-1, 1, 20)
        beta = 8.0
        g = rng.standard_normal(20)
        sigma = sdf_to_density(phi, beta)
        gphi, gbeta = sdf_to_density_vjp(phi, beta, sigma, g)
        eps = 1e-6
        fd_phi = (sdf_to_density(phi + eps, beta) - sdf_to_density(phi - eps, beta)) / (2 * eps)
        np.testing.assert_allclose(gphi, g * fd_phi, rtol=1e-6)
        fd_beta = np.sum(
            g * (sdf_to_density(phi, beta + eps) - sdf_to_density(phi, beta - eps)) / (2 * eps)
        )
        np.testing.assert_allclose(gbeta, fd_beta, rtol=1e-6)


class TestRenderRay:
    def test_transparent_ray(self):
        z = np.linspace(0.1, 1.0, 8)
        color, depth, w = render_ray(z, np.zeros(8), np.ones((8, 3)) * 0.7)
        assert depth == 0.0
        np.testing.assert_array_equal(w, 0)
        np.testing.assert_array_equal(color, 0)

    def test_opaque_first_hit(self):
        z = np.linspace(0.5, 2.0, 6)
        sigma = np.zeros(6)
        sigma[0] = 100.0
        raw = np.tile(np.array([0.2, 0.4, 0.6]), (6, 1))
        color, depth, w = render_ray(z, sigma, raw)
        assert w[0] == pytest.approx(1.0, abs=1e-10)
        assert depth == pytest.approx(z[0], abs=1e-8)
        np.testing.assert_allclose(color, raw[0], atol=1e-8)

    def test_telescoping_weight_sum(self):
        rng = np.random.default_rng(2)
        sigma = rng.uniform(0, 3, (100, 16))
        z = np.sort(rng.uniform(0, 2, (100, 16)), axis=1)
        _, _, w, _ = render_rays(z, sigma)
        np.testing.assert_allclose(
            w.sum(axis=1), 1 - np.exp(-sigma.sum(axis=1)), atol=1e-12
        )
        np.testing.assert_allclose(w, weights_oracle(sigma), atol=1e-12)

    def test_depth_is_convex_combination(self):
        rng = np.random.default_rng(3)
        sigma = rng.uniform(0.5, 4, (50, 12))
        z = np.sort(rng.uniform(0.2, 3, (50, 12)), axis=1)
        _, depth, w, _ = render_rays(z, sigma)
        wsum = w.sum(axis=1)
        assert np.all(depth >= z[:, 0] * wsum - 1e-9)
        assert np.all(depth <= z[:, -1] * wsum + 1e-9)

    def test_step_function_tsdf_renders_surface_depth(self):
        surface = 1.37
        z = np.linspace(0.5, 2.5, 64)
        phi = np.where(z < surface, 1.0, -1.0)
        sigma = sdf_to_density(phi, 80.0)
        _, depth, w = render_ray(z, sigma)
        spacing = z[1] - z[0]
        assert abs(depth / w.sum() - surface) < spacing

    def test_weights_nonnegative_sum_below_one(self):
        rng = np.random.default_rng(4)
        sigma = rng.uniform(0, 10, (200, 20))
        _, _, w, _ = render_rays(np.sort(rng.uniform(0, 1, (200, 20)), axis=1), sigma)
        assert np.all(w >= 0)
        assert np.all(w.sum(axis=1) <= 1 + 1e-6)
