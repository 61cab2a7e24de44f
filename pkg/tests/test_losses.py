"""Loss terms against hand-built batches and direct-summation oracles."""

import numpy as np
import pytest

from trislam.losses import (
    LossWeights,
    MAPPING_WEIGHTS,
    TRACKING_WEIGHTS,
    color_loss,
    depth_loss,
    free_space_loss,
    global_loss,
    partition_masks,
    truncation_loss,
)

T = 0.06


def build_batch():
    """2 rays x 3 samples with z spanning free space and the truncation band."""
    z = np.array([[1.0, 1.95, 2.0], [0.5, 1.46, 1.55]])
    depth = np.array([2.0, 1.5])
    return z, depth


class TestPartition:
    def test_regions_disjoint_and_cover(self):
        rng = np.random.default_rng(0)
        z = np.sort(rng.uniform(0, 3, (50, 32)), axis=1)
        depth = rng.uniform(0.5, 2.5, 50)
        depth[::7] = 0
        fs, tm, tt = partition_masks(z, depth, T)
        assert not (fs & tm).any() and not (fs & tt).any() and not (tm & tt).any()
        band = (np.abs(z - depth[:, None]) < T) & (depth[:, None] > 0)
        np.testing.assert_array_equal(tm | tt, band)
        assert not fs[depth == 0].any()

    def test_middle_uses_0p4_fraction(self):
        z = np.array([[1.97, 1.978, 2.022, 2.03]])
        depth = np.array([2.0])
        fs, tm, tt = partition_masks(z, depth, T)
        # 0.4*T = 0.024: |z-D| of 0.03 is tail, 0.022 is middle
        np.testing.assert_array_equal(tm[0], [False, True, True, False])
        np.testing.assert_array_equal(tt[0], [True, False, False, True])

    def test_merged_region(self):
        z, depth = build_batch()
        fs, tm, tt = partition_masks(z, depth, T, merged=True)
        assert not tt.any()
        band = (np.abs(z - depth[:, None]) < T) & (depth[:, None] > 0)
        np.testing.assert_array_equal(tm, band)


class TestFreeSpace:
    def test_exact_target_is_zero(self):
        z, depth = build_batch()
        fs, _, _ = partition_masks(z, depth, T)
        phi = np.ones_like(z)
        loss, _ = free_space_loss(phi, fs)
        assert loss == 0.0

    def test_zero_phi_gives_one(self):
        z, depth = build_batch()
        fs, _, _ = partition_masks(z, depth, T)
        loss, _ = free_space_loss(np.zeros_like(z), fs)
        assert loss == pytest.approx(1.0)

    def test_double_mean_oracle(self):
        # ray 0: fs points z=1.0 only; ray 1: z=0.5 only (others in band)
        z, depth = build_batch()
        fs, _, _ = partition_masks(z, depth, T)
        phi = np.array([[0.3, 0.0, 0.0], [0.7, 0.0, 0.0]])
        loss, coeff = free_space_loss(phi, fs)
        expected = ((0.3 - 1) ** 2 + (0.7 - 1) ** 2) / 2
        assert loss == pytest.approx(expected, rel=1e-12)
        # gradient check by direct perturbation
        grad = coeff * 2 * (phi - 1)
        eps = 1e-7
        phi2 = phi.copy()
        phi2[0, 0] += eps
        lp, _ = free_space_loss(phi2, fs)
        assert grad[0, 0] == pytest.approx((lp - loss) / eps, rel=1e-5)

    def test_empty_rays_drop_from_denominator(self):
        z = np.array([[1.95, 2.0], [1.45, 1.5]])  # no free-space samples at all
        depth = np.array([2.0, 1.5])
        fs, _, _ = partition_masks(z, depth, T)
        loss, coeff = free_space_loss(np.zeros_like(z), fs)
        assert loss == 0.0
        np.testing.assert_array_equal(coeff, 0)

    def test_strict_denominator_switch(self):
        z, depth = build_batch()
        z[1] = [1.45, 1.5, 1.55]  # ray 1 now has no free-space points
        fs, _, _ = partition_masks(z, depth, T)
        phi = np.zeros_like(z)
        contributing, _ = free_space_loss(phi, fs)
        strict, _ = free_space_loss(phi, fs, strict_count=2)
        assert contributing == pytest.approx(1.0)
        assert strict == pytest.approx(0.5)


class TestTruncation:
    def test_on_surface_sample_contributes_zero(self):
        z = np.array([[2.0]])
        depth = np.array([2.0])
        phi = np.array([[0.0]])
        mask = np.array([[True]])
        loss, _ = truncation_loss(phi, z, depth, T, mask)
        assert loss == 0.0

    def test_truncation_edge_consistency(self):
        # z = D - T with phi = 1 satisfies the linear SDF model exactly
        z = np.array([[2.0 - T]])
        loss, _ = truncation_loss(np.array([[1.0]]), z, np.array([2.0]), T, np.array([[True]]))
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_hand_built_batch(self):
        z = np.array([[1.97, 2.03]])
        depth = np.array([2.0])
        phi = np.array([[0.5, -0.5]])
        mask = np.ones_like(z, dtype=bool)
        loss, _ = truncation_loss(phi, z, depth, T, mask)
        assert loss == pytest.approx(0.0, abs=1e-15)
        phi = np.array([[0.4, -0.4]])
        loss, _ = truncation_loss(phi, z, depth, T, mask)
        assert loss == pytest.approx(((-0.006) ** 2 + 0.006**2) / 2, rel=1e-9)
        assert loss == pytest.approx(3.6e-5, rel=1e-9)


class TestRenderedLosses:
    def test_depth_loss_perfect_and_offset(self):
        d = np.array([1.0, 2.0, 0.0])  # third ray has no measurement
        loss, _ = depth_loss(d.copy(), d)
        assert loss == 0.0
        loss, g = depth_loss(d + 0.1, d)
        assert loss == pytest.approx(0.01)
        assert g[2] == 0.0

    def test_depth_loss_oracle(self):
        rng = np.random.default_rng(1)
        rendered = rng.uniform(0, 3, 40)
        depth = rng.uniform(0.5, 2.5, 40)
        depth[::5] = 0
        loss, _ = depth_loss(rendered, depth)
        valid = depth > 0
        assert loss == pytest.approx(np.mean((rendered[valid] - depth[valid]) ** 2), rel=1e-12)

    def test_color_loss_values(self):
        c = np.array([[0.2, 0.4, 0.6]])
        loss, _ = color_loss(c.copy(), c)
        assert loss == 0.0
        loss, _ = color_loss(c + 0.5, c)
        assert loss == pytest.approx(0.25)

    def test_color_loss_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 1, (30, 3))
        b = rng.uniform(0, 1, (30, 3))
        loss, _ = color_loss(a, b)
        assert loss == pytest.approx(np.mean(np.sum((a - b) ** 2, axis=1) / 3), rel=1e-12)


class TestGlobalLoss:
    def test_presets_match_published_weights(self):
        assert (MAPPING_WEIGHTS.fs, MAPPING_WEIGHTS.t_m, MAPPING_WEIGHTS.t_t,
                MAPPING_WEIGHTS.d, MAPPING_WEIGHTS.c) == (5, 200, 10, 0.1, 5)
        assert (TRACKING_WEIGHTS.fs, TRACKING_WEIGHTS.t_m, TRACKING_WEIGHTS.t_t,
                TRACKING_WEIGHTS.d, TRACKING_WEIGHTS.c) == (10, 200, 50, 1, 5)

    def test_unit_terms_mapping_preset_sum(self):
        # weighted sum of unit losses = 5+200+10+0.1+5
        w = MAPPING_WEIGHTS
        total = w.fs + w.t_m + w.t_t + w.d + w.c
        assert total == pytest.approx(220.1)

    def test_weighted_sum_oracle(self):
        rng = np.random.default_rng(3)
        m, n = 6, 10
        z = np.sort(rng.uniform(0.5, 2.5, (m, n)), axis=1)
        depth = rng.uniform(1.0, 2.2, m)
        depth[0] = 0
        phi = rng.uniform(-1, 1, (m, n))
        rendered_d = rng.uniform(0.5, 2.5, m)
        rendered_c = rng.uniform(0, 1, (m, 3))
        colors = rng.uniform(0, 1, (m, 3))
        weights = LossWeights(2.0, 3.0, 5.0, 7.0, 11.0)
        bd, _ = global_loss(phi, z, depth, rendered_d, rendered_c, colors, T, weights)

        fs, tm, tt = partition_masks(z, depth, T)
        expected = (
            2.0 * free_space_loss(phi, fs)[0]
            + 3.0 * truncation_loss(phi, z, depth, T, tm)[0]
            + 5.0 * truncation_loss(phi, z, depth, T, tt)[0]
            + 7.0 * depth_loss(rendered_d, depth)[0]
            + 11.0 * color_loss(rendered_c, colors)[0]
        )
        assert bd.total == pytest.approx(expected, rel=1e-12)
        assert bd.total == pytest.approx(
            2 * bd.fs + 3 * bd.t_m + 5 * bd.t_t + 7 * bd.d + 11 * bd.c, rel=1e-12
        )

    def test_merged_truncation_equals_whole_band_loss(self):
        rng = np.random.default_rng(4)
        m, n = 4, 12
        z = np.sort(rng.uniform(0.5, 2.5, (m, n)), axis=1)
        depth = rng.uniform(1.0, 2.2, m)
        phi = rng.uniform(-1, 1, (m, n))
        bd, _ = global_loss(
            phi, z, depth, depth.copy(), None, None, T,
            LossWeights(0, 1, 0, 0, 0), merged_truncation=True,
        )
        band = (np.abs(z - depth[:, None]) < T)
        whole, _ = truncation_loss(phi, z, depth, T, band)
        assert bd.t_m == pytest.approx(whole, rel=1e-12)
        assert bd.t_t == 0.0

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(5)
        m, n = 3, 8
        z = np.sort(rng.uniform(0.5, 2.5, (m, n)), axis=1)
        depth = rng.uniform(1.0, 2.2, m)
        phi = rng.uniform(-0.9, 0.9, (m, n))
        rendered_d = rng.uniform(0.5, 2.5, m)
        rendered_c = rng.uniform(0.1, 0.9, (m, 3))
        colors = rng.uniform(0, 1, (m, 3))

        def total(p, rd, rc):
            bd, _ = global_loss(p, z, depth, rd, rc, colors, T, TRACKING_WEIGHTS)
            return bd.total

        bd, (gphi, gd, gc) = global_loss(
            phi, z, depth, rendered_d, rendered_c, colors, T, TRACKING_WEIGHTS
        )
        eps = 1e-7
        for arr, grad, which in ((phi, gphi, "phi"), (rendered_d, gd, "d"), (rendered_c, gc, "c")):
            idx = tuple(0 for _ in arr.shape)
            bumped = arr.copy()
            bumped[idx] += eps
            args = {
                "phi": (bumped, rendered_d, rendered_c),
                "d": (phi, bumped, rendered_c),
                "c": (phi, rendered_d, bumped),
            }[which]
            fd = (total(*args) - bd.total) / eps
            assert grad[idx] == pytest.approx(fd, rel=1e-4, abs=1e-10)
