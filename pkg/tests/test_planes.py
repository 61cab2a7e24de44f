"""Plane interpolation against a direct-formula oracle plus grid invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trislam.planes import FeaturePlaneSet, OutOfBoundsError, interpolate_plane, plane_shape


def bilinear_oracle(plane, u, v):
    """Direct four-corner formula, written independently of the kernels."""
    h, w, _ = plane.shape
    i0 = min(max(int(np.floor(u)), 0), h - 2)
    j0 = min(max(int(np.floor(v)), 0), w - 2)
    du, dv = u - i0, v - j0
    return (
        (1 - du) * (1 - dv) * plane[i0, j0]
        + (1 - du) * dv * plane[i0, j0 + 1]
        + du * (1 - dv) * plane[i0 + 1, j0]
        + du * dv * plane[i0 + 1, j0 + 1]
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class TestInterpolatePlane:
    def test_grid_node_identity(self, rng):
        plane = rng.standard_normal((5, 7, 3))
        for i in range(5):
            for j in range(7):
                out = interpolate_plane(plane, np.array([[i, j]], dtype=np.float64))
                np.testing.assert_array_equal(out[0], plane[i, j])

    def test_cell_center_is_corner_mean(self, rng):
        plane = rng.standard_normal((4, 4, 2))
        out = interpolate_plane(plane, np.array([[1.5, 2.5]]))
        expected = (plane[1, 2] + plane[1, 3] + plane[2, 2] + plane[2, 3]) / 4
        np.testing.assert_allclose(out[0], expected, rtol=1e-12)

    def test_matches_direct_formula_oracle(self, rng):
        plane = rng.standard_normal((4, 4, 5))
        uv = np.column_stack([rng.uniform(0, 3, 200), rng.uniform(0, 3, 200)])
        out = interpolate_plane(plane, uv)
        for k in range(uv.shape[0]):
            expected = bilinear_oracle(plane, uv[k, 0], uv[k, 1])
            np.testing.assert_allclose(out[k], expected, rtol=1e-12)

    def test_out_of_bounds_raises(self, rng):
        plane = rng.standard_normal((4, 4, 2))
        with pytest.raises(OutOfBoundsError):
            interpolate_plane(plane, np.array([[5.5, 1.0]]))
        with pytest.raises(OutOfBoundsError):
            interpolate_plane(plane, np.array([[1.0, -1.5]]))
        # within one cell of the border only clamps
        interpolate_plane(plane, np.array([[-0.5, 3.5]]))

    def test_partition_of_unity(self, rng):
        plane = np.ones((6, 6, 1))
        uv = np.column_stack([rng.uniform(0, 5, 500), rng.uniform(0, 5, 500)])
        out = interpolate_plane(plane, uv)
        np.testing.assert_allclose(out[:, 0], 1.0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(
        a=st.floats(-5, 5),
        b=st.floats(-5, 5),
        u=st.floats(0, 2.999),
        v=st.floats(0, 2.999),
    )
    def test_linearity_in_plane_contents(self, a, b, u, v):
        rng = np.random.default_rng(7)
        pa = rng.standard_normal((4, 4, 2))
        pb = rng.standard_normal((4, 4, 2))
        uv = np.array([[u, v]])
        lhs = interpolate_plane(a * pa + b * pb, uv)
        rhs = a * interpolate_plane(pa, uv) + b * interpolate_plane(pb, uv)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestPlaneSetGeometry:
    def test_plane_shapes_cover_bounds(self):
        shape = plane_shape((0, 0, 0), (1.0, 2.0, 0.5), (0, 1), 0.24)
        assert shape == (int(np.ceil(1.0 / 0.24)) + 1, int(np.ceil(2.0 / 0.24)) + 1)

    def test_twelve_planes_by_default(self):
        ps = FeaturePlaneSet((0, 0, 0), (1, 1, 1), channels=4)
        assert len(ps.arrays) == 12
        assert ps.feature_dim == 8

    def test_shared_planes_halve_parameters(self):
        full = FeaturePlaneSet((0, 0, 0), (1, 1, 1), channels=4)
        shared = FeaturePlaneSet((0, 0, 0), (1, 1, 1), channels=4, shared_planes=True)
        assert len(shared.arrays) == 6
        assert shared.groups["appearance"] is shared.groups["geometry"]
        assert shared.parameter_count() < full.parameter_count()

    def test_single_scale_variants(self):
        coarse = FeaturePlaneSet((0, 0, 0), (1, 1, 1), channels=4, coarse_only=True)
        fine = FeaturePlaneSet((0, 0, 0), (1, 1, 1), channels=4, fine_only=True)
        assert coarse.feature_dim == 4 and fine.feature_dim == 4
        assert len(coarse.arrays) == 6 and len(fine.arrays) == 6

    def test_sum_combine_dim(self):
        ps = FeaturePlaneSet((0, 0, 0), (1, 1, 1), channels=4, combine="sum")
        assert ps.feature_dim == 4

    def test_parameter_count_quadratic_growth(self):
        # doubling each side multiplies plane parameters by ~4, never 8
        small = FeaturePlaneSet((0, 0, 0), (2, 2, 2))
        big = FeaturePlaneSet((0, 0, 0), (4, 4, 4))
        ratio = big.parameter_count() / small.parameter_count()
        assert 3.0 < ratio < 5.0

    def test_feature_zero_planes_is_zero(self):
        ps = FeaturePlaneSet((0, 0, 0), (1, 1, 1), channels=4)
        pts = np.array([[0.5, 0.5, 0.5], [0.1, 0.9, 0.3]])
        feat = ps.feature(pts, "geometry")
        assert feat.shape == (2, 8)
        np.testing.assert_array_equal(feat, 0)

    def test_feature_single_plane_slot(self, rng):
        ps = FeaturePlaneSet((0, 0, 0), (1, 1, 1), channels=3, dtype=np.float64)
        # constant vector on one coarse geometry plane shows up in the coarse slot
        v = np.array([1.0, 2.0, 3.0])
        idx = ps.groups["geometry"]["coarse"][0]
        ps.arrays[idx][...] = v
        feat = ps.feature(np.array([[0.3, 0.4, 0.5]]), "geometry")
        np.testing.assert_allclose(feat[0, :3], v, rtol=1e-12)
        np.testing.assert_array_equal(feat[0, 3:], 0)

    def test_feature_matches_compositional_oracle(self, rng):
        ps = FeaturePlaneSet(
            (0, 0, 0), (1, 1, 1), channels=2, coarse_res=0.5, fine_geo_res=0.25,
            fine_app_res=0.25, dtype=np.float64,
        )
        ps.randomize(rng, -1, 1)
        pts = rng.uniform(0, 1, (50, 3))
        for kind in ("geometry", "appearance"):
            got = ps.feature(pts, kind)
            expected = np.zeros((50, 4))
            for s, scale in enumerate(("coarse", "fine")):
                for idx in ps.groups[kind][scale]:
                    spec = ps.specs[idx]
                    a0, a1 = spec.axes
                    for k in range(50):
                        u = pts[k, a0] / spec.resolution
                        v = pts[k, a1] / spec.resolution
                        expected[k, 2 * s : 2 * s + 2] += bilinear_oracle(
                            ps.arrays[idx], u, v
                        )
            np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)

    def test_out_of_bounds_point_raises(self):
        ps = FeaturePlaneSet((0, 0, 0), (1, 1, 1), channels=2)
        with pytest.raises(OutOfBoundsError):
            ps.feature(np.array([[2.5, 0.5, 0.5]]), "geometry")
