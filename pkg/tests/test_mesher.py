"""Marching cubes against analytic surfaces, culling, and PLY round trips."""

import numpy as np
import pytest

from trislam.geometry import CameraIntrinsics, Pose, look_at
from trislam.mesher import (
    TriMesh,
    TsdfVolume,
    boundary_edge_count,
    clean_mesh,
    cull_mesh,
    fill_volume,
    marching_cubes,
    read_ply,
    volume_grid_shape,
    write_ply,
)


def sphere_sdf(r=0.5):
    return lambda p: np.linalg.norm(p, axis=1) - r


class TestFillVolume:
    def test_grid_dims_ceil_plus_one(self):
        assert volume_grid_shape((0, 0, 0), (1.0, 0.55, 0.2), 0.1) == (11, 7, 3)

    def test_constant_positive_field_gives_empty_mesh(self):
        vol = fill_volume(lambda p: np.full(p.shape[0], 0.5), (0, 0, 0), (1, 1, 1), 0.25)
        assert np.all(vol.values > 0)
        mesh = marching_cubes(vol)
        assert mesh.empty

    def test_sphere_sign_structure(self):
        vol = fill_volume(sphere_sdf(), (-0.6, -0.6, -0.6), (0.6, 0.6, 0.6), 0.05,
                          dtype=np.float64)
        nx, ny, nz = vol.values.shape
        center = vol.values[nx // 2, ny // 2, nz // 2]
        assert center < 0
        assert vol.values[0, 0, 0] > 0


class TestMarchingCubes:
    def test_single_corner_gives_one_triangle(self):
        v = np.full((2, 2, 2), 1.0)
        v[0, 0, 0] = -1.0
        mesh = marching_cubes(TsdfVolume(v, np.zeros(3), 1.0))
        assert mesh.faces.shape[0] == 1
        # linear interpolation of +-1 crosses at edge midpoints
        expected = {(0.5, 0.0, 0.0), (0.0, 0.5, 0.0), (0.0, 0.0, 0.5)}
        got = {tuple(np.round(p, 9)) for p in mesh.vertices}
        assert got == expected

    def test_sign_flip_same_geometry_reversed_winding(self):
        v = np.full((2, 2, 2), 1.0)
        v[0, 0, 0] = -1.0
        m1 = marching_cubes(TsdfVolume(v, np.zeros(3), 1.0))
        m2 = marching_cubes(TsdfVolume(-v, np.zeros(3), 1.0))
        np.testing.assert_allclose(
            np.sort(m1.vertices, axis=0), np.sort(m2.vertices, axis=0), atol=1e-12
        )
        n1 = np.cross(m1.vertices[m1.faces[0, 1]] - m1.vertices[m1.faces[0, 0]],
                      m1.vertices[m1.faces[0, 2]] - m1.vertices[m1.faces[0, 0]])
        n2 = np.cross(m2.vertices[m2.faces[0, 1]] - m2.vertices[m2.faces[0, 0]],
                      m2.vertices[m2.faces[0, 2]] - m2.vertices[m2.faces[0, 0]])
        assert np.dot(n1, n2) < 0

    def test_sphere_radii_watertight_area(self):
        r = 0.5
        vol = fill_volume(sphere_sdf(r), (-0.6, -0.6, -0.6), (0.6, 0.6, 0.6), 0.01,
                          dtype=np.float64)
        mesh = marching_cubes(vol)
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert np.all(np.abs(radii - r) <= 0.01)
        assert boundary_edge_count(mesh) == 0
        assert mesh.area() == pytest.approx(4 * np.pi * r**2, rel=0.03)

    def test_vertex_sdf_residual_small(self):
        r = 0.5
        vol = fill_volume(sphere_sdf(r), (-0.6, -0.6, -0.6), (0.6, 0.6, 0.6), 0.02,
                          dtype=np.float64)
        mesh = marching_cubes(vol)
        resid = np.abs(sphere_sdf(r)(mesh.vertices))
        # zero-crossing consistency: below the max per-cell SDF variation
        assert resid.max() < 0.02 * np.sqrt(3)

    def test_degenerate_triangles_removed(self):
        v = np.full((2, 2, 2), 1.0)
        v[0, 0, 0] = 0.0  # iso exactly on a corner -> zero-area sliver
        mesh = marching_cubes(TsdfVolume(v, np.zeros(3), 1.0))
        if not mesh.empty:
            assert np.all(mesh.areas() > 1e-12)


class TestCleanMesh:
    def test_welds_and_drops_slivers(self):
        verts = np.array([
            [0, 0, 0], [1, 0, 0], [0, 1, 0], [1e-9, 0, 0],
        ], dtype=np.float64)
        faces = np.array([[0, 1, 2], [3, 1, 0]])  # second collapses after weld
        mesh = clean_mesh(TriMesh(verts, faces))
        assert mesh.faces.shape[0] == 1
        assert mesh.vertices.shape[0] == 3


class TestCulling:
    INTR = CameraIntrinsics(fx=50, fy=50, cx=32, cy=24, width=64, height=48)

    def unit_quad(self, z=1.0):
        verts = np.array(
            [[-0.3, -0.3, z], [0.3, -0.3, z], [0.3, 0.3, z], [-0.3, 0.3, z]]
        )
        return TriMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))

    def depth_map(self, value):
        return np.full((48, 64), value)

    def test_zero_keyframes_gives_empty_mesh(self):
        out = cull_mesh(self.unit_quad(), [], self.INTR, 0.06)
        assert out.empty

    def test_face_behind_camera_removed(self):
        mesh = self.unit_quad(z=-1.0)
        out = cull_mesh(mesh, [(Pose.identity(), self.depth_map(2.0))], self.INTR, 0.06)
        assert out.empty

    def test_visible_face_retained(self):
        mesh = self.unit_quad(z=1.0)
        out = cull_mesh(mesh, [(Pose.identity(), self.depth_map(1.0))], self.INTR, 0.06)
        assert out.faces.shape[0] == 2

    def test_occluded_face_removed(self):
        mesh = self.unit_quad(z=2.0)  # wall at 1.0 occludes it
        out = cull_mesh(mesh, [(Pose.identity(), self.depth_map(1.0))], self.INTR, 0.06)
        assert out.empty

    def test_no_depth_measurement_observes_nothing(self):
        mesh = self.unit_quad(z=1.0)
        out = cull_mesh(mesh, [(Pose.identity(), self.depth_map(0.0))], self.INTR, 0.06)
        assert out.empty

    def test_culling_monotone_in_keyframes(self):
        mesh = self.unit_quad(z=1.0)
        away = look_at((0, 0, 5), (0, 0, 10))
        frames1 = [(away, self.depth_map(2.0))]
        frames2 = frames1 + [(Pose.identity(), self.depth_map(1.0))]
        kept1 = cull_mesh(mesh, frames1, self.INTR, 0.06).faces.shape[0]
        kept2 = cull_mesh(mesh, frames2, self.INTR, 0.06).faces.shape[0]
        assert kept2 >= kept1


class TestPly:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        verts = rng.uniform(-1, 1, (20, 3))
        faces = rng.integers(0, 20, (30, 3))
        colors = rng.uniform(0, 1, (20, 3))
        path = tmp_path / "m.ply"
        write_ply(path, TriMesh(verts, faces, colors))
        back = read_ply(path)
        np.testing.assert_allclose(back.vertices, verts.astype(np.float32), atol=1e-7)
        np.testing.assert_array_equal(back.faces, faces)
        assert back.colors is not None
        np.testing.assert_allclose(back.colors, colors, atol=1 / 255 + 1e-9)

    def test_round_trip_without_colors(self, tmp_path):
        verts = np.eye(3)
        faces = np.array([[0, 1, 2]])
        path = tmp_path / "m.ply"
        write_ply(path, TriMesh(verts, faces))
        back = read_ply(path)
        assert back.colors is None
        np.testing.assert_array_equal(back.faces, faces)
