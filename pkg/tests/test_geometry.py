"""Quaternions, poses, pinhole rays, and the box intersection."""

import numpy as np
import pytest

from trislam.geometry import (
    CameraIntrinsics,
    Pose,
    constant_velocity_extrapolate,
    look_at,
    pixel_ray,
    pixel_rays,
    quat_from_axis_angle,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_rotate_vjp,
    quat_to_matrix,
    matrix_to_quat,
    ray_box_intersection,
)

INTR = CameraIntrinsics(fx=100.0, fy=110.0, cx=64.0, cy=48.0, width=128, height=96)


class TestQuaternion:
    def test_rotate_matches_matrix(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = quat_normalize(rng.standard_normal(4))
            v = rng.standard_normal((5, 3))
            np.testing.assert_allclose(quat_rotate(q, v), v @ quat_to_matrix(q).T, atol=1e-12)

    def test_rotate_scale_invariant(self):
        rng = np.random.default_rng(1)
        q = rng.standard_normal(4)
        v = rng.standard_normal((3, 3))
        np.testing.assert_allclose(quat_rotate(q, v), quat_rotate(3.7 * q, v), atol=1e-12)

    def test_matrix_quat_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            q = quat_normalize(rng.standard_normal(4))
            q2 = matrix_to_quat(quat_to_matrix(q))
            assert min(np.linalg.norm(q - q2), np.linalg.norm(q + q2)) < 1e-12

    def test_rotate_vjp_matches_fd(self):
        rng = np.random.default_rng(3)
        q = quat_normalize(rng.standard_normal(4))
        v = rng.standard_normal((7, 3))
        g = rng.standard_normal((7, 3))
        gq = quat_rotate_vjp(q, v, g)
        eps = 1e-7
        for i in range(4):
            dq = np.zeros(4)
            dq[i] = eps
            fd = (np.sum(g * quat_rotate(q + dq, v)) - np.sum(g * quat_rotate(q - dq, v))) / (
                2 * eps
            )
            assert gq[i] == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_multiply_composes_rotations(self):
        rng = np.random.default_rng(4)
        qa = quat_normalize(rng.standard_normal(4))
        qb = quat_normalize(rng.standard_normal(4))
        v = rng.standard_normal((4, 3))
        lhs = quat_rotate(quat_multiply(qa, qb), v)
        rhs = quat_rotate(qa, quat_rotate(qb, v))
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestPose:
    def test_compose_inverse_identity(self):
        rng = np.random.default_rng(5)
        p = Pose(quat_normalize(rng.standard_normal(4)), rng.standard_normal(3))
        ident = p.compose(p.inverse())
        np.testing.assert_allclose(ident.t, 0, atol=1e-12)
        assert min(np.linalg.norm(ident.q - [1, 0, 0, 0]), np.linalg.norm(ident.q + [1, 0, 0, 0])) < 1e-12

    def test_apply_matches_matrix(self):
        rng = np.random.default_rng(6)
        p = Pose(quat_normalize(rng.standard_normal(4)), rng.standard_normal(3))
        pts = rng.standard_normal((6, 3))
        m = p.matrix()
        expected = pts @ m[:3, :3].T + m[:3, 3]
        np.testing.assert_allclose(p.apply(pts), expected, atol=1e-12)
        np.testing.assert_allclose(p.apply_inverse(p.apply(pts)), pts, atol=1e-10)

    def test_constant_velocity_extrapolation(self):
        # uniform motion: the extrapolated pose continues the step exactly
        step = Pose(quat_from_axis_angle([0, 0, 1], 0.1), np.array([0.05, 0.0, 0.01]))
        p0 = Pose.identity()
        p1 = p0.compose(step)
        p2_expected = p1.compose(step)
        p2 = constant_velocity_extrapolate(p1, p0)
        np.testing.assert_allclose(p2.t, p2_expected.t, atol=1e-12)
        assert min(np.linalg.norm(p2.q - p2_expected.q), np.linalg.norm(p2.q + p2_expected.q)) < 1e-12


class TestPixelRays:
    def test_principal_point_is_optical_axis(self):
        origin, direction = pixel_ray(INTR, Pose.identity(), (INTR.cx, INTR.cy))
        np.testing.assert_allclose(direction, [0, 0, 1], atol=1e-12)
        np.testing.assert_allclose(origin, 0, atol=1e-12)

    def test_pure_translation_moves_origin_only(self):
        t = np.array([1.0, -2.0, 0.5])
        o1, d1 = pixel_ray(INTR, Pose.identity(), (10.0, 20.0))
        o2, d2 = pixel_ray(INTR, Pose(np.array([1.0, 0, 0, 0]), t), (10.0, 20.0))
        np.testing.assert_allclose(o2, t)
        np.testing.assert_allclose(d1, d2, atol=1e-15)

    def test_project_unproject_round_trip(self):
        rng = np.random.default_rng(7)
        pose = Pose(
            quat_from_axis_angle(rng.standard_normal(3), 0.4), rng.standard_normal(3)
        )
        pixels = np.column_stack(
            [rng.uniform(0, INTR.width - 1, 50), rng.uniform(0, INTR.height - 1, 50)]
        )
        origins, _, plan = pixel_rays(INTR, pose, pixels)
        depth = rng.uniform(0.5, 5.0, 50)
        points = origins + depth[:, None] * plan
        cam = pose.apply_inverse(points)
        np.testing.assert_allclose(cam[:, 2], depth, atol=1e-9)  # planar depth
        reproj = INTR.project(cam)
        np.testing.assert_allclose(reproj, pixels, atol=1e-6)

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=1, cx=10, cy=10, width=20, height=20)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1, fy=1, cx=25, cy=10, width=20, height=20)


class TestRayBox:
    def test_inside_origin(self):
        near, far, hit = ray_box_intersection(
            np.array([[0.0, 0.0, 0.0]]), np.array([[0.0, 0.0, 1.0]]), -np.ones(3), np.ones(3)
        )
        assert hit[0] and near[0] == 0.0 and far[0] == pytest.approx(1.0)

    def test_miss(self):
        near, far, hit = ray_box_intersection(
            np.array([[5.0, 0.0, 0.0]]), np.array([[0.0, 0.0, 1.0]]), -np.ones(3), np.ones(3)
        )
        assert not hit[0]

    def test_outside_entering(self):
        near, far, hit = ray_box_intersection(
            np.array([[0.0, 0.0, -3.0]]), np.array([[0.0, 0.0, 1.0]]), -np.ones(3), np.ones(3)
        )
        assert hit[0]
        assert near[0] == pytest.approx(2.0) and far[0] == pytest.approx(4.0)


class TestLookAt:
    def test_look_at_points_camera_z_to_target(self):
        eye = np.array([2.0, 1.0, 0.5])
        target = np.array([0.0, 0.0, 0.0])
        pose = look_at(eye, target)
        fwd = quat_rotate(pose.q, np.array([[0.0, 0.0, 1.0]]))[0]
        np.testing.assert_allclose(fwd, (target - eye) / np.linalg.norm(target - eye), atol=1e-12)
        np.testing.assert_allclose(pose.t, eye)
        # right-handed rotation
        assert np.linalg.det(quat_to_matrix(pose.q)) == pytest.approx(1.0)
