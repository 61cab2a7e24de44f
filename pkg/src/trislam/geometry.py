"""Camera geometry: quaternion rotations, rigid poses, pinhole projection.

Conventions:
  - quaternions are (w, x, y, z); poses are camera-to-world, x_world = R x_cam + t
  - camera frame is x right, y down, z forward (OpenCV / TUM)
  - "planar depth" z of a point is its camera-frame z coordinate; rays are
    parameterized so that the point at parameter z has planar depth exactly z
"""

from dataclasses import dataclass

import numpy as np


# ---------------------------------------------------------------------------
# quaternions


def quat_identity(dtype=np.float64):
    return np.array([1.0, 0.0, 0.0, 0.0], dtype=dtype)


def quat_normalize(q):
    return q / np.linalg.norm(q)


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_matrix(q):
    w, x, y, z = quat_normalize(np.asarray(q, dtype=np.float64))
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m):
    """Rotation matrix to unit quaternion (w >= 0 branch-stable extraction)."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_rotate(q, vecs):
    """Rotate row vectors by R(q / |q|).

    Implemented via the conjugation identity q v q* = |q|^2 R(q/|q|) v, which
    is smooth in the raw 4-vector q (scale-invariant), so gradients w.r.t.
    unnormalized quaternion parameters are well defined.
    """
    q = np.asarray(q)
    vecs = np.asarray(vecs)
    w = q[0]
    r = q[1:]
    n = float(np.dot(q, q))
    rv = vecs @ r
    rxv = np.cross(np.broadcast_to(r, vecs.shape), vecs)
    return ((w * w - float(r @ r)) * vecs + 2.0 * rv[..., None] * r + 2.0 * w * rxv) / n


def quat_rotate_vjp(q, vecs, gout):
    """Gradient of sum(gout * quat_rotate(q, vecs)) w.r.t. q (shape (4,))."""
    q = np.asarray(q, dtype=np.float64)
    vecs = np.asarray(vecs, dtype=np.float64)
    gout = np.asarray(gout, dtype=np.float64)
    w = q[0]
    r = q[1:]
    n = float(np.dot(q, q))
    f = quat_rotate(q, vecs)
    gf_dot_f = np.einsum("nk,nk->n", gout, f)
    gf_dot_v = np.einsum("nk,nk->n", gout, vecs)
    gf_dot_r = gout @ r
    rv = vecs @ r
    rxv = np.cross(np.broadcast_to(r, vecs.shape), vecs)
    gxv = np.cross(gout, vecs)

    gw = float(np.sum(np.einsum("nk,nk->n", gout, 2.0 * w * vecs + 2.0 * rxv) - 2.0 * w * gf_dot_f) / n)
    gr = (
        -2.0 * np.sum(gf_dot_v) * r
        + 2.0 * gf_dot_r @ vecs
        + 2.0 * rv @ gout
        - 2.0 * w * np.sum(gxv, axis=0)
        - 2.0 * np.sum(gf_dot_f) * r
    ) / n
    return np.concatenate([[gw], gr])


# ---------------------------------------------------------------------------
# poses


@dataclass
class Pose:
    """Camera-to-world rigid pose with quaternion rotation."""

    q: np.ndarray  # (4,) w,x,y,z
    t: np.ndarray  # (3,)

    @staticmethod
    def identity():
        return Pose(quat_identity(), np.zeros(3))

    @staticmethod
    def from_matrix(m):
        m = np.asarray(m, dtype=np.float64)
        return Pose(matrix_to_quat(m[:3, :3]), m[:3, 3].copy())

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.q)
        m[:3, 3] = self.t
        return m

    def normalized(self):
        return Pose(quat_normalize(self.q), self.t.copy())

    def inverse(self):
        qi = quat_conjugate(quat_normalize(self.q))
        return Pose(qi, -quat_rotate(qi, self.t[None])[0])

    def compose(self, other):
        """self o other: apply ``other`` first, then ``self``."""
        q = quat_normalize(quat_multiply(self.q, other.q))
        t = quat_rotate(self.q, other.t[None])[0] + self.t
        return Pose(q, t)

    def apply(self, points):
        return quat_rotate(self.q, np.atleast_2d(points)) + self.t

    def apply_inverse(self, points):
        return quat_rotate(quat_conjugate(quat_normalize(self.q)), np.atleast_2d(points) - self.t)

    def copy(self):
        return Pose(self.q.copy(), self.t.copy())


def constant_velocity_extrapolate(prev: Pose, prev2: Pose):
    """Seed pose_t = prev o (prev2^-1 o prev)."""
    delta = prev2.inverse().compose(prev)
    return prev.compose(delta)


# ---------------------------------------------------------------------------
# pinhole camera


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0  # integer depth units per meter

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def cam_dirs(self, pixels):
        """Unnormalized camera-frame directions [(u-cx)/fx, (v-cy)/fy, 1]."""
        pixels = np.atleast_2d(pixels)
        d = np.empty((pixels.shape[0], 3))
        d[:, 0] = (pixels[:, 0] - self.cx) / self.fx
        d[:, 1] = (pixels[:, 1] - self.cy) / self.fy
        d[:, 2] = 1.0
        return d

    def project(self, points_cam):
        """Camera-frame points -> pixel coordinates (u, v)."""
        points_cam = np.atleast_2d(points_cam)
        z = points_cam[:, 2]
        return np.stack(
            [
                self.fx * points_cam[:, 0] / z + self.cx,
                self.fy * points_cam[:, 1] / z + self.cy,
            ],
            axis=1,
        )

    def pixel_grid(self):
        """All pixel centers as an (H*W, 2) array, row-major."""
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)


def pixel_rays(intrinsics, pose, pixels):
    """Back-project pixels through a pose.

    Returns (origins, unit_dirs, plan_dirs): ``plan_dirs`` are scaled so that
    origin + z * plan_dir has camera planar depth exactly z; ``unit_dirs`` are
    the normalized directions.
    """
    v = intrinsics.cam_dirs(pixels)
    plan = quat_rotate(pose.q, v)
    origins = np.broadcast_to(pose.t, plan.shape).copy()
    units = plan / np.linalg.norm(plan, axis=1, keepdims=True)
    return origins, units, plan


def pixel_ray(intrinsics, pose, pixel):
    """Single-pixel convenience wrapper returning (origin, unit direction)."""
    o, u, _ = pixel_rays(intrinsics, pose, np.asarray(pixel, dtype=np.float64)[None])
    return o[0], u[0]


def ray_box_intersection(origins, dirs, bounds_min, bounds_max, eps=1e-12):
    """Slab test. Returns (near, far, hit) in the parameterization of ``dirs``.

    near is clamped to >= 0 (segments start at the origin).
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    inv = 1.0 / np.where(np.abs(dirs) < eps, np.where(dirs >= 0, eps, -eps), dirs)
    t0 = (bounds_min - origins) * inv
    t1 = (bounds_max - origins) * inv
    near = np.minimum(t0, t1).max(axis=1)
    far = np.maximum(t0, t1).min(axis=1)
    near = np.maximum(near, 0.0)
    hit = far > near
    return near, far, hit


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose looking from eye to target (y-down convention)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    y_hint = -np.asarray(up, dtype=np.float64)
    x = np.cross(y_hint, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight along up: pick an arbitrary x
        x = np.cross(np.array([0.0, 1.0, 0.0]), z)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0] = x
    m[:3, 1] = y
    m[:3, 2] = z
    m[:3, 3] = eye
    return Pose.from_matrix(m)
