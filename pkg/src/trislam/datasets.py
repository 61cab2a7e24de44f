"""RGB-D data: TUM-format sequence loading and synthetic scene generation.

Synthetic scenes are unions of analytic SDF primitives rendered by sphere
tracing, written to disk in the TUM layout (rgb/, depth/, rgb.txt,
depth.txt, groundtruth.txt; depth as 16-bit PNG at a configurable scale),
so the same loader serves both real and generated data.
"""

import configparser
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Pose, look_at, pixel_rays, ray_box_intersection
from .util import StreamKeys, hash_uniform

log = logging.getLogger(__name__)

ASSOCIATION_WINDOW = 0.02  # seconds
FRAME_RATE = 30.0
SPHERE_TRACE_STEPS = 128
SPHERE_TRACE_EPS = 1e-5


class DatasetError(RuntimeError):
    pass


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    depth: np.ndarray  # (H, W) float meters, 0 invalid
    gt_pose: Pose = None


# ---------------------------------------------------------------------------
# TUM format


def _read_index(path):
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            entries.append((float(parts[0]), parts[1]))
    return entries


def associate(ts_a, ts_b, window=ASSOCIATION_WINDOW):
    """Greedy mutual nearest-neighbor timestamp association.

    Returns index pairs (i, j) sorted by i; each side used at most once.
    """
    ts_a = np.asarray(ts_a)
    ts_b = np.asarray(ts_b)
    order_b = np.argsort(ts_b, kind="stable")
    sorted_b = ts_b[order_b]
    candidates = []
    for i, t in enumerate(ts_a):
        pos = np.searchsorted(sorted_b, t)
        for j in (pos - 1, pos):
            if 0 <= j < len(sorted_b) and abs(sorted_b[j] - t) <= window:
                candidates.append((abs(sorted_b[j] - t), i, int(order_b[j])))
    candidates.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def read_trajectory_file(path):
    """TUM trajectory rows -> (timestamps (N,), poses list).

    Line format: timestamp tx ty tz qx qy qz qw.
    """
    stamps, poses = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            stamps.append(vals[0])
            t = np.array(vals[1:4])
            qx, qy, qz, qw = vals[4:8]
            poses.append(Pose(np.array([qw, qx, qy, qz]), t))
    return np.array(stamps), poses


def write_trajectory_row(fh, timestamp, pose: Pose):
    q = pose.q
    vals = (timestamp, *pose.t, q[1], q[2], q[3], q[0])
    fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


def load_tum(path, depth_scale=5000.0, window=ASSOCIATION_WINDOW):
    """Yield FrameRecords from a TUM-format directory.

    rgb/depth pairs are associated by nearest timestamp within ``window``;
    unmatched frames are skipped (count logged). Ground-truth poses, when
    groundtruth.txt exists, are attached the same way.
    """
    path = Path(path)
    rgb_index = _read_index(path / "rgb.txt")
    depth_index = _read_index(path / "depth.txt")
    pairs = associate([t for t, _ in rgb_index], [t for t, _ in depth_index], window)
    dropped = len(rgb_index) - len(pairs)
    if dropped:
        log.warning("%d rgb frames without a depth match (skipped)", dropped)

    gt_stamps, gt_poses = None, None
    if (path / "groundtruth.txt").exists():
        gt_stamps, gt_poses = read_trajectory_file(path / "groundtruth.txt")

    for index, (i, j) in enumerate(pairs):
        ts, rgb_file = rgb_index[i]
        _, depth_file = depth_index[j]
        try:
            rgb = np.asarray(Image.open(path / rgb_file), dtype=np.float64)[..., :3] / 255.0
            depth_raw = np.asarray(Image.open(path / depth_file))
        except Exception as exc:
            raise DatasetError(f"frame {index}: failed to read ({exc})") from exc
        depth = depth_raw.astype(np.float64) / depth_scale
        gt = None
        if gt_stamps is not None and len(gt_stamps):
            k = int(np.argmin(np.abs(gt_stamps - ts)))
            if abs(gt_stamps[k] - ts) <= window:
                gt = gt_poses[k]
        yield FrameRecord(index, ts, rgb, depth, gt)


# ---------------------------------------------------------------------------
# analytic SDF primitives


@dataclass
class SpherePrim:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius


@dataclass
class BoxPrim:
    center: np.ndarray
    half_extents: np.ndarray
    albedo: np.ndarray

    def sdf(self, p):
        q = np.abs(p - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass
class PlanePrim:
    normal: np.ndarray  # unit
    offset: float  # signed distance of the plane from the origin
    albedo: np.ndarray

    def sdf(self, p):
        return p @ self.normal - self.offset


@dataclass
class OrbitTrajectory:
    """Circular-arc camera path looking at a fixed target."""

    center: np.ndarray  # look-at target
    radius: float
    height: float  # camera z offset relative to center
    frames: int
    span_deg: float = 360.0
    start_deg: float = 0.0

    def poses(self):
        out = []
        for i in range(self.frames):
            theta = np.deg2rad(self.start_deg + self.span_deg * i / self.frames)
            eye = self.center + np.array(
                [self.radius * np.cos(theta), self.radius * np.sin(theta), self.height]
            )
            out.append(look_at(eye, self.center))
        return out


@dataclass
class SyntheticScene:
    primitives: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    trajectory: OrbitTrajectory = None
    intrinsics: CameraIntrinsics = None
    light: np.ndarray = dc_field(default_factory=lambda: np.array([0.35, -0.25, 0.9]))
    ambient: float = 0.3
    depth_noise_sigma: float = 0.0
    noise_seed: int = 0

    def sdf(self, p):
        d = np.stack([prim.sdf(p) for prim in self.primitives], axis=-1)
        return d.min(axis=-1)

    def sdf_prim(self, p):
        d = np.stack([prim.sdf(p) for prim in self.primitives], axis=-1)
        return d.min(axis=-1), d.argmin(axis=-1)

    def normals(self, p, h=1e-5):
        n = np.zeros_like(p)
        for a in range(3):
            dp = np.zeros(3)
            dp[a] = h
            n[:, a] = self.sdf(p + dp) - self.sdf(p - dp)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norm, 1e-12)

    def albedos(self):
        return np.stack([prim.albedo for prim in self.primitives])


def sphere_trace(scene, pose, intrinsics, max_steps=SPHERE_TRACE_STEPS, eps=SPHERE_TRACE_EPS):
    """Exact planar depth + shaded color for every pixel of a view.

    Marching runs in the planar-depth parameterization (point = o + z * plan)
    and clips to the scene box; misses get depth 0 and black color.
    """
    pixels = intrinsics.pixel_grid()
    origins, _, plan = pixel_rays(intrinsics, pose, pixels)
    near, far, hit = ray_box_intersection(origins, plan, scene.bounds_min, scene.bounds_max)
    n = pixels.shape[0]
    depth = np.zeros(n)
    color = np.zeros((n, 3))

    plan_norm = np.linalg.norm(plan, axis=1)
    z = near.copy()
    alive = hit.copy()
    done = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        p = origins[idx] + z[idx, None] * plan[idx]
        d = scene.sdf(p)
        hit_now = d < eps
        done[idx[hit_now]] = True
        z[idx] += d / plan_norm[idx]
        escaped = z[idx] > far[idx]
        alive[idx[hit_now]] = False
        alive[idx[escaped & ~hit_now]] = False

    if done.any():
        idx = np.flatnonzero(done)
        depth[idx] = z[idx]
        p = origins[idx] + z[idx, None] * plan[idx]
        _, prim = scene.sdf_prim(p)
        normals = scene.normals(p)
        l = scene.light / np.linalg.norm(scene.light)
        lambert = np.maximum(normals @ l, 0.0)
        shade = scene.ambient + (1.0 - scene.ambient) * lambert
        color[idx] = scene.albedos()[prim] * shade[:, None]

    h, w = intrinsics.height, intrinsics.width
    return np.clip(color, 0.0, 1.0).reshape(h, w, 3), depth.reshape(h, w)


def render_frame(scene, pose, frame_index):
    """Quantized synthetic frame exactly as the TUM files would store it."""
    intr = scene.intrinsics
    color, depth = sphere_trace(scene, pose, intr)
    if scene.depth_noise_sigma > 0:
        pix = np.arange(depth.size)
        u1 = hash_uniform(scene.noise_seed, frame_index, pix, 0, StreamKeys.DEPTH_NOISE)
        u2 = hash_uniform(scene.noise_seed, frame_index, pix, 1, StreamKeys.DEPTH_NOISE)
        gauss = np.sqrt(-2.0 * np.log(np.maximum(u1, 1e-300))) * np.cos(2 * np.pi * u2)
        noisy = depth + scene.depth_noise_sigma * gauss.reshape(depth.shape)
        depth = np.where(depth > 0, np.maximum(noisy, 0.0), 0.0)
    rgb8 = np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8)
    depth16 = np.clip(np.round(depth * intr.depth_scale), 0, 65535).astype(np.uint16)
    return rgb8, depth16


def synth_generate(scene: SyntheticScene, out_dir):
    """Render the configured trajectory into a TUM-format directory.

    Returns the list of ground-truth poses. Trajectory positions must stay
    inside the scene bounds.
    """
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    poses = scene.trajectory.poses()
    for pose in poses:
        if (pose.t < scene.bounds_min).any() or (pose.t > scene.bounds_max).any():
            raise DatasetError(f"trajectory leaves scene bounds at {pose.t}")

    rgb_lines, depth_lines, gt_lines = [], [], []
    for i, pose in enumerate(poses):
        ts = i / FRAME_RATE
        rgb8, depth16 = render_frame(scene, pose, i)
        rgb_name = f"rgb/{i:06d}.png"
        depth_name = f"depth/{i:06d}.png"
        Image.fromarray(rgb8).save(out / rgb_name)
        Image.fromarray(depth16).save(out / depth_name)
        rgb_lines.append(f"{ts!r} {rgb_name}")
        depth_lines.append(f"{ts!r} {depth_name}")
        q = pose.q
        gt_lines.append(
            " ".join(repr(float(v)) for v in (ts, *pose.t, q[1], q[2], q[3], q[0]))
        )
    (out / "rgb.txt").write_text("# timestamp filename\n" + "\n".join(rgb_lines) + "\n")
    (out / "depth.txt").write_text("# timestamp filename\n" + "\n".join(depth_lines) + "\n")
    (out / "groundtruth.txt").write_text(
        "# timestamp tx ty tz qx qy qz qw\n" + "\n".join(gt_lines) + "\n"
    )
    return poses


# ---------------------------------------------------------------------------
# scene description files


def _vec(s):
    return np.array([float(x) for x in s.split()])


def load_scene(path):
    """Parse a scene description file (INI with [sphere:*]/[box:*]/[plane:*],
    [trajectory], [camera], [scene] sections)."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise DatasetError(f"cannot read scene file {path}")
    sc = cp["scene"]
    prims = []
    for section in cp.sections():
        kind = section.split(":")[0]
        s = cp[section]
        if kind == "sphere":
            prims.append(SpherePrim(_vec(s["center"]), float(s["radius"]), _vec(s["albedo"])))
        elif kind == "box":
            prims.append(BoxPrim(_vec(s["center"]), _vec(s["half_extents"]), _vec(s["albedo"])))
        elif kind == "plane":
            n = _vec(s["normal"])
            prims.append(PlanePrim(n / np.linalg.norm(n), float(s["offset"]), _vec(s["albedo"])))
    if not prims:
        raise DatasetError("scene has no primitives")

    tr = cp["trajectory"]
    if tr.get("type", "orbit") != "orbit":
        raise DatasetError(f"unknown trajectory type {tr.get('type')}")
    trajectory = OrbitTrajectory(
        center=_vec(tr["center"]),
        radius=float(tr["radius"]),
        height=float(tr["height"]),
        frames=int(tr["frames"]),
        span_deg=float(tr.get("span_deg", "360")),
        start_deg=float(tr.get("start_deg", "0")),
    )
    cam = cp["camera"]
    intrinsics = CameraIntrinsics(
        fx=float(cam["fx"]),
        fy=float(cam["fy"]),
        cx=float(cam["cx"]),
        cy=float(cam["cy"]),
        width=int(cam["width"]),
        height=int(cam["height"]),
        depth_scale=float(cam.get("depth_scale", "5000")),
    )
    return SyntheticScene(
        primitives=prims,
        bounds_min=_vec(sc["bounds_min"]),
        bounds_max=_vec(sc["bounds_max"]),
        trajectory=trajectory,
        intrinsics=intrinsics,
        light=_vec(sc.get("light", "0.35 -0.25 0.9")),
        ambient=float(sc.get("ambient", "0.3")),
        depth_noise_sigma=float(sc.get("depth_noise_sigma", "0")),
        noise_seed=int(sc.get("noise_seed", "0")),
    )
