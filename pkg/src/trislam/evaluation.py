"""Localization and reconstruction metrics.

ATE aligns the estimated trajectory to ground truth with the closed-form
rigid least-squares fit and reports mean/RMSE of the residual translation
norms. Reconstruction metrics compare area-weighted surface samples of two
meshes via exact point-to-triangle distances (KD-tree accelerated, brute
force available as the test oracle), plus a rendered-depth L1 against the
analytic scene.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .datasets import associate, sphere_trace
from .geometry import look_at
from .render import render_image
from .util import hash_uniform


@dataclass
class TrajectoryError:
    errors: np.ndarray  # per-frame translational residual norms (m)
    mean: float
    rmse: float


def scaled_intrinsics(intr, width, height):
    """Same field of view at a different resolution (for cheap eval renders)."""
    from .geometry import CameraIntrinsics

    sx = width / intr.width
    sy = height / intr.height
    return CameraIntrinsics(
        intr.fx * sx, intr.fy * sy, (intr.cx + 0.5) * sx - 0.5, (intr.cy + 0.5) * sy - 0.5,
        width, height, intr.depth_scale,
    )


def rigid_align(src, dst):
    """Least-squares R, t with R @ src + t ~= dst (Horn's method, no scale)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    t = mu_d - r @ mu_s
    return r, t


def ate(est_stamps, est_poses, gt_stamps, gt_poses, window=0.02):
    """Absolute trajectory error after rigid alignment of translations."""
    pairs = associate(est_stamps, gt_stamps, window)
    if len(pairs) < 2:
        raise ValueError("need at least two associated pose pairs for ATE")
    e = np.array([est_poses[i].t for i, _ in pairs])
    g = np.array([gt_poses[j].t for _, j in pairs])
    r, t = rigid_align(e, g)
    resid = (e @ r.T + t) - g
    errors = np.linalg.norm(resid, axis=1)
    return TrajectoryError(errors, float(errors.mean()), float(np.sqrt((errors**2).mean())))


# ---------------------------------------------------------------------------
# rendered-depth L1 against the analytic scene


def eval_poses(scene, n, seed=0, margin=0.3):
    """Deterministic in-bounds camera poses looking at the scene center.

    Positions are drawn in the box shrunk by ``margin`` and rejected while
    inside an object (analytic SDF below 0.2 m clearance).
    """
    lo = scene.bounds_min + margin
    hi = scene.bounds_max - margin
    target = 0.5 * (scene.bounds_min + scene.bounds_max)
    poses = []
    attempt = 0
    while len(poses) < n:
        u = hash_uniform(seed, attempt, np.arange(3), 17)
        p = lo + (hi - lo) * u
        attempt += 1
        if scene.sdf(p[None])[0] < 0.2:
            continue
        if np.linalg.norm(p - target) < 0.3:
            continue
        poses.append(look_at(p, target))
        if attempt > 100 * n:
            raise RuntimeError("could not place evaluation poses inside bounds")
    return poses


def depth_l1(field, scene, intrinsics, n_poses=200, seed=0, n_strat=32, n_imp=8):
    """Mean absolute rendered-vs-analytic depth over valid pixels (meters)."""
    poses = eval_poses(scene, n_poses, seed)
    total, count = 0.0, 0
    for k, pose in enumerate(poses):
        _, gt_depth = sphere_trace(scene, pose, intrinsics)
        _, est_depth = render_image(
            field, pose, intrinsics, n_strat, n_imp, seed=seed, frame_id=k, with_color=False
        )
        valid = (gt_depth > 0) & (est_depth > 0)
        if valid.any():
            total += float(np.abs(est_depth[valid] - gt_depth[valid]).sum())
            count += int(valid.sum())
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# mesh sampling and point-to-mesh distance


def sample_mesh_points(mesh, n, seed=0):
    """Area-weighted surface samples (n, 3), deterministic for a seed."""
    areas = mesh.areas()
    if areas.sum() <= 0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(np.random.Philox(key=seed))
    fidx = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[fidx]]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def point_triangle_distance(points, tri_a, tri_b, tri_c):
    """Exact distance from points (n, 3) to matching triangles (n, 3) each."""
    ab = tri_b - tri_a
    ac = tri_c - tri_a
    ap = points - tri_a
    d1 = np.einsum("nk,nk->n", ab, ap)
    d2 = np.einsum("nk,nk->n", ac, ap)
    bp = points - tri_b
    d3 = np.einsum("nk,nk->n", ab, bp)
    d4 = np.einsum("nk,nk->n", ac, bp)
    cp = points - tri_c
    d5 = np.einsum("nk,nk->n", ab, cp)
    d6 = np.einsum("nk,nk->n", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    s = va + vb + vc
    denom = np.where(s == 0, 1.0, s)
    v = vb / denom
    w = vc / denom
    closest = tri_a + v[:, None] * ab + w[:, None] * ac

    # vertex regions
    r_a = (d1 <= 0) & (d2 <= 0)
    r_b = (d3 >= 0) & (d4 <= d3)
    r_c = (d6 >= 0) & (d5 <= d6)
    # edge regions
    e_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    sab = d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3)
    e_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    sac = d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6)
    e_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    sbc = (d4 - d3) / np.where((d4 - d3) + (d5 - d6) == 0, 1.0, (d4 - d3) + (d5 - d6))

    closest = np.where(e_bc[:, None], tri_b + sbc[:, None] * (tri_c - tri_b), closest)
    closest = np.where(e_ac[:, None], tri_a + sac[:, None] * ac, closest)
    closest = np.where(e_ab[:, None], tri_a + sab[:, None] * ab, closest)
    closest = np.where(r_c[:, None], tri_c, closest)
    closest = np.where(r_b[:, None], tri_b, closest)
    closest = np.where(r_a[:, None], tri_a, closest)
    return np.linalg.norm(points - closest, axis=1)


def point_mesh_distance_brute(points, mesh, chunk=512):
    """Reference implementation: exact minimum over every triangle."""
    tri = mesh.vertices[mesh.faces]
    out = np.empty(points.shape[0])
    for s in range(0, points.shape[0], chunk):
        pts = points[s : s + chunk]
        best = np.full(pts.shape[0], np.inf)
        for f in range(tri.shape[0]):
            d = point_triangle_distance(
                pts,
                np.broadcast_to(tri[f, 0], pts.shape),
                np.broadcast_to(tri[f, 1], pts.shape),
                np.broadcast_to(tri[f, 2], pts.shape),
            )
            best = np.minimum(best, d)
        out[s : s + chunk] = best
    return out


def point_mesh_distance(points, mesh, k_candidates=16):
    """Exact point-to-mesh distance via a centroid KD-tree with a radius
    guarantee: a triangle can only beat the best candidate if its centroid
    lies within best + max circumradius."""
    tri = mesh.vertices[mesh.faces]
    if tri.shape[0] == 0:
        raise ValueError("mesh has no faces")
    cent = tri.mean(axis=1)
    radius = np.linalg.norm(tri - cent[:, None, :], axis=2).max(axis=1)
    r_max = float(radius.max())
    tree = cKDTree(cent)

    k = min(k_candidates, tri.shape[0])
    cdist, cidx = tree.query(points, k=k)
    if k == 1:
        cdist, cidx = cdist[:, None], cidx[:, None]
    best = np.full(points.shape[0], np.inf)
    for j in range(k):
        f = cidx[:, j]
        d = point_triangle_distance(points, tri[f, 0], tri[f, 1], tri[f, 2])
        best = np.minimum(best, d)
    # points whose k-th centroid is not provably beyond every unseen triangle
    unsettled = cdist[:, -1] < best + r_max
    for i in np.flatnonzero(unsettled):
        cand = tree.query_ball_point(points[i], best[i] + r_max)
        if not cand:
            continue
        cand = np.asarray(cand)
        d = point_triangle_distance(
            np.broadcast_to(points[i], (cand.size, 3)),
            tri[cand, 0],
            tri[cand, 1],
            tri[cand, 2],
        )
        best[i] = min(best[i], float(d.min()))
    return best


@dataclass
class MeshMetrics:
    accuracy: float  # mean distance recon -> gt (m)
    completion: float  # mean distance gt -> recon (m)
    completion_ratio: float  # fraction of gt samples within threshold


def accuracy_completion(mesh, gt_mesh, threshold=0.05, n_samples=100_000, seed=0):
    """Bidirectional sampled surface distances plus the completion ratio."""
    if mesh.empty:
        raise ValueError("reconstructed mesh is empty; accuracy is undefined")
    if gt_mesh.empty:
        raise ValueError("ground-truth mesh is empty")
    p_rec = sample_mesh_points(mesh, n_samples, seed)
    p_gt = sample_mesh_points(gt_mesh, n_samples, seed + 1)
    acc = point_mesh_distance(p_rec, gt_mesh)
    comp = point_mesh_distance(p_gt, mesh)
    return MeshMetrics(
        float(acc.mean()), float(comp.mean()), float((comp < threshold).mean())
    )
