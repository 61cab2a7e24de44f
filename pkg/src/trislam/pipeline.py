"""Reverse-mode gradients through pose -> points -> decode -> render -> loss.

The computation graph is fixed, so the backward pass is written out
stage-by-stage instead of going through a tape. Sample depths are treated
as constants once drawn; pose gradients flow through ray origins and
directions, parameter gradients through the planes, decoders and the
density sharpness.

Outlier rejection works by slicing the forward cache down to surviving
rays before the loss/backward stages: the kept rows are the identical
floats the smaller batch would produce, so masking a ray is bitwise
equivalent to never having drawn it.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .field import DecodeCache
from .geometry import quat_rotate, quat_rotate_vjp
from .losses import global_loss
from .render import sdf_to_density, sdf_to_density_vjp


class NonFiniteGradientError(RuntimeError):
    """A parameter group received a NaN/inf gradient."""

    def __init__(self, group):
        super().__init__(f"non-finite gradient in parameter group '{group}'")
        self.group = group


@dataclass
class PoseParams:
    """Optimizable camera-to-world pose: raw quaternion + translation."""

    q: np.ndarray  # (4,) float64
    t: np.ndarray  # (3,) float64

    @staticmethod
    def from_pose(pose):
        return PoseParams(np.asarray(pose.q, dtype=np.float64).copy(),
                          np.asarray(pose.t, dtype=np.float64).copy())

    def to_pose(self):
        from .geometry import Pose

        return Pose(self.q.copy(), self.t.copy())

    def copy(self):
        return PoseParams(self.q.copy(), self.t.copy())


def rays_from_poses(poses, frame_idx, cam_dirs):
    """Ray origins and planar-depth directions for a mixed-frame batch.

    poses: list of PoseParams; frame_idx: (M,) index into poses; cam_dirs:
    (M, 3) camera-frame directions with unit z.
    """
    origins = np.empty((cam_dirs.shape[0], 3))
    plan = np.empty_like(origins)
    for k, pose in enumerate(poses):
        sel = frame_idx == k
        if not sel.any():
            continue
        plan[sel] = quat_rotate(pose.q, cam_dirs[sel])
        origins[sel] = pose.t
    return origins, plan


def rays_vjp(poses, frame_idx, cam_dirs, g_origins, g_plan):
    """Per-pose gradients [(gq, gt), ...] from ray-level gradients."""
    out = []
    for k, pose in enumerate(poses):
        sel = frame_idx == k
        if not sel.any():
            out.append((np.zeros(4), np.zeros(3)))
            continue
        gq = quat_rotate_vjp(pose.q, cam_dirs[sel], g_plan[sel])
        gt = g_origins[sel].sum(axis=0)
        out.append((gq, gt))
    return out


@dataclass
class BatchEval:
    """Forward results of one ray batch (kept for the backward pass)."""

    z: np.ndarray
    phi: np.ndarray
    raw_color: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray
    trans: np.ndarray
    rendered_depth: np.ndarray
    rendered_color: np.ndarray
    decode_cache: DecodeCache
    breakdown: object = None
    loss_grads: tuple = None


def forward_batch(field, origins, plan, z, *, with_color=True):
    """Decode and render rays with precomputed sample depths ``z`` (M, N)."""
    m, n = z.shape
    points = origins[:, None, :] + z[..., None] * plan[:, None, :]
    pts = np.ascontiguousarray(points.reshape(-1, 3), dtype=field.dtype)
    cache = DecodeCache(points=pts)
    phi = field.decode_geometry(pts, cache).reshape(m, n)
    raw = None
    if with_color:
        raw = field.decode_color(pts, cache).reshape(m, n, 3)
    sigma = sdf_to_density(phi, field.beta)
    weights, trans = kernels.composite_fwd(np.ascontiguousarray(sigma))
    rendered_depth = np.einsum("mn,mn->m", weights, z.astype(weights.dtype)).astype(np.float64)
    rendered_color = None
    if with_color:
        rendered_color = np.einsum("mn,mnc->mc", weights, raw).astype(np.float64)
    return BatchEval(
        z=z,
        phi=phi,
        raw_color=raw,
        sigma=sigma,
        weights=weights,
        trans=trans,
        rendered_depth=rendered_depth,
        rendered_color=rendered_color,
        decode_cache=cache,
    )


def slice_batch(ev: BatchEval, keep):
    """Restrict a forward evaluation to the rays selected by ``keep``.

    Row-slicing cached arrays reproduces exactly the floats a fresh forward
    pass over only those rays would compute.
    """
    m, n = ev.z.shape
    keep = np.asarray(keep)

    def rows(a):
        return None if a is None else np.ascontiguousarray(a[keep])

    def flat(a, trailing):
        if a is None:
            return None
        return np.ascontiguousarray(a.reshape((m, n) + trailing)[keep].reshape((-1,) + trailing))

    dc = ev.decode_cache
    cache = DecodeCache(points=flat(dc.points, (3,)))
    cache.plane_cache_g = [(i, flat(u, ()), flat(v, ())) for i, u, v in dc.plane_cache_g]
    cache.plane_cache_a = [(i, flat(u, ()), flat(v, ())) for i, u, v in dc.plane_cache_a]
    cache.feat_g = flat(dc.feat_g, (dc.feat_g.shape[-1],)) if dc.feat_g is not None else None
    cache.feat_a = flat(dc.feat_a, (dc.feat_a.shape[-1],)) if dc.feat_a is not None else None
    cache.hidden_g = flat(dc.hidden_g, (dc.hidden_g.shape[-1],)) if dc.hidden_g is not None else None
    cache.hidden_a = flat(dc.hidden_a, (dc.hidden_a.shape[-1],)) if dc.hidden_a is not None else None
    cache.tsdf = flat(dc.tsdf, ())
    cache.color = flat(dc.color, (3,)) if dc.color is not None else None
    return BatchEval(
        z=rows(ev.z),
        phi=rows(ev.phi),
        raw_color=rows(ev.raw_color),
        sigma=rows(ev.sigma),
        weights=rows(ev.weights),
        trans=rows(ev.trans),
        rendered_depth=rows(ev.rendered_depth),
        rendered_color=rows(ev.rendered_color),
        decode_cache=cache,
    )


def compute_loss(
    ev: BatchEval,
    depths,
    colors,
    loss_weights,
    *,
    trunc,
    merged_truncation=False,
    strict_ray_average=False,
):
    """Attach the global loss and its output-level gradients to ``ev``."""
    breakdown, loss_grads = global_loss(
        ev.phi.astype(np.float64),
        ev.z,
        depths,
        ev.rendered_depth,
        ev.rendered_color,
        colors,
        trunc,
        loss_weights,
        merged_truncation=merged_truncation,
        strict_ray_average=strict_ray_average,
    )
    ev.breakdown = breakdown
    ev.loss_grads = loss_grads
    return breakdown


def backward_batch(field, ev: BatchEval, *, field_grads=None, need_point_grads=False):
    """Propagate the loss gradients of ``ev`` back to parameters.

    Accumulates into ``field_grads`` (FieldGrads) when given. When
    ``need_point_grads``, returns (g_origins (M,3), g_plan (M,3)) in float64,
    else (None, None).
    """
    gphi_direct, gdepth, gcolor = ev.loss_grads
    m, n = ev.z.shape
    dt = ev.sigma.dtype

    # rendering backward: d loss / d weights, then d / d sigma
    gw = (gdepth[:, None] * ev.z).astype(dt)
    graw = None
    if gcolor is not None:
        gw += np.einsum("mc,mnc->mn", gcolor, ev.raw_color).astype(dt)
        graw = (gcolor[:, None, :] * ev.weights[..., None]).astype(dt)
    gsigma = kernels.composite_vjp(ev.sigma, ev.weights, ev.trans, np.ascontiguousarray(gw))

    # density backward
    beta = field.beta
    gphi_render, gbeta = sdf_to_density_vjp(ev.phi, beta, ev.sigma, gsigma)
    gphi = (gphi_direct + gphi_render).astype(dt)
    if field_grads is not None:
        field_grads.log_beta += gbeta * beta

    gpoints = None
    if need_point_grads:
        gpoints = np.zeros((m * n, 3), dtype=field.dtype)
    field.decode_vjp(
        ev.decode_cache,
        gphi.reshape(-1),
        None if graw is None else graw.reshape(-1, 3),
        grads=field_grads,
        gpoints=gpoints,
    )
    if not need_point_grads:
        return None, None
    gpoints = gpoints.reshape(m, n, 3).astype(np.float64)
    g_origins = gpoints.sum(axis=1)
    g_plan = np.einsum("mn,mnk->mk", ev.z, gpoints)
    return g_origins, g_plan


def loss_and_gradients(
    field,
    poses,
    frame_idx,
    cam_dirs,
    z,
    depths,
    colors,
    loss_weights,
    *,
    trunc,
    with_color=True,
    merged_truncation=False,
    strict_ray_average=False,
    need_field_grads=True,
    need_pose_grads=True,
):
    """One full differentiable evaluation of a ray batch.

    Returns (breakdown, field_grads or None, pose_grads or None, ev).
    """
    origins, plan = rays_from_poses(poses, frame_idx, cam_dirs)
    ev = forward_batch(field, origins, plan, z, with_color=with_color)
    compute_loss(
        ev,
        depths,
        colors,
        loss_weights,
        trunc=trunc,
        merged_truncation=merged_truncation,
        strict_ray_average=strict_ray_average,
    )
    if not need_field_grads and not need_pose_grads:
        return ev.breakdown, None, None, ev
    field_grads = field.zero_grads() if need_field_grads else None
    g_origins, g_plan = backward_batch(
        field, ev, field_grads=field_grads, need_point_grads=need_pose_grads
    )
    pose_grads = None
    if need_pose_grads:
        pose_grads = rays_vjp(poses, frame_idx, cam_dirs, g_origins, g_plan)
    return ev.breakdown, field_grads, pose_grads, ev


def check_finite(named_grad_lists):
    """Raise NonFiniteGradientError naming the first offending group."""
    for name, arrays in named_grad_lists:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NonFiniteGradientError(name)
