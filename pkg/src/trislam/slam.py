"""Mapping/tracking state machine.

Per input frame the current camera pose is optimized against the frozen
scene (tracking); every ``map_interval`` frames the scene parameters and
the poses of a keyframe window are optimized jointly (mapping) and the
frame joins the keyframe list. Frame 0 initializes the map with a frozen
pose. All randomness is keyed by (seed, frame, iteration), so runs are
bit-reproducible.
"""

import logging
import time
from dataclasses import dataclass

import numpy as np

from .field import SceneField, save_checkpoint
from .geometry import Pose, constant_velocity_extrapolate, quat_normalize, ray_box_intersection
from .optim import ParamGroup, adam_step
from .pipeline import (
    PoseParams,
    backward_batch,
    check_finite,
    compute_loss,
    forward_batch,
    loss_and_gradients,
    rays_from_poses,
    rays_vjp,
    slice_batch,
)
from .planes import FeaturePlaneSet
from .render import render_weights, sdf_to_density
from .sampling import sample_batch
from .util import StreamKeys, hash_u64

log = logging.getLogger(__name__)

OUTLIER_FACTOR = 10.0  # rays beyond this multiple of the median depth error drop out
MIN_SURVIVOR_FRACTION = 0.1


def lower_median(values):
    """Median as the lower middle order statistic (exact element for even n)."""
    values = np.asarray(values)
    return float(np.sort(values)[(values.size - 1) // 2])


@dataclass
class Keyframe:
    frame_id: int
    timestamp: float
    rgb_u8: np.ndarray  # (H, W, 3) uint8
    depth_raw: np.ndarray  # (H, W) uint16
    pose: PoseParams


def quantize_frame(frame, depth_scale):
    rgb_u8 = np.clip(np.round(frame.rgb * 255.0), 0, 255).astype(np.uint8)
    depth_raw = np.clip(np.round(frame.depth * depth_scale), 0, 65535).astype(np.uint16)
    return rgb_u8, depth_raw


def _philox(seed, *keys):
    k0 = int(hash_u64(seed, *keys, 0))
    k1 = int(hash_u64(seed, *keys, 1))
    return np.random.Generator(np.random.Philox(key=np.array([k0, k1], dtype=np.uint64)))


def select_pixels(seed, frame_id, iteration, purpose, n, depth_raw=None, require_depth=False):
    """Deterministic pixel draw (without replacement) for one iteration."""
    if require_depth:
        pool = np.flatnonzero(depth_raw.ravel() > 0)
    else:
        pool = np.arange(depth_raw.size)
    if pool.size == 0:
        return pool
    rng = _philox(seed, frame_id, iteration, purpose)
    take = min(n, pool.size)
    return np.sort(pool[rng.choice(pool.size, size=take, replace=False)])


def gather_pixels(rgb_u8, depth_raw, depth_scale, pixel_ids, intrinsics):
    h, w = depth_raw.shape
    v, u = np.divmod(pixel_ids, w)
    colors = rgb_u8[v, u].astype(np.float64) / 255.0
    depths = depth_raw[v, u].astype(np.float64) / depth_scale
    pixels = np.stack([u, v], axis=1).astype(np.float64)
    return pixels, colors, depths


@dataclass
class IterationStats:
    breakdown: object
    n_rays: int
    n_masked: int


class SlamSystem:
    def __init__(self, config, loss_hook=None):
        self.config = config
        self.intrinsics = config.intrinsics()
        lo, hi = config.bounds()
        planes = FeaturePlaneSet(
            lo,
            hi,
            channels=config.channels,
            coarse_res=config.coarse_resolution,
            fine_geo_res=config.fine_geometry_resolution,
            fine_app_res=config.fine_appearance_resolution,
            shared_planes=config.shared_planes,
            coarse_only=config.coarse_only,
            fine_only=config.fine_only,
            combine=config.combine,
            dtype=config.np_dtype(),
        )
        rng = _philox(config.seed, 0, 0, 99)
        planes.randomize(rng)
        self.field = SceneField.create(planes, rng, beta_init=config.beta_init)
        self.keyframes: list[Keyframe] = []
        self.estimates: list[Pose] = []
        self.timestamps: list[float] = []
        self.loss_hook = loss_hook  # callable(frame, phase, iteration, breakdown)

    # -- shared ray machinery ------------------------------------------------

    def _intersect(self, poses, frame_idx, cam_dirs):
        origins, plan = rays_from_poses(poses, frame_idx, cam_dirs)
        near, far, hit = ray_box_intersection(
            origins, plan, self.field.planes.bounds_min, self.field.planes.bounds_max
        )
        # keep samples strictly inside the box
        pad = 1e-6
        return origins, plan, near + pad, np.maximum(far - pad, near + pad), hit

    def _coarse_weights_fn(self, origins, plan):
        field = self.field

        def fn(z_strat, ray_indices):
            o = origins[ray_indices][:, None, :]
            d = plan[ray_indices][:, None, :]
            pts = (o + z_strat[..., None] * d).reshape(-1, 3)
            phi = field.decode_geometry(np.ascontiguousarray(pts, dtype=field.dtype))
            w, _ = render_weights(sdf_to_density(phi.reshape(z_strat.shape), field.beta))
            return w

        return fn

    # -- tracking --------------------------------------------------------------

    def tracking_iteration(self, pose_params, frame_id, rgb_u8, depth_raw, pixel_ids, iteration):
        """One tracking step: returns ((gq, gt), IterationStats) or None.

        Rays without depth are excluded by construction (pixel selection);
        rays whose rendered-depth error exceeds OUTLIER_FACTOR times the
        batch lower-median error are removed from the batch entirely before
        the loss and gradients are taken, so a masked ray contributes
        nothing (bitwise identical to a batch never containing it).
        """
        cfg = self.config
        pixels, colors, depths = gather_pixels(
            rgb_u8, depth_raw, cfg.depth_scale, pixel_ids, self.intrinsics
        )
        cam_dirs = self.intrinsics.cam_dirs(pixels)
        origins, plan, near, far, hit = self._intersect(
            [pose_params], np.zeros(len(pixels), dtype=np.int64), cam_dirs
        )
        if not hit.any():
            return None
        pixel_ids, cam_dirs, colors, depths = (
            pixel_ids[hit],
            cam_dirs[hit],
            colors[hit],
            depths[hit],
        )
        origins, plan, near, far = origins[hit], plan[hit], near[hit], far[hit]

        z = sample_batch(
            near,
            far,
            depths,
            cfg.truncation,
            cfg.n_stratified,
            cfg.n_importance,
            seed=cfg.seed,
            frame_ids=frame_id,
            pixel_ids=pixel_ids,
            salt=iteration,
            stratified_only=cfg.stratified_only,
        )
        ev = forward_batch(self.field, origins, plan, z, with_color=not cfg.no_color)
        err = np.abs(ev.rendered_depth - depths)
        med = lower_median(err)
        mask = err <= OUTLIER_FACTOR * med
        n_masked = int((~mask).sum())
        if mask.sum() < max(1, MIN_SURVIVOR_FRACTION * mask.size):
            log.warning(
                "frame %d iter %d: %d/%d rays survive outlier masking; using full batch",
                frame_id,
                iteration,
                int(mask.sum()),
                mask.size,
            )
            mask = np.ones_like(mask)
            n_masked = 0
        if n_masked:
            ev = slice_batch(ev, mask)

        breakdown = compute_loss(
            ev,
            depths[mask],
            colors[mask],
            cfg.tracking_weights(),
            trunc=cfg.truncation,
            merged_truncation=cfg.merged_truncation,
            strict_ray_average=cfg.strict_ray_average,
        )
        g_origins, g_plan = backward_batch(self.field, ev, need_point_grads=True)
        pose_grads = rays_vjp(
            [pose_params],
            np.zeros(int(mask.sum()), dtype=np.int64),
            cam_dirs[mask],
            g_origins,
            g_plan,
        )
        return pose_grads[0], IterationStats(breakdown, int(mask.sum()), n_masked)

    def track(self, frame):
        cfg = self.config
        if len(self.estimates) >= 2:
            seed_pose = constant_velocity_extrapolate(self.estimates[-1], self.estimates[-2])
        else:
            seed_pose = self.estimates[-1].copy()
        pose_params = PoseParams.from_pose(seed_pose)
        rot = ParamGroup("rotation", [pose_params.q], cfg.lr_rotation)
        trans = ParamGroup("translation", [pose_params.t], cfg.lr_translation)
        rgb_u8, depth_raw = quantize_frame(frame, cfg.depth_scale)

        for it in range(cfg.track_iterations):
            pixel_ids = select_pixels(
                cfg.seed,
                frame.index,
                it,
                StreamKeys.PIXELS,
                cfg.track_rays,
                depth_raw,
                require_depth=True,
            )
            if pixel_ids.size == 0:
                log.warning("frame %d: no valid-depth pixels to track against", frame.index)
                break
            out = self.tracking_iteration(pose_params, frame.index, rgb_u8, depth_raw, pixel_ids, it)
            if out is None:
                log.warning("frame %d iter %d: all rays missed the scene box", frame.index, it)
                continue
            (gq, gt), stats = out
            check_finite([("pose", [gq, gt])])
            adam_step(rot, [gq])
            adam_step(trans, [gt])
            pose_params.q[:] = quat_normalize(pose_params.q)
            if self.loss_hook:
                self.loss_hook(frame.index, "track", it, stats.breakdown)
        return pose_params

    # -- mapping ---------------------------------------------------------------

    def select_window(self, frame_id):
        """Current frame + previous two keyframes + W-3 random keyframes."""
        w = self.config.window
        recent = self.keyframes[-2:][::-1]  # newest first
        pool = self.keyframes[: max(0, len(self.keyframes) - 2)]
        n_rand = max(0, w - 1 - len(recent))
        chosen = []
        if pool and n_rand:
            rng = _philox(self.config.seed, frame_id, StreamKeys.WINDOW_SELECT)
            take = min(n_rand, len(pool))
            idx = np.sort(rng.choice(len(pool), size=take, replace=False))
            chosen = [pool[i] for i in idx]
        return recent + chosen

    def map_update(self, frame, pose_params, iterations=None, freeze_current=False):
        cfg = self.config
        rgb_u8, depth_raw = quantize_frame(frame, cfg.depth_scale)
        window_kfs = self.select_window(frame.index)
        # entry: (frame id, rgb, depth, pose params, optimizable)
        entries = [(frame.index, rgb_u8, depth_raw, pose_params, not freeze_current)]
        for kf in window_kfs:
            entries.append((kf.frame_id, kf.rgb_u8, kf.depth_raw, kf.pose, kf.frame_id != 0))
        if cfg.freeze_map_poses:
            entries = [(fid, c, d, p, False) for fid, c, d, p, _ in entries]

        groups = [
            ParamGroup("planes", self.field.planes.arrays, cfg.lr_planes),
            ParamGroup(
                "decoders",
                self.field.decoder_g.params + self.field.decoder_a.params,
                cfg.lr_decoders,
            ),
            ParamGroup("sharpness", [self.field.log_beta], cfg.lr_sharpness),
        ]
        free_pose_params = [p for _, _, _, p, opt in entries if opt]
        pose_group = None
        if free_pose_params:
            arrays = [a for p in free_pose_params for a in (p.q, p.t)]
            pose_group = ParamGroup("window_poses", arrays, cfg.lr_map_pose)

        n_iters = cfg.map_iterations if iterations is None else iterations
        n_frames = len(entries)
        base, rem = divmod(cfg.map_rays, n_frames)
        quota = [base + (1 if i < rem else 0) for i in range(n_frames)]

        poses = [e[3] for e in entries]
        for it in range(n_iters):
            frame_idx_chunks, ids_chunks, pix_chunks = [], [], []
            col_chunks, dep_chunks = [], []
            for slot, (fid, rgb, draw, _, _) in enumerate(entries):
                pix = select_pixels(
                    cfg.seed, fid, it, StreamKeys.PIXELS, quota[slot], draw, require_depth=False
                )
                pixels, colors, depths = gather_pixels(
                    rgb, draw, cfg.depth_scale, pix, self.intrinsics
                )
                pix_chunks.append(pixels)
                col_chunks.append(colors)
                dep_chunks.append(depths)
                ids_chunks.append(np.stack([np.full(pix.size, fid), pix], axis=1))
                frame_idx_chunks.append(np.full(pix.size, slot, dtype=np.int64))
            frame_idx = np.concatenate(frame_idx_chunks)
            ids = np.concatenate(ids_chunks)
            cam_dirs = self.intrinsics.cam_dirs(np.concatenate(pix_chunks))
            colors = np.concatenate(col_chunks)
            depths = np.concatenate(dep_chunks)

            origins, plan, near, far, hit = self._intersect(poses, frame_idx, cam_dirs)
            if not hit.any():
                log.warning("frame %d map iter %d: all rays missed the scene box", frame.index, it)
                continue
            frame_idx, cam_dirs, colors, depths = (
                frame_idx[hit],
                cam_dirs[hit],
                colors[hit],
                depths[hit],
            )
            ids, origins, plan, near, far = ids[hit], origins[hit], plan[hit], near[hit], far[hit]

            z = sample_batch(
                near,
                far,
                depths,
                cfg.truncation,
                cfg.n_stratified,
                cfg.n_importance,
                seed=cfg.seed,
                frame_ids=ids[:, 0],
                pixel_ids=ids[:, 1],
                salt=it,
                coarse_weights_fn=self._coarse_weights_fn(origins, plan)
                if (depths <= 0).any()
                else None,
                stratified_only=cfg.stratified_only,
            )
            breakdown, fgrads, pgrads, _ = loss_and_gradients(
                self.field,
                poses,
                frame_idx,
                cam_dirs,
                z,
                depths,
                colors,
                cfg.mapping_weights(),
                trunc=cfg.truncation,
                with_color=not cfg.no_color,
                merged_truncation=cfg.merged_truncation,
                strict_ray_average=cfg.strict_ray_average,
                need_field_grads=True,
                need_pose_grads=pose_group is not None,
            )
            check_finite(fgrads.by_group())
            for group, (_, grads) in zip(groups, fgrads.by_group()):
                adam_step(group, grads)
            if pose_group is not None:
                pgrad_arrays = []
                for (fid, _, _, p, opt), (gq, gt) in zip(entries, pgrads):
                    if opt:
                        pgrad_arrays.extend([gq, gt])
                check_finite([("window_poses", pgrad_arrays)])
                adam_step(pose_group, pgrad_arrays)
                for p in free_pose_params:
                    p.q[:] = quat_normalize(p.q)
            if self.loss_hook:
                self.loss_hook(frame.index, "map", it, breakdown)

        self.keyframes.append(
            Keyframe(frame.index, frame.timestamp, rgb_u8, depth_raw, pose_params)
        )

    # -- lifecycle ---------------------------------------------------------------

    def initialize_first_frame(self, frame):
        cfg = self.config
        if not (frame.depth > 0).any():
            raise RuntimeError("first frame has no valid depth pixels")
        if cfg.first_pose == "groundtruth" and frame.gt_pose is not None:
            pose = frame.gt_pose
        else:
            pose = Pose.identity()
        pose_params = PoseParams.from_pose(pose)
        iters = cfg.first_frame_iterations or cfg.map_iterations
        self.map_update(frame, pose_params, iterations=iters, freeze_current=True)
        return pose_params

    def process_frame(self, frame):
        cfg = self.config
        if frame.index == 0:
            pose_params = self.initialize_first_frame(frame)
        else:
            pose_params = self.track(frame)
            if frame.index % cfg.map_interval == 0:
                self.map_update(frame, pose_params)
        self.estimates.append(pose_params.to_pose())
        self.timestamps.append(frame.timestamp)
        return self.estimates[-1]

    def run(self, frames, trajectory_path=None, timing_hook=None):
        """Process a frame stream; streams trajectory rows as frames finish."""
        from .datasets import write_trajectory_row

        traj_fh = open(trajectory_path, "w") if trajectory_path else None
        try:
            for i, frame in enumerate(frames):
                if frame.index != i:
                    raise RuntimeError(f"frame stream out of order at {frame.index} (expected {i})")
                t0 = time.perf_counter()
                pose = self.process_frame(frame)
                dt = time.perf_counter() - t0
                if timing_hook:
                    timing_hook(frame.index, dt)
                if traj_fh:
                    write_trajectory_row(traj_fh, frame.timestamp, pose)
                    traj_fh.flush()
        finally:
            if traj_fh:
                traj_fh.close()
        return self.estimates

    def save(self, path):
        save_checkpoint(
            path,
            self.field,
            [
                (kf.frame_id, kf.timestamp, kf.pose.q.copy(), kf.pose.t.copy())
                for kf in self.keyframes
            ],
        )
