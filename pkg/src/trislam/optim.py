"""Adam parameter groups and the finite-difference gradient checker.

The gradient checker builds a self-contained 64-bit micro-problem (tiny
planes, 4 rays, 8 samples) and compares the analytic gradients of the
global loss against central differences for a random subset of parameters
across every group.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import SceneField
from .geometry import quat_from_axis_angle
from .losses import MAPPING_WEIGHTS
from .pipeline import PoseParams, loss_and_gradients
from .planes import FeaturePlaneSet

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class ParamGroup:
    """A named set of arrays optimized with one learning rate."""

    name: str
    params: list
    lr: float
    step_count: int = 0
    m: list = dc_field(default=None)
    v: list = dc_field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in self.params]
        if self.v is None:
            self.v = [np.zeros_like(p) for p in self.params]


def adam_step(group: ParamGroup, grads):
    """Standard bias-corrected Adam update, in place."""
    group.step_count += 1
    t = group.step_count
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for p, g, m, v in zip(group.params, grads, group.m, group.v):
        g = np.asarray(g, dtype=p.dtype)
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= group.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    rows: list  # (group, param index, analytic, numeric, rel err)
    max_rel_err: float
    mean_rel_err: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance

    def format_table(self, worst=12):
        lines = [
            f"{'group':<12} {'index':>7} {'analytic':>14} {'numeric':>14} {'rel err':>10}"
        ]
        for group, idx, a, n, r in sorted(self.rows, key=lambda r: -r[4])[:worst]:
            lines.append(f"{group:<12} {idx:>7d} {a:>14.6e} {n:>14.6e} {r:>10.2e}")
        lines.append(
            f"max rel err {self.max_rel_err:.3e}, mean {self.mean_rel_err:.3e}, "
            f"tolerance {self.tolerance:.1e}: {'PASS' if self.passed else 'FAIL'}"
        )
        return "\n".join(lines)


def build_micro_problem(seed=0, channels=2, n_rays=4, n_samples=8):
    """A tiny 64-bit scene plus one ray batch exercising every loss term."""
    rng = np.random.default_rng(np.random.Philox(key=seed))
    planes = FeaturePlaneSet(
        bounds_min=(0.0, 0.0, 0.0),
        bounds_max=(1.0, 1.0, 1.0),
        channels=channels,
        coarse_res=0.5,
        fine_geo_res=0.25,
        fine_app_res=0.25,
        dtype=np.float64,
    )
    planes.randomize(rng, -0.5, 0.5)
    field = SceneField.create(planes, rng, beta_init=8.0)

    poses = [
        PoseParams(
            quat_from_axis_angle(rng.normal(size=3), 0.15 * rng.standard_normal()),
            np.array([0.5, 0.5, 0.08]) + 0.03 * rng.standard_normal(3),
        )
        for _ in range(2)
    ]
    frame_idx = rng.integers(0, 2, size=n_rays)
    cam_dirs = np.concatenate(
        [0.25 * rng.standard_normal((n_rays, 2)), np.ones((n_rays, 1))], axis=1
    )
    trunc = 0.1
    depths = np.array([0.5, 0.45, 0.55] + [0.0] * (n_rays - 3))[:n_rays]
    z = np.sort(rng.uniform(0.05, 0.8, size=(n_rays, n_samples)), axis=1)
    # make sure the free-space / middle / tail partitions are all hit
    z[0, -3:] = [depths[0] - 0.07, depths[0] - 0.02, depths[0] + 0.05]
    z[0] = np.sort(z[0])
    colors = rng.uniform(0.2, 0.8, size=(n_rays, 3))
    return field, poses, frame_idx, cam_dirs, z, depths, colors, trunc


def _parameter_slots(field, poses):
    """(group name, array) pairs covering every optimizable scalar."""
    slots = []
    for name, arrays in field.scene_param_groups():
        for a in arrays:
            slots.append((name, a))
    for k, p in enumerate(poses):
        slots.append((f"pose{k}.q", p.q))
        slots.append((f"pose{k}.t", p.t))
    return slots


def gradcheck(seed=0, n_params=100, step=1e-5, tol=1e-3, loss_weights=MAPPING_WEIGHTS):
    """Compare analytic gradients to central finite differences.

    Samples parameters across all groups (planes, decoders, sharpness,
    poses), proportionally but with every group represented.
    """
    field, poses, frame_idx, cam_dirs, z, depths, colors, trunc = build_micro_problem(seed)

    def run(need_grads):
        return loss_and_gradients(
            field,
            poses,
            frame_idx,
            cam_dirs,
            z,
            depths,
            colors,
            loss_weights,
            trunc=trunc,
            need_field_grads=need_grads,
            need_pose_grads=need_grads,
        )

    breakdown, fgrads, pgrads, _ = run(True)
    analytic = {}
    for (name, arrays), garrays in zip(field.scene_param_groups(), fgrads.by_group()):
        for a, g in zip(arrays, garrays[1]):
            analytic[id(a)] = g
    for p, (gq, gt) in zip(poses, pgrads):
        analytic[id(p.q)] = gq
        analytic[id(p.t)] = gt

    slots = _parameter_slots(field, poses)
    rng = np.random.default_rng(np.random.Philox(key=seed + 7))
    # one draw per scalar, then thin to n_params while keeping group spread
    flat = [
        (name, arr, i) for name, arr in slots for i in range(arr.size)
    ]
    order = rng.permutation(len(flat))
    chosen = []
    per_group = {}
    for j in order:
        name, arr, i = flat[j]
        per_group.setdefault(name.split(".")[0], []).append((name, arr, i))
    groups = sorted(per_group)
    gi = 0
    while len(chosen) < min(n_params, len(flat)):
        bucket = per_group[groups[gi % len(groups)]]
        if bucket:
            chosen.append(bucket.pop(0))
        gi += 1

    rows = []
    for name, arr, i in chosen:
        orig = arr.flat[i]
        arr.flat[i] = orig + step
        lp = run(False)[0].total
        arr.flat[i] = orig - step
        lm = run(False)[0].total
        arr.flat[i] = orig
        numeric = (lp - lm) / (2 * step)
        a = float(analytic[id(arr)].flat[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        rows.append((name, int(i), a, float(numeric), float(rel)))

    errs = np.array([r[4] for r in rows])
    return GradcheckReport(rows, float(errs.max()), float(errs.mean()), tol)
