"""Multi-scale axis-aligned feature planes.

The scene map is a set of 2D feature grids: {coarse, fine} x {geometry,
appearance} x {xy, xz, yz}. A 3D point is projected onto each plane of a
group, the four nearest grid features are blended bilinearly, the three
plane results of a scale are summed, and the per-scale results are
concatenated (or summed, as a config switch).

Grids are node-centered: node (i, j) of an xy plane sits at
bounds_min + (i * res, j * res); plane shape is ceil(extent / res) + 1
per axis, so total parameter count grows quadratically with scene
side-length.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels

PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}
# one cell of clamp slack at the border; farther out is an error
EDGE_SLACK_CELLS = 1.0


class OutOfBoundsError(ValueError):
    """A query point escaped the configured scene box by more than one cell."""


@dataclass(frozen=True)
class PlaneSpec:
    name: str  # e.g. "geometry/coarse/xy"
    axes: tuple  # world axes mapped to (rows, cols)
    resolution: float
    shape: tuple  # (H, W)


def plane_shape(bounds_min, bounds_max, axes, resolution):
    extents = np.asarray(bounds_max, dtype=np.float64) - np.asarray(bounds_min, dtype=np.float64)
    h = int(np.ceil(extents[axes[0]] / resolution)) + 1
    w = int(np.ceil(extents[axes[1]] / resolution)) + 1
    return max(h, 2), max(w, 2)


def interpolate_plane(plane, uv):
    """Bilinearly interpolate ``plane`` (H, W, C) at grid coordinates ``uv``.

    uv is (N, 2) in grid units (node spacing 1). Points may exceed the grid
    by at most EDGE_SLACK_CELLS (clamped); farther out raises.
    """
    uv = np.atleast_2d(uv)
    h, w = plane.shape[0], plane.shape[1]
    bad = (
        (uv[:, 0] < -EDGE_SLACK_CELLS)
        | (uv[:, 0] > h - 1 + EDGE_SLACK_CELLS)
        | (uv[:, 1] < -EDGE_SLACK_CELLS)
        | (uv[:, 1] > w - 1 + EDGE_SLACK_CELLS)
    )
    if bad.any():
        k = int(np.argmax(bad))
        raise OutOfBoundsError(
            f"{int(bad.sum())} point(s) outside plane grid by more than one cell, "
            f"first uv=({uv[k, 0]:.3f}, {uv[k, 1]:.3f}) vs grid {h}x{w}"
        )
    u = np.ascontiguousarray(uv[:, 0], dtype=plane.dtype)
    v = np.ascontiguousarray(uv[:, 1], dtype=plane.dtype)
    return kernels.bilerp_gather(plane, u, v)


class FeaturePlaneSet:
    """Feature grids for one scene, plus projection/interpolation logic.

    Parameters
    ----------
    bounds_min, bounds_max : (3,) scene box in meters
    channels : features per plane
    coarse_res, fine_geo_res, fine_app_res : node spacings in meters
    shared_planes : appearance aliases the geometry grids
    coarse_only / fine_only : drop one scale
    combine : "concat" (default) or "sum" of the per-scale features
    """

    def __init__(
        self,
        bounds_min,
        bounds_max,
        channels=32,
        coarse_res=0.24,
        fine_geo_res=0.06,
        fine_app_res=0.03,
        shared_planes=False,
        coarse_only=False,
        fine_only=False,
        combine="concat",
        dtype=np.float32,
    ):
        if coarse_only and fine_only:
            raise ValueError("coarse_only and fine_only are mutually exclusive")
        if combine not in ("concat", "sum"):
            raise ValueError("combine must be 'concat' or 'sum'")
        self.bounds_min = np.asarray(bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(bounds_max, dtype=np.float64)
        if not np.all(self.bounds_max > self.bounds_min):
            raise ValueError("bounds_max must exceed bounds_min on every axis")
        self.channels = int(channels)
        self.shared_planes = bool(shared_planes)
        self.combine = combine
        self.dtype = np.dtype(dtype)
        self.resolutions = {
            "coarse": float(coarse_res),
            "fine_geometry": float(fine_geo_res),
            "fine_appearance": float(fine_app_res),
        }

        self.scales = [s for s, on in (("coarse", not fine_only), ("fine", not coarse_only)) if on]
        self.specs = []
        self.arrays = []
        # group -> (kind, scale) -> list of plane indices into arrays
        self.groups = {"geometry": {}, "appearance": {}}
        for kind in ("geometry", "appearance"):
            if self.shared_planes and kind == "appearance":
                self.groups["appearance"] = self.groups["geometry"]
                break
            for scale in self.scales:
                res = self.resolutions["coarse" if scale == "coarse" else f"fine_{kind}"]
                idxs = []
                for pname, axes in PLANE_AXES.items():
                    shape = plane_shape(self.bounds_min, self.bounds_max, axes, res)
                    self.specs.append(
                        PlaneSpec(f"{kind}/{scale}/{pname}", axes, res, shape)
                    )
                    self.arrays.append(np.zeros(shape + (self.channels,), dtype=self.dtype))
                    idxs.append(len(self.arrays) - 1)
                self.groups[kind][scale] = idxs

    # -- shape bookkeeping ---------------------------------------------------

    @property
    def feature_dim(self):
        if self.combine == "sum":
            return self.channels
        return self.channels * len(self.scales)

    def parameter_count(self):
        return int(sum(a.size for a in self.arrays))

    def randomize(self, rng, low=-1e-2, high=1e-2):
        for a in self.arrays:
            a[...] = rng.uniform(low, high, size=a.shape).astype(self.dtype)

    # -- lookup ----------------------------------------------------------------

    def plane_coords(self, points, plane_idx):
        spec = self.specs[plane_idx]
        a0, a1 = spec.axes
        dt = points.dtype.type if points.dtype.kind == "f" else np.float64
        u = (points[:, a0] - dt(self.bounds_min[a0])) / dt(spec.resolution)
        v = (points[:, a1] - dt(self.bounds_min[a1])) / dt(spec.resolution)
        return u, v

    def check_in_bounds(self, points):
        """Raise if any point leaves the box by more than one coarsest cell."""
        slack = EDGE_SLACK_CELLS * max(self.resolutions.values())
        bad = (points < self.bounds_min - slack).any(axis=1) | (
            points > self.bounds_max + slack
        ).any(axis=1)
        if bad.any():
            k = int(np.argmax(bad))
            raise OutOfBoundsError(
                f"{int(bad.sum())} point(s) outside scene bounds by more than one cell, "
                f"first p={points[k]}"
            )

    def feature(self, points, kind, cache=None):
        """Summed-then-combined feature for ``points`` (N, 3).

        When ``cache`` is a list, per-plane grid coordinates are appended for
        the backward pass.
        """
        self.check_in_bounds(points)
        per_scale = []
        for scale in self.scales:
            acc = None
            for idx in self.groups[kind][scale]:
                u, v = self.plane_coords(points, idx)
                u = np.ascontiguousarray(u, dtype=self.dtype)
                v = np.ascontiguousarray(v, dtype=self.dtype)
                f = kernels.bilerp_gather(self.arrays[idx], u, v)
                acc = f if acc is None else acc + f
                if cache is not None:
                    cache.append((idx, u, v))
            per_scale.append(acc)
        if self.combine == "sum" and len(per_scale) > 1:
            return per_scale[0] + per_scale[1]
        return np.concatenate(per_scale, axis=1) if len(per_scale) > 1 else per_scale[0]

    def feature_vjp(self, cache, gfeat, gplanes=None, gpoints=None):
        """Backward of :meth:`feature`.

        gplanes: list parallel to ``arrays`` to accumulate into (or None).
        gpoints: (N, 3) array to accumulate point gradients into (or None).
        """
        n_scales = len(self.scales)
        it = iter(cache)
        for s, scale in enumerate(self.scales):
            if self.combine == "sum" or n_scales == 1:
                g = gfeat
            else:
                g = gfeat[:, s * self.channels : (s + 1) * self.channels]
            g = np.ascontiguousarray(g)
            for _ in range(3):  # xy, xz, yz
                idx, u, v = next(it)
                spec = self.specs[idx]
                gp = None if gplanes is None else gplanes[idx]
                out = kernels.bilerp_vjp(
                    self.arrays[idx], u, v, g, gp, need_uv=gpoints is not None
                )
                if gpoints is not None:
                    gu, gv = out
                    a0, a1 = spec.axes
                    gpoints[:, a0] += gu / spec.resolution
                    gpoints[:, a1] += gv / spec.resolution

    def zero_grads(self):
        return [np.zeros_like(a) for a in self.arrays]
