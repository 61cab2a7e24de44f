"""The five loss terms over a ray batch and their weighted sum.

Free-space and truncation terms supervise the TSDF per sample point using
the measured depth; depth and color terms supervise the rendered values.
Ray averages run over contributing rays by default (rays whose point set
for a term is empty are dropped from that term's denominator); the strict
variant divides by all depth-carrying rays instead.
"""

from dataclasses import dataclass

import numpy as np

# truncation band fraction treated as "middle" (closest to the surface)
MIDDLE_BAND = 0.4


@dataclass(frozen=True)
class LossWeights:
    fs: float
    t_m: float
    t_t: float
    d: float
    c: float

    def as_dict(self):
        return {"fs": self.fs, "t_m": self.t_m, "t_t": self.t_t, "d": self.d, "c": self.c}


MAPPING_WEIGHTS = LossWeights(fs=5.0, t_m=200.0, t_t=10.0, d=0.1, c=5.0)
TRACKING_WEIGHTS = LossWeights(fs=10.0, t_m=200.0, t_t=50.0, d=1.0, c=5.0)


def partition_masks(z, depth, trunc, merged=False):
    """Boolean masks (fs, middle, tail) of shape (M, N).

    fs: z < D - T; middle: |z - D| < MIDDLE_BAND * T; tail: truncation band
    minus middle. Rays without a depth measurement get all-False rows.
    When ``merged``, the whole truncation band is reported as middle.
    """
    d = depth[:, None]
    valid = d > 0
    err = z - d
    fs = (err < -trunc) & valid
    band = (np.abs(err) < trunc) & valid
    if merged:
        return fs, band, np.zeros_like(band)
    middle = (np.abs(err) < MIDDLE_BAND * trunc) & valid
    return fs, middle, band & ~middle


def _ray_mean(values, mask, strict_count=None):
    """Mean over rays of the per-ray mean of masked values.

    Returns (loss, coeff) where coeff (M, N) is d loss / d values.
    """
    cnt = mask.sum(axis=1)
    has = cnt > 0
    denom = int(strict_count) if strict_count is not None else int(has.sum())
    coeff = np.zeros(values.shape)
    if denom == 0:
        return 0.0, coeff
    inv = np.zeros(cnt.shape)
    inv[has] = 1.0 / (cnt[has] * denom)
    coeff[mask] = np.broadcast_to(inv[:, None], values.shape)[mask]
    return float(np.sum(values * coeff)), coeff


def free_space_loss(phi, fs_mask, strict_count=None):
    """Mean squared deviation of the TSDF from +1 in observed free space."""
    loss, coeff = _ray_mean((phi - 1.0) ** 2, fs_mask, strict_count)
    return loss, coeff


def truncation_loss(phi, z, depth, trunc, region_mask, strict_count=None):
    """Per-point SDF supervision (z + phi*T - D)^2 over a truncation region."""
    resid = z + phi * trunc - depth[:, None]
    loss, coeff = _ray_mean(resid**2, region_mask, strict_count)
    return loss, coeff


def depth_loss(rendered_depth, depth):
    """Mean squared rendered-vs-measured depth over rays with measurements."""
    valid = depth > 0
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(rendered_depth)
    resid = np.where(valid, rendered_depth - depth, 0.0)
    gd = 2.0 * resid / n
    return float(np.sum(resid**2) / n), gd


def color_loss(rendered_color, colors):
    """Mean squared color residual over all rays, averaged per channel."""
    m = rendered_color.shape[0]
    if m == 0:
        return 0.0, np.zeros_like(rendered_color)
    resid = rendered_color - colors
    return float(np.sum(resid**2) / (3 * m)), 2.0 * resid / (3 * m)


@dataclass
class LossBreakdown:
    fs: float
    t_m: float
    t_t: float
    d: float
    c: float
    total: float

    def as_dict(self):
        return {
            "fs": self.fs,
            "t_m": self.t_m,
            "t_t": self.t_t,
            "d": self.d,
            "c": self.c,
            "total": self.total,
        }


def global_loss(
    phi,
    z,
    depth,
    rendered_depth,
    rendered_color,
    colors,
    trunc,
    weights: LossWeights,
    *,
    merged_truncation=False,
    strict_ray_average=False,
):
    """Weighted sum of the five terms.

    Returns (breakdown, grads) where grads = (gphi (M,N), gdepth (M,),
    gcolor (M,3) or None) are gradients of the total w.r.t. the TSDF
    samples and the rendered outputs.
    """
    fs_mask, tm_mask, tt_mask = partition_masks(z, depth, trunc, merged_truncation)
    strict = int(np.sum(depth > 0)) if strict_ray_average else None

    l_fs, c_fs = free_space_loss(phi, fs_mask, strict)
    l_tm, c_tm = truncation_loss(phi, z, depth, trunc, tm_mask, strict)
    l_tt, c_tt = truncation_loss(phi, z, depth, trunc, tt_mask, strict)
    l_d, g_d = depth_loss(rendered_depth, depth)

    gphi = weights.fs * c_fs * 2.0 * (phi - 1.0)
    resid_t = z + phi * trunc - depth[:, None]
    gphi += (weights.t_m * c_tm + weights.t_t * c_tt) * 2.0 * resid_t * trunc
    gdepth = weights.d * g_d

    if rendered_color is not None:
        l_c, g_c = color_loss(rendered_color, colors)
        gcolor = weights.c * g_c
    else:
        l_c, gcolor = 0.0, None

    total = (
        weights.fs * l_fs
        + weights.t_m * l_tm
        + weights.t_t * l_tt
        + weights.d * l_d
        + weights.c * l_c
    )
    return LossBreakdown(l_fs, l_tm, l_tt, l_d, l_c, total), (gphi, gdepth, gcolor)
