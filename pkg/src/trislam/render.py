"""SDF-based volume rendering.

Densities come from the TSDF via sigma = beta * sigmoid(-beta * phi); ray
weights use the accumulated-transmittance form without inter-sample spacing,
so color and depth are

    w_n = exp(-sum_{k<n} sigma_k) * (1 - exp(-sigma_n))
    c = sum w_n * raw_color_n,  d = sum w_n * z_n

which makes sum_n w_n = 1 - exp(-sum_n sigma_n) exactly.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import pixel_rays, ray_box_intersection
from .util import stable_sigmoid


@dataclass
class RayBatch:
    """Per-ray inputs and per-sample rendering state for one batch.

    Per ray: origin (M,3), unit dir (M,3), pixel color (M,3), measured depth
    (M,). Per sample: depth z (M,N), tsdf (M,N), raw color (M,N,3), density
    (M,N), weight (M,N).
    """

    origins: np.ndarray = None
    dirs: np.ndarray = None
    colors: np.ndarray = None
    depths: np.ndarray = None
    z: np.ndarray = None
    tsdf: np.ndarray = None
    raw_color: np.ndarray = None
    sigma: np.ndarray = None
    weights: np.ndarray = None
    rendered_color: np.ndarray = None
    rendered_depth: np.ndarray = None


def sdf_to_density(phi, beta):
    """sigma = beta * sigmoid(-beta * phi); monotone decreasing in phi."""
    return beta * stable_sigmoid(np.asarray(-beta * np.asarray(phi)))


def sdf_to_density_vjp(phi, beta, sigma, gsigma):
    """Gradients (gphi, gbeta) of the density map."""
    s = sigma / beta  # sigmoid(-beta * phi)
    ds = s * (1.0 - s)
    gphi = gsigma * (-(beta**2) * ds)
    gbeta = float(np.sum(gsigma * (s - beta * phi * ds)))
    return gphi, gbeta


def render_weights(sigma):
    """Compositing weights and transmittances for densities (M, N)."""
    return kernels.composite_fwd(np.ascontiguousarray(sigma))


def render_rays(z, sigma, raw_color=None):
    """Render depth (and color when raw_color is given) from sorted samples.

    Returns (color (M,3) or None, depth (M,), weights (M,N), trans (M,N)).
    """
    weights, trans = render_weights(sigma)
    depth = np.einsum("mn,mn->m", weights, z.astype(weights.dtype))
    color = None
    if raw_color is not None:
        color = np.einsum("mn,mnc->mc", weights, raw_color)
    return color, depth, weights, trans


def render_ray(z, sigma, raw_color=None):
    """Single-ray convenience wrapper: returns (color, depth, weights)."""
    z = np.atleast_2d(z)
    sigma = np.atleast_2d(sigma)
    rc = None if raw_color is None else np.asarray(raw_color)[None]
    color, depth, weights, _ = render_rays(z, sigma, rc)
    return (None if color is None else color[0]), depth[0], weights[0]


def render_image(field, pose, intrinsics, n_strat=32, n_imp=8, *, seed=0,
                 frame_id=0, with_color=True, chunk=8192):
    """Full-frame render of the field: (rgb (H,W,3) or None, depth (H,W)).

    Rays that miss the scene box render as depth 0 / black. Depth-guided
    sampling is unavailable here (no measurements), so rays use stratified
    plus hierarchical importance samples.
    """
    from .sampling import sample_batch  # local import to avoid a cycle

    h, w = intrinsics.height, intrinsics.width
    pixels = intrinsics.pixel_grid()
    depth_out = np.zeros(h * w)
    color_out = np.zeros((h * w, 3)) if with_color else None

    for start in range(0, pixels.shape[0], chunk):
        sl = slice(start, min(start + chunk, pixels.shape[0]))
        origins, _, plan = pixel_rays(intrinsics, pose, pixels[sl])
        near, far, hit = ray_box_intersection(
            origins, plan, field.planes.bounds_min, field.planes.bounds_max
        )
        if not hit.any():
            continue
        idx = np.flatnonzero(hit)
        near_h, far_h = near[idx], far[idx]
        o_h, d_h = origins[idx], plan[idx]
        pix_ids = np.arange(sl.start, sl.stop)[idx]

        def coarse_weights(z_strat, ray_indices, o=o_h, d=d_h):
            o = o[ray_indices][:, None, :]
            d = d[ray_indices][:, None, :]
            pts = (o + z_strat[..., None] * d).reshape(-1, 3)
            phi = field.decode_geometry(pts.astype(field.dtype)).reshape(z_strat.shape)
            wts, _ = render_weights(sdf_to_density(phi, field.beta))
            return wts

        z = sample_batch(
            near_h,
            far_h,
            np.zeros_like(near_h),
            0.0,
            n_strat,
            n_imp,
            seed=seed,
            frame_ids=frame_id,
            pixel_ids=pix_ids,
            coarse_weights_fn=coarse_weights,
        )
        pts = (o_h[:, None, :] + z[..., None] * d_h[:, None, :]).reshape(-1, 3)
        pts = pts.astype(field.dtype)
        tsdf, raw = field.decode(pts, with_color=with_color)
        tsdf = tsdf.reshape(z.shape)
        raw = None if raw is None else raw.reshape(z.shape + (3,))
        color, depth, _, _ = render_rays(z, sdf_to_density(tsdf, field.beta), raw)
        depth_out[sl.start + idx] = depth
        if with_color:
            color_out[sl.start + idx] = color

    depth_out = depth_out.reshape(h, w)
    return (None if color_out is None else color_out.reshape(h, w, 3)), depth_out
