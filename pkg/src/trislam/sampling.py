"""Per-ray depth sampling: stratified, depth-window, and hierarchical.

All draws come from the keyed hash RNG (util.hash_uniform) so a ray's
samples depend only on (seed, frame id, pixel id, draw index), never on the
rest of the batch. Sample depths are planar depths (camera-frame z); the
pipeline's ray parameterization makes the point at parameter z have planar
depth exactly z.
"""

import numpy as np

from .util import StreamKeys, hash_uniform

# strict ordering is restored after merging by nudging duplicates apart
DUPLICATE_EPS = 1e-9


def stratified_z(near, far, u):
    """One draw per equal sub-interval of [near, far].

    near, far: (M,); u: (M, N) uniforms in [0, 1). Returns (M, N) depths.
    """
    n = u.shape[1]
    edges = np.linspace(0.0, 1.0, n + 1)[:n]
    frac = edges[None, :] + u / n
    return near[:, None] + (far - near)[:, None] * frac


def depth_window_z(depth, trunc, u, near, far):
    """Uniform draws in [D - T, D + T], clamped into [near, far]."""
    lo = depth[:, None] - trunc
    hi = depth[:, None] + trunc
    z = lo + (hi - lo) * u
    return np.clip(z, near[:, None], far[:, None])


def importance_z(near, far, weights, u):
    """Inverse-CDF draws from the piecewise-constant PDF over the N_strat
    equal sub-intervals of [near, far], proportional to ``weights``.

    weights: (M, N_strat) nonnegative; u: (M, N_imp) uniforms.
    """
    m, ns = weights.shape
    w = weights + 1e-10  # keep the CDF invertible when all weights vanish
    cdf = np.cumsum(w, axis=1)
    cdf = cdf / cdf[:, -1:]
    cdf = np.concatenate([np.zeros((m, 1)), cdf], axis=1)  # (M, ns+1)

    # batched searchsorted: offset each row into its own [2r, 2r+1] band
    rows = np.arange(m)[:, None] * 2.0
    flat = (cdf + rows).ravel()
    idx = np.searchsorted(flat, (u + rows).ravel(), side="right").reshape(u.shape)
    idx = idx - np.arange(m)[:, None] * (ns + 1) - 1
    idx = np.clip(idx, 0, ns - 1)

    c0 = np.take_along_axis(cdf, idx, axis=1)
    c1 = np.take_along_axis(cdf, idx + 1, axis=1)
    frac = (u - c0) / np.maximum(c1 - c0, 1e-12)
    width = (far - near)[:, None] / ns
    return near[:, None] + (idx + frac) * width


def merge_sorted(z_a, z_b):
    """Concatenate, sort, and enforce strictly increasing depths."""
    z = np.sort(np.concatenate([z_a, z_b], axis=1), axis=1)
    for i in range(1, z.shape[1]):
        np.maximum(z[:, i], z[:, i - 1] + DUPLICATE_EPS, out=z[:, i])
    return z


def ray_uniforms(seed, salt, frame_ids, pixel_ids, n, purpose):
    """(len(pixel_ids), n) uniforms keyed by (seed, salt, frame, pixel, draw)."""
    return hash_uniform(
        seed,
        salt,
        np.asarray(frame_ids)[:, None],
        np.asarray(pixel_ids)[:, None],
        np.arange(n)[None, :],
        purpose,
    )


def sample_batch(
    near,
    far,
    depth,
    trunc,
    n_strat,
    n_imp,
    *,
    seed,
    frame_ids,
    pixel_ids,
    salt=0,
    coarse_weights_fn=None,
    stratified_only=False,
):
    """Full per-ray sampling: stratified plus surface-directed samples.

    near/far: (M,) from ray-box intersection (callers drop misses first).
    depth: (M,) measured depths, 0 where missing. Rays with a measurement
    get n_imp extra draws uniform in the truncation window; rays without
    get n_imp hierarchical draws from ``coarse_weights_fn(z_strat_subset,
    ray_indices) -> weights`` over the stratified bins (required if any
    such ray exists).

    Returns (M, n_strat + n_imp) strictly increasing depths.
    """
    frame_ids = np.broadcast_to(np.asarray(frame_ids), near.shape)
    pixel_ids = np.broadcast_to(np.asarray(pixel_ids), near.shape)
    u_strat = ray_uniforms(seed, salt, frame_ids, pixel_ids, n_strat, StreamKeys.STRATIFIED)
    z_strat = stratified_z(near, far, u_strat)
    if n_imp == 0 or stratified_only:
        if stratified_only and n_imp > 0:
            # ablation: spend the importance budget on plain stratification
            u2 = ray_uniforms(seed, salt, frame_ids, pixel_ids, n_imp, StreamKeys.IMPORTANCE)
            extra = near[:, None] + (far - near)[:, None] * u2
            return merge_sorted(z_strat, extra)
        return merge_sorted(z_strat, z_strat[:, :0])

    z_extra = np.empty((near.shape[0], n_imp))
    with_d = depth > 0
    if with_d.any():
        u = ray_uniforms(
            seed, salt, frame_ids[with_d], pixel_ids[with_d], n_imp, StreamKeys.DEPTH_WINDOW
        )
        z_extra[with_d] = depth_window_z(
            depth[with_d], trunc, u, near[with_d], far[with_d]
        )
    no_d = ~with_d
    if no_d.any():
        if coarse_weights_fn is None:
            raise ValueError("rays without depth need coarse_weights_fn for importance sampling")
        w = coarse_weights_fn(z_strat[no_d], np.flatnonzero(no_d))
        u = ray_uniforms(
            seed, salt, frame_ids[no_d], pixel_ids[no_d], n_imp, StreamKeys.IMPORTANCE
        )
        z_extra[no_d] = importance_z(near[no_d], far[no_d], w, u)
    return merge_sorted(z_strat, z_extra)
