"""Pure-numpy implementations of the hot kernels.

Semantics must match ``_native.pyx`` exactly up to float summation order.
Coordinates are in grid units: u in [0, H-1], v in [0, W-1]. Callers are
responsible for range checking; the kernels clamp to the grid so that
indexing is always safe.
"""

import numpy as np


def _cells(plane, u, v):
    h, w = plane.shape[0], plane.shape[1]
    u = np.clip(u, 0.0, h - 1.0)
    v = np.clip(v, 0.0, w - 1.0)
    i0 = np.minimum(u.astype(np.int64), h - 2)
    j0 = np.minimum(v.astype(np.int64), w - 2)
    i0 = np.maximum(i0, 0)
    j0 = np.maximum(j0, 0)
    du = (u - i0).astype(plane.dtype)
    dv = (v - j0).astype(plane.dtype)
    return i0, j0, du, dv


def bilerp_gather(plane, u, v):
    """Bilinear interpolation of ``plane`` (H, W, C) at grid coords (u, v)."""
    i0, j0, du, dv = _cells(plane, u, v)
    f00 = plane[i0, j0]
    f01 = plane[i0, j0 + 1]
    f10 = plane[i0 + 1, j0]
    f11 = plane[i0 + 1, j0 + 1]
    du = du[:, None]
    dv = dv[:, None]
    return (
        f00 * ((1.0 - du) * (1.0 - dv))
        + f01 * ((1.0 - du) * dv)
        + f10 * (du * (1.0 - dv))
        + f11 * (du * dv)
    )


def bilerp_vjp(plane, u, v, gfeat, gplane=None, need_uv=False):
    """Backward pass of :func:`bilerp_gather`.

    Accumulates the feature gradient into ``gplane`` (same shape as ``plane``)
    when given, and returns per-point gradients (gu, gv) when ``need_uv``.
    The uv gradient uses the in-cell derivative (clamped points included).
    """
    h, w, c = plane.shape
    i0, j0, du, dv = _cells(plane, u, v)
    flat00 = i0 * w + j0

    if gplane is not None:
        du2 = du[:, None]
        dv2 = dv[:, None]
        gflat = gplane.reshape(h * w, c)
        for off, wgt in (
            (0, (1.0 - du2) * (1.0 - dv2)),
            (1, (1.0 - du2) * dv2),
            (w, du2 * (1.0 - dv2)),
            (w + 1, du2 * dv2),
        ):
            contrib = gfeat * wgt
            idx = flat00 + off
            for ch in range(c):
                gflat[:, ch] += np.bincount(idx, weights=contrib[:, ch], minlength=h * w)

    if not need_uv:
        return None

    f00 = plane[i0, j0]
    f01 = plane[i0, j0 + 1]
    f10 = plane[i0 + 1, j0]
    f11 = plane[i0 + 1, j0 + 1]
    dv2 = dv[:, None]
    du2 = du[:, None]
    dfdu = (f10 - f00) * (1.0 - dv2) + (f11 - f01) * dv2
    dfdv = (f01 - f00) * (1.0 - du2) + (f11 - f10) * du2
    gu = np.einsum("nc,nc->n", gfeat, dfdu)
    gv = np.einsum("nc,nc->n", gfeat, dfdv)
    return gu, gv


def composite_fwd(sigma):
    """Ray compositing weights from per-sample densities (M, N).

    trans_n = exp(-sum_{k<n} sigma_k); w_n = trans_n * (1 - exp(-sigma_n)).
    """
    cum = np.cumsum(sigma, axis=1)
    trans = np.exp(-(cum - sigma))
    weights = trans * (-np.expm1(-sigma))
    return weights, trans


def composite_vjp(sigma, weights, trans, gweights):
    """Backward pass of :func:`composite_fwd` w.r.t. sigma."""
    a = gweights * weights
    # tail_m = sum_{n > m} gweights_n * weights_n
    tail = np.cumsum(a[:, ::-1], axis=1)[:, ::-1] - a
    return gweights * trans * np.exp(-sigma) - tail
