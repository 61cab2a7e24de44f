# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: bilinear plane gather/scatter and ray compositing.

Must match numpy_backend semantics; see that module for the contract.
"""

import numpy as np

cimport cython
from libc.math cimport exp, expm1, floor

ctypedef fused floating:
    float
    double


def bilerp_gather(floating[:, :, ::1] plane, floating[::1] u, floating[::1] v):
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t h = plane.shape[0]
    cdef Py_ssize_t w = plane.shape[1]
    cdef Py_ssize_t c = plane.shape[2]
    out_np = np.empty((n, c), dtype=np.asarray(plane).dtype)
    cdef floating[:, ::1] out = out_np
    cdef Py_ssize_t k, ch, i0, j0
    cdef floating uu, vv, du, dv, w00, w01, w10, w11
    for k in range(n):
        uu = u[k]
        vv = v[k]
        if uu < 0:
            uu = 0
        elif uu > h - 1:
            uu = h - 1
        if vv < 0:
            vv = 0
        elif vv > w - 1:
            vv = w - 1
        i0 = <Py_ssize_t>floor(uu)
        j0 = <Py_ssize_t>floor(vv)
        if i0 > h - 2:
            i0 = h - 2
        if j0 > w - 2:
            j0 = w - 2
        du = uu - i0
        dv = vv - j0
        w00 = (1 - du) * (1 - dv)
        w01 = (1 - du) * dv
        w10 = du * (1 - dv)
        w11 = du * dv
        for ch in range(c):
            out[k, ch] = (
                plane[i0, j0, ch] * w00
                + plane[i0, j0 + 1, ch] * w01
                + plane[i0 + 1, j0, ch] * w10
                + plane[i0 + 1, j0 + 1, ch] * w11
            )
    return out_np


def bilerp_vjp(
    floating[:, :, ::1] plane,
    floating[::1] u,
    floating[::1] v,
    floating[:, ::1] gfeat,
    gplane_obj=None,
    bint need_uv=False,
):
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t h = plane.shape[0]
    cdef Py_ssize_t w = plane.shape[1]
    cdef Py_ssize_t c = plane.shape[2]
    cdef floating[:, :, ::1] gplane = None
    cdef bint need_plane = gplane_obj is not None
    if need_plane:
        gplane = gplane_obj
    gu_np = gv_np = None
    cdef floating[::1] gu = None
    cdef floating[::1] gv = None
    if need_uv:
        gu_np = np.empty(n, dtype=np.asarray(plane).dtype)
        gv_np = np.empty(n, dtype=np.asarray(plane).dtype)
        gu = gu_np
        gv = gv_np
    cdef Py_ssize_t k, ch, i0, j0
    cdef floating uu, vv, du, dv, w00, w01, w10, w11, g, su, sv
    for k in range(n):
        uu = u[k]
        vv = v[k]
        if uu < 0:
            uu = 0
        elif uu > h - 1:
            uu = h - 1
        if vv < 0:
            vv = 0
        elif vv > w - 1:
            vv = w - 1
        i0 = <Py_ssize_t>floor(uu)
        j0 = <Py_ssize_t>floor(vv)
        if i0 > h - 2:
            i0 = h - 2
        if j0 > w - 2:
            j0 = w - 2
        du = uu - i0
        dv = vv - j0
        w00 = (1 - du) * (1 - dv)
        w01 = (1 - du) * dv
        w10 = du * (1 - dv)
        w11 = du * dv
        su = 0
        sv = 0
        for ch in range(c):
            g = gfeat[k, ch]
            if need_plane:
                gplane[i0, j0, ch] += g * w00
                gplane[i0, j0 + 1, ch] += g * w01
                gplane[i0 + 1, j0, ch] += g * w10
                gplane[i0 + 1, j0 + 1, ch] += g * w11
            if need_uv:
                su += g * (
                    (plane[i0 + 1, j0, ch] - plane[i0, j0, ch]) * (1 - dv)
                    + (plane[i0 + 1, j0 + 1, ch] - plane[i0, j0 + 1, ch]) * dv
                )
                sv += g * (
                    (plane[i0, j0 + 1, ch] - plane[i0, j0, ch]) * (1 - du)
                    + (plane[i0 + 1, j0 + 1, ch] - plane[i0 + 1, j0, ch]) * du
                )
        if need_uv:
            gu[k] = su
            gv[k] = sv
    if need_uv:
        return gu_np, gv_np
    return None


def composite_fwd(floating[:, ::1] sigma):
    cdef Py_ssize_t m = sigma.shape[0]
    cdef Py_ssize_t n = sigma.shape[1]
    dt = np.asarray(sigma).dtype
    w_np = np.empty((m, n), dtype=dt)
    t_np = np.empty((m, n), dtype=dt)
    cdef floating[:, ::1] weights = w_np
    cdef floating[:, ::1] trans = t_np
    cdef Py_ssize_t i, j
    cdef floating acc
    for i in range(m):
        acc = 0
        for j in range(n):
            trans[i, j] = exp(-acc)
            weights[i, j] = trans[i, j] * (-expm1(-sigma[i, j]))
            acc = acc + sigma[i, j]
    return w_np, t_np


def composite_vjp(
    floating[:, ::1] sigma,
    floating[:, ::1] weights,
    floating[:, ::1] trans,
    floating[:, ::1] gweights,
):
    cdef Py_ssize_t m = sigma.shape[0]
    cdef Py_ssize_t n = sigma.shape[1]
    g_np = np.empty((m, n), dtype=np.asarray(sigma).dtype)
    cdef floating[:, ::1] gsigma = g_np
    cdef Py_ssize_t i, j
    cdef floating tail
    for i in range(m):
        tail = 0
        for j in range(n - 1, -1, -1):
            gsigma[i, j] = gweights[i, j] * trans[i, j] * exp(-sigma[i, j]) - tail
            tail = tail + gweights[i, j] * weights[i, j]
    return g_np
