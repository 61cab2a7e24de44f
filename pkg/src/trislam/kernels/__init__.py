"""Hot inner-loop kernels with a compiled core and a numpy fallback.

The compiled extension (``trislam.kernels._native``, Cython) implements the
per-point plane gather/scatter and the ray compositing recurrences that
dominate runtime. If it is unavailable, or ``TRISLAM_KERNELS=numpy`` is set,
the pure-numpy implementations in :mod:`trislam.kernels.numpy_backend` are
used instead. Both backends share one signature set:

    bilerp_gather(plane, u, v) -> (N, C) features
    bilerp_vjp(plane, u, v, gfeat, gplane, need_uv) -> (gu, gv) or None
    composite_fwd(sigma) -> (weights, trans)
    composite_vjp(sigma, weights, trans, gweights) -> gsigma

Each backend is deterministic run-to-run; the two backends may differ in the
last float bits (different summation order).
"""

import os

from . import numpy_backend

_requested = os.environ.get("TRISLAM_KERNELS", "auto").lower()
if _requested not in ("auto", "native", "numpy"):
    raise ValueError(f"TRISLAM_KERNELS must be auto|native|numpy, got {_requested!r}")

_impl = None
if _requested in ("auto", "native"):
    try:
        from . import _native as _impl
    except ImportError:
        if _requested == "native":
            raise
        _impl = None
if _impl is None:
    _impl = numpy_backend

BACKEND = "native" if _impl is not numpy_backend else "numpy"

bilerp_gather = _impl.bilerp_gather
bilerp_vjp = _impl.bilerp_vjp
composite_fwd = _impl.composite_fwd
composite_vjp = _impl.composite_vjp


def get_backend(name):
    """Return a kernel module by name ('native' or 'numpy'); for benchmarks."""
    if name == "numpy":
        return numpy_backend
    if name == "native":
        from . import _native

        return _native
    raise ValueError(f"unknown backend {name!r}")
