"""trislam: dense RGB-D SLAM on multi-scale tri-plane TSDF feature fields."""

import os as _os

# must happen before numpy is imported anywhere in the package
if "TRISLAM_NUM_THREADS" in _os.environ:
    _n = _os.environ["TRISLAM_NUM_THREADS"]
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _n)

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: E402,F401
