"""Small shared numerics: stable activations and a counter-based RNG.

The sampling RNG is a keyed hash (splitmix64 finalizer chain) rather than a
sequential stream: every uniform draw is addressed by integer keys such as
(seed, frame, pixel, draw index). Draws for one ray therefore never depend
on which other rays are in a batch, which the outlier-rejection contract
relies on, and re-running with the same keys is bit-identical on any
platform.
"""

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_U53 = np.float64(1.0 / (1 << 53))


def relu(x):
    return np.maximum(x, 0)


def stable_sigmoid(x):
    """Overflow-free logistic function, dtype preserving."""
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _mix(x):
    with np.errstate(over="ignore"):
        x = (x + _GAMMA) & _MASK
        x = ((x ^ (x >> np.uint64(30))) * _M1) & _MASK
        x = ((x ^ (x >> np.uint64(27))) * _M2) & _MASK
        return x ^ (x >> np.uint64(31))


def hash_u64(*keys):
    """Combine broadcastable integer key arrays into uint64 hashes."""
    acc = np.uint64(0)
    for k in keys:
        k = np.asarray(k)
        if k.dtype.kind == "i":
            k = k.astype(np.int64).view(np.uint64)
        else:
            k = k.astype(np.uint64)
        acc = _mix(acc ^ k)
    return np.asarray(acc)


def hash_uniform(*keys):
    """Uniform draws in [0, 1) addressed by integer keys (broadcast shape)."""
    h = hash_u64(*keys)
    return (h >> np.uint64(11)).astype(np.float64) * _U53


class StreamKeys:
    """Namespace of integer purpose codes for the keyed RNG."""

    PIXELS = 1
    STRATIFIED = 2
    IMPORTANCE = 3
    DEPTH_WINDOW = 4
    WINDOW_SELECT = 5
    DEPTH_NOISE = 6


def pairwise_sum(x, axis=None):
    """Fixed-order pairwise summation (numpy's np.sum already is); explicit
    helper so reductions that must be reproducible route through one place."""
    return np.sum(x, axis=axis)
