"""Scene field: feature planes + shallow decoders + surface sharpness.

``decode`` maps a continuous 3D point to a TSDF value in (-1, 1) and a raw
color in (0, 1)^3. The geometry and appearance decoders are two-layer MLPs
(feature_dim -> 32 hidden, ReLU -> 1 or 3) with tanh / sigmoid output
activations.
"""

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .planes import FeaturePlaneSet
from .util import relu, stable_sigmoid

HIDDEN = 32

CHECKPOINT_MAGIC = b"ESLM"
CHECKPOINT_VERSION = 1


@dataclass
class Mlp:
    """Two-layer affine map with ReLU hidden activation (output is linear)."""

    w1: np.ndarray  # (din, HIDDEN)
    b1: np.ndarray  # (HIDDEN,)
    w2: np.ndarray  # (HIDDEN, dout)
    b2: np.ndarray  # (dout,)

    @staticmethod
    def create(din, dout, rng, dtype=np.float32):
        # Kaiming-style fan-in scaling, zero biases
        w1 = rng.uniform(-1.0, 1.0, size=(din, HIDDEN)) * np.sqrt(3.0 / din)
        w2 = rng.uniform(-1.0, 1.0, size=(HIDDEN, dout)) * np.sqrt(3.0 / HIDDEN)
        return Mlp(
            w1.astype(dtype),
            np.zeros(HIDDEN, dtype=dtype),
            w2.astype(dtype),
            np.zeros(dout, dtype=dtype),
        )

    @property
    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, x):
        """Returns (out, hidden) where hidden is kept for the backward pass."""
        h = relu(x @ self.w1 + self.b1)
        return h @ self.w2 + self.b2, h

    def backward(self, x, h, gout, need_param_grads=True):
        """Returns (gx, [gw1, gb1, gw2, gb2] or None)."""
        gh = gout @ self.w2.T
        gh = np.where(h > 0, gh, 0)
        gx = gh @ self.w1.T
        if not need_param_grads:
            return gx, None
        gw2 = h.T @ gout
        gb2 = gout.sum(axis=0)
        gw1 = x.T @ gh
        gb1 = gh.sum(axis=0)
        return gx, [gw1, gb1, gw2, gb2]


@dataclass
class DecodeCache:
    """Intermediates of one decode pass, consumed by the backward pass."""

    points: np.ndarray
    plane_cache_g: list = dc_field(default_factory=list)
    plane_cache_a: list = dc_field(default_factory=list)
    feat_g: np.ndarray = None
    feat_a: np.ndarray = None
    hidden_g: np.ndarray = None
    hidden_a: np.ndarray = None
    tsdf: np.ndarray = None
    color: np.ndarray = None


class SceneField:
    """Planes, decoders and the learnable density sharpness.

    The sharpness beta is stored in log space so positivity is structural.
    """

    def __init__(self, plane_set: FeaturePlaneSet, decoder_g: Mlp, decoder_a: Mlp, log_beta):
        self.planes = plane_set
        self.decoder_g = decoder_g
        self.decoder_a = decoder_a
        self.log_beta = np.asarray(log_beta, dtype=np.float64).reshape(1)

    @staticmethod
    def create(plane_set, rng, beta_init=10.0):
        d = plane_set.feature_dim
        return SceneField(
            plane_set,
            Mlp.create(d, 1, rng, plane_set.dtype),
            Mlp.create(d, 3, rng, plane_set.dtype),
            np.log(float(beta_init)),
        )

    @property
    def beta(self):
        return float(np.exp(self.log_beta[0]))

    @property
    def dtype(self):
        return self.planes.dtype

    # -- forward -------------------------------------------------------------

    def geometry_feature(self, points, cache=None):
        return self.planes.feature(np.asarray(points), "geometry", cache)

    def appearance_feature(self, points, cache=None):
        return self.planes.feature(np.asarray(points), "appearance", cache)

    def decode_geometry(self, points, cache=None):
        """TSDF at ``points`` (N, 3) -> (N,) in (-1, 1)."""
        pc = None if cache is None else cache.plane_cache_g
        feat = self.geometry_feature(points, pc)
        out, h = self.decoder_g.forward(feat)
        tsdf = np.tanh(out[:, 0])
        if cache is not None:
            cache.feat_g, cache.hidden_g, cache.tsdf = feat, h, tsdf
        return tsdf

    def decode_color(self, points, cache=None):
        """Raw color at ``points`` (N, 3) -> (N, 3) in (0, 1)."""
        pc = None if cache is None else cache.plane_cache_a
        feat = self.appearance_feature(points, pc)
        out, h = self.decoder_a.forward(feat)
        color = stable_sigmoid(out)
        if cache is not None:
            cache.feat_a, cache.hidden_a, cache.color = feat, h, color
        return color

    def decode(self, points, with_color=True):
        """(tsdf, color) at ``points``; color is None when not requested."""
        points = np.atleast_2d(np.asarray(points))
        tsdf = self.decode_geometry(points)
        color = self.decode_color(points) if with_color else None
        return tsdf, color

    # -- backward ------------------------------------------------------------

    def decode_vjp(self, cache, gtsdf, gcolor, grads=None, gpoints=None):
        """Accumulate gradients of the decode pass.

        gtsdf (N,) and gcolor (N, 3) are the upstream gradients; either may
        be None. ``grads`` is a FieldGrads to accumulate parameter gradients
        into (None skips them); ``gpoints`` (N, 3) accumulates point
        gradients for the pose chain (None skips).
        """
        want_params = grads is not None
        if not want_params and gpoints is None:
            return
        if gtsdf is not None:
            gout = (gtsdf * (1.0 - cache.tsdf**2))[:, None].astype(cache.feat_g.dtype)
            gfeat, mlp_grads = self.decoder_g.backward(
                cache.feat_g, cache.hidden_g, gout, want_params
            )
            if want_params:
                for acc, g in zip(grads.decoder_g, mlp_grads):
                    acc += g
            self.planes.feature_vjp(
                cache.plane_cache_g,
                gfeat,
                grads.planes if want_params else None,
                gpoints,
            )
        if gcolor is not None:
            gout = (gcolor * cache.color * (1.0 - cache.color)).astype(cache.feat_a.dtype)
            gfeat, mlp_grads = self.decoder_a.backward(
                cache.feat_a, cache.hidden_a, gout, want_params
            )
            if want_params:
                for acc, g in zip(grads.decoder_a, mlp_grads):
                    acc += g
            self.planes.feature_vjp(
                cache.plane_cache_a,
                gfeat,
                grads.planes if want_params else None,
                gpoints,
            )

    # -- parameter plumbing ----------------------------------------------------

    def scene_param_groups(self):
        """(name, list-of-arrays) pairs in a fixed order."""
        return [
            ("planes", self.planes.arrays),
            ("decoders", self.decoder_g.params + self.decoder_a.params),
            ("sharpness", [self.log_beta]),
        ]

    def zero_grads(self):
        return FieldGrads(
            planes=self.planes.zero_grads(),
            decoder_g=[np.zeros_like(p) for p in self.decoder_g.params],
            decoder_a=[np.zeros_like(p) for p in self.decoder_a.params],
            log_beta=np.zeros(1),
        )


@dataclass
class FieldGrads:
    planes: list
    decoder_g: list
    decoder_a: list
    log_beta: np.ndarray

    def by_group(self):
        return [
            ("planes", self.planes),
            ("decoders", self.decoder_g + self.decoder_a),
            ("sharpness", [self.log_beta]),
        ]


# ---------------------------------------------------------------------------
# checkpoint format
#
# header: magic "ESLM" | version u32 | flags u32 | channels u32 | dtype u32 |
#         n_planes u32 | n_keyframes u32 | bounds 6xf64 | resolutions 3xf64
# planes: per plane H u32, W u32, then H*W*C float32 row-major
# decoders: geometry then appearance, each w1/b1/w2/b2 as f64 (dims u32 pairs)
# sharpness: log_beta f64
# keyframes: per keyframe frame_id u64, timestamp f64, q 4xf64, t 3xf64
#
# Plane data is f32 on disk; everything else f64. Both widen/narrow exactly
# for the in-memory dtypes used here, so save -> load -> save is
# byte-identical.

_FLAG_SHARED = 1
_FLAG_COARSE_ONLY = 2
_FLAG_FINE_ONLY = 4
_FLAG_COMBINE_SUM = 8


def save_checkpoint(path, field: SceneField, keyframe_poses=()):
    """keyframe_poses: iterable of (frame_id, timestamp, q (4,), t (3,))."""
    ps = field.planes
    flags = (
        (_FLAG_SHARED if ps.shared_planes else 0)
        | (_FLAG_COARSE_ONLY if ps.scales == ["coarse"] else 0)
        | (_FLAG_FINE_ONLY if ps.scales == ["fine"] else 0)
        | (_FLAG_COMBINE_SUM if ps.combine == "sum" else 0)
    )
    dtype_code = 1 if ps.dtype == np.float64 else 0
    kf = list(keyframe_poses)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(
            struct.pack(
                "<IIIIII",
                CHECKPOINT_VERSION,
                flags,
                ps.channels,
                dtype_code,
                len(ps.arrays),
                len(kf),
            )
        )
        f.write(np.concatenate([ps.bounds_min, ps.bounds_max]).astype("<f8").tobytes())
        f.write(
            np.array(
                [
                    ps.resolutions["coarse"],
                    ps.resolutions["fine_geometry"],
                    ps.resolutions["fine_appearance"],
                ],
                dtype="<f8",
            ).tobytes()
        )
        for arr in ps.arrays:
            f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        for mlp in (field.decoder_g, field.decoder_a):
            for p in mlp.params:
                shape = p.shape if p.ndim == 2 else (p.shape[0], 0)
                f.write(struct.pack("<II", *shape))
                f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
        f.write(np.asarray(field.log_beta, dtype="<f8").tobytes())
        for frame_id, ts, q, t in kf:
            f.write(struct.pack("<Q", int(frame_id)))
            f.write(np.asarray([ts], dtype="<f8").tobytes())
            f.write(np.asarray(q, dtype="<f8").tobytes())
            f.write(np.asarray(t, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (SceneField, keyframe_poses list) reconstructed from disk."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a scene checkpoint (magic {magic!r})")
        version, flags, channels, dtype_code, n_planes, n_kf = struct.unpack(
            "<IIIIII", f.read(24)
        )
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        bounds = np.frombuffer(f.read(48), dtype="<f8")
        res = np.frombuffer(f.read(24), dtype="<f8")
        dtype = np.float64 if dtype_code == 1 else np.float32
        ps = FeaturePlaneSet(
            bounds[:3],
            bounds[3:],
            channels=channels,
            coarse_res=res[0],
            fine_geo_res=res[1],
            fine_app_res=res[2],
            shared_planes=bool(flags & _FLAG_SHARED),
            coarse_only=bool(flags & _FLAG_COARSE_ONLY),
            fine_only=bool(flags & _FLAG_FINE_ONLY),
            combine="sum" if flags & _FLAG_COMBINE_SUM else "concat",
            dtype=dtype,
        )
        if len(ps.arrays) != n_planes:
            raise ValueError("plane count mismatch between header and geometry flags")
        for arr in ps.arrays:
            h, w = struct.unpack("<II", f.read(8))
            if (h, w) != arr.shape[:2]:
                raise ValueError(f"plane shape mismatch: file {h}x{w}, expected {arr.shape[:2]}")
            data = np.frombuffer(f.read(h * w * channels * 4), dtype="<f4")
            arr[...] = data.reshape(h, w, channels).astype(dtype)
        mlps = []
        for dout in (1, 3):
            params = []
            for _ in range(4):
                d0, d1 = struct.unpack("<II", f.read(8))
                n = d0 * d1 if d1 else d0
                p = np.frombuffer(f.read(n * 8), dtype="<f8")
                p = p.reshape(d0, d1) if d1 else p.copy()
                params.append(np.ascontiguousarray(p, dtype=dtype))
            mlps.append(Mlp(*params))
        log_beta = np.frombuffer(f.read(8), dtype="<f8").copy()
        keyframes = []
        for _ in range(n_kf):
            (frame_id,) = struct.unpack("<Q", f.read(8))
            ts = float(np.frombuffer(f.read(8), dtype="<f8")[0])
            q = np.frombuffer(f.read(32), dtype="<f8").copy()
            t = np.frombuffer(f.read(24), dtype="<f8").copy()
            keyframes.append((frame_id, ts, q, t))
    field = SceneField(ps, mlps[0], mlps[1], log_beta)
    return field, keyframes
