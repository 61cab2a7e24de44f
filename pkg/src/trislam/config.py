"""Run configuration: flat key = value sections, diffable serialization.

Every default that the method defines is encoded here (truncation 6 cm,
plane resolutions 24/6/3 cm, 32 channels, 32+8 samples, mapping every 4
frames with a 20-frame window, 15/8 iterations, 4000/2000 rays, the two
loss-weight presets, and the learning rates). Quantities with no sensible
default (scene bounds, camera intrinsics, dataset path) validate as
required and produce a config error naming the field.
"""

import configparser
import io
from dataclasses import dataclass, field as dc_field, fields as dc_fields

import numpy as np

from .geometry import CameraIntrinsics
from .losses import LossWeights


class ConfigError(ValueError):
    """Invalid or missing configuration value; ``field`` names the culprit."""

    def __init__(self, field, message):
        super().__init__(f"config field '{field}': {message}")
        self.field = field


def _parse_vec3(s):
    parts = s.split()
    if len(parts) != 3:
        raise ValueError("expected three numbers")
    return np.array([float(x) for x in parts])


@dataclass
class RunConfig:
    # [run]
    seed: int = 0
    dataset: str = ""
    dataset_type: str = "synthetic"  # synthetic | tum
    # [bounds]
    bounds_min: str = ""
    bounds_max: str = ""
    # [camera]
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0
    width: int = 0
    height: int = 0
    depth_scale: float = 5000.0
    # [field]
    channels: int = 32
    coarse_resolution: float = 0.24
    fine_geometry_resolution: float = 0.06
    fine_appearance_resolution: float = 0.03
    truncation: float = 0.06
    beta_init: float = 10.0
    dtype: str = "float32"
    shared_planes: bool = False
    coarse_only: bool = False
    fine_only: bool = False
    combine: str = "concat"  # concat | sum
    # [sampling]
    n_stratified: int = 32
    n_importance: int = 8
    stratified_only: bool = False
    # [mapping]
    map_iterations: int = 15
    first_frame_iterations: int = 0  # 0 = same as map_iterations
    map_interval: int = 4
    window: int = 20
    map_rays: int = 4000
    lr_planes: float = 0.005
    lr_decoders: float = 0.001
    lr_sharpness: float = 0.001
    lr_map_pose: float = 0.001
    freeze_map_poses: bool = False
    map_lambda_fs: float = 5.0
    map_lambda_mid: float = 200.0
    map_lambda_tail: float = 10.0
    map_lambda_depth: float = 0.1
    map_lambda_color: float = 5.0
    # [tracking]
    track_iterations: int = 8
    track_rays: int = 2000
    lr_rotation: float = 0.001
    lr_translation: float = 0.001
    track_lambda_fs: float = 10.0
    track_lambda_mid: float = 200.0
    track_lambda_tail: float = 50.0
    track_lambda_depth: float = 1.0
    track_lambda_color: float = 5.0
    # [losses]
    merged_truncation: bool = False
    no_color: bool = False
    strict_ray_average: bool = False
    # [init]
    first_pose: str = "groundtruth"  # groundtruth | identity
    # [mesh]
    mesh_voxel: float = 0.01
    # [eval]
    eval_poses: int = 200
    eval_width: int = 80
    eval_height: int = 60

    # ------------------------------------------------------------------

    def intrinsics(self):
        try:
            return CameraIntrinsics(
                self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.depth_scale
            )
        except ValueError as exc:
            raise ConfigError("camera", str(exc)) from exc

    def bounds(self):
        if not self.bounds_min.strip() or not self.bounds_max.strip():
            raise ConfigError("bounds", "scene bounds_min/bounds_max are required")
        try:
            lo = _parse_vec3(self.bounds_min)
            hi = _parse_vec3(self.bounds_max)
        except ValueError as exc:
            raise ConfigError("bounds", str(exc)) from exc
        if not (hi > lo).all():
            raise ConfigError("bounds", "bounds_max must exceed bounds_min per axis")
        return lo, hi

    def mapping_weights(self):
        return LossWeights(
            self.map_lambda_fs,
            self.map_lambda_mid,
            self.map_lambda_tail,
            self.map_lambda_depth,
            0.0 if self.no_color else self.map_lambda_color,
        )

    def tracking_weights(self):
        return LossWeights(
            self.track_lambda_fs,
            self.track_lambda_mid,
            self.track_lambda_tail,
            self.track_lambda_depth,
            0.0 if self.no_color else self.track_lambda_color,
        )

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def validate(self):
        self.bounds()
        self.intrinsics()
        if self.dataset_type not in ("synthetic", "tum"):
            raise ConfigError("dataset_type", "must be 'synthetic' or 'tum'")
        if self.truncation <= 0:
            raise ConfigError("truncation", "must be positive")
        for name in ("coarse_resolution", "fine_geometry_resolution", "fine_appearance_resolution"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be positive")
        if self.fine_geometry_resolution > self.coarse_resolution:
            raise ConfigError("fine_geometry_resolution", "fine must not exceed coarse resolution")
        if self.fine_appearance_resolution > self.coarse_resolution:
            raise ConfigError("fine_appearance_resolution", "fine must not exceed coarse resolution")
        for name in ("map_iterations", "track_iterations", "map_interval", "window"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be positive")
        if self.first_frame_iterations < 0:
            raise ConfigError("first_frame_iterations", "must be >= 0 (0 inherits map_iterations)")
        for name in ("map_rays", "track_rays", "n_stratified"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be positive")
        if self.n_importance < 0:
            raise ConfigError("n_importance", "must be >= 0")
        if self.combine not in ("concat", "sum"):
            raise ConfigError("combine", "must be 'concat' or 'sum'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype", "must be 'float32' or 'float64'")
        if self.first_pose not in ("groundtruth", "identity"):
            raise ConfigError("first_pose", "must be 'groundtruth' or 'identity'")
        if self.coarse_only and self.fine_only:
            raise ConfigError("coarse_only", "coarse_only and fine_only are exclusive")
        for name in [f.name for f in dc_fields(self) if f.name.startswith(("map_lambda", "track_lambda"))]:
            if getattr(self, name) < 0:
                raise ConfigError(name, "loss weights must be >= 0")
        if self.mesh_voxel <= 0:
            raise ConfigError("mesh_voxel", "must be positive")
        return self


_SECTIONS = [
    ("run", ["seed", "dataset", "dataset_type"]),
    ("bounds", ["bounds_min", "bounds_max"]),
    ("camera", ["fx", "fy", "cx", "cy", "width", "height", "depth_scale"]),
    (
        "field",
        [
            "channels",
            "coarse_resolution",
            "fine_geometry_resolution",
            "fine_appearance_resolution",
            "truncation",
            "beta_init",
            "dtype",
            "shared_planes",
            "coarse_only",
            "fine_only",
            "combine",
        ],
    ),
    ("sampling", ["n_stratified", "n_importance", "stratified_only"]),
    (
        "mapping",
        [
            "map_iterations",
            "first_frame_iterations",
            "map_interval",
            "window",
            "map_rays",
            "lr_planes",
            "lr_decoders",
            "lr_sharpness",
            "lr_map_pose",
            "freeze_map_poses",
            "map_lambda_fs",
            "map_lambda_mid",
            "map_lambda_tail",
            "map_lambda_depth",
            "map_lambda_color",
        ],
    ),
    (
        "tracking",
        [
            "track_iterations",
            "track_rays",
            "lr_rotation",
            "lr_translation",
            "track_lambda_fs",
            "track_lambda_mid",
            "track_lambda_tail",
            "track_lambda_depth",
            "track_lambda_color",
        ],
    ),
    ("losses", ["merged_truncation", "no_color", "strict_ray_average"]),
    ("init", ["first_pose"]),
    ("mesh", ["mesh_voxel"]),
    ("eval", ["eval_poses", "eval_width", "eval_height"]),
]

_FIELD_TYPES = {f.name: f.type for f in dc_fields(RunConfig)}


def _convert(name, raw):
    typ = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if typ == "bool" or typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if typ == "int" or typ is int:
            return int(raw)
        if typ == "float" or typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(name, f"cannot parse {raw!r}: {exc}") from exc


def parse_config(text):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    cfg = RunConfig()
    known = {k: sec for sec, keys in _SECTIONS for k in keys}
    for sec in cp.sections():
        for key, raw in cp[sec].items():
            if key not in known:
                raise ConfigError(key, f"unknown key in section [{sec}]")
            setattr(cfg, key, _convert(key, raw))
    return cfg


def load_config(path, validate=True):
    with open(path) as f:
        cfg = parse_config(f.read())
    return cfg.validate() if validate else cfg


def serialize_config(cfg: RunConfig):
    out = io.StringIO()
    for sec, keys in _SECTIONS:
        out.write(f"[{sec}]\n")
        for key in keys:
            val = getattr(cfg, key)
            if isinstance(val, bool):
                sval = "true" if val else "false"
            elif isinstance(val, float):
                sval = repr(val)
            else:
                sval = str(val)
            out.write(f"{key} = {sval}\n")
        out.write("\n")
    return out.getvalue()


def default_config_text():
    return serialize_config(RunConfig())
