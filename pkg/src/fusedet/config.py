"""Run configuration: one validated dataclass with documented desk-scale
defaults, JSON round-trip, and a provenance hash carried by all artifacts."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


# per-class (w, l, h) size priors in meters
CLASS_NAMES = ("car", "pedestrian", "cyclist")
CLASS_SIZES = ((1.9, 4.5, 1.6), (0.7, 0.7, 1.7), (0.7, 1.8, 1.4))

MODALITIES = ("lidar", "camera")


@dataclass
class RunConfig:
    # BEV proposal grid
    grid_nx: int = 24
    grid_ny: int = 24
    x_range: tuple = (-24.0, 24.0)
    y_range: tuple = (-24.0, 24.0)
    fixed_z: float = 0.0
    z_range: tuple = (-2.0, 4.0)  # positional-embedding normalization only

    # model
    m_queries: int = 32
    d_model: int = 36  # must divide by 6 (sine embedding) and n_heads
    n_heads: int = 4
    n_layers: int = 1
    d_lidar: int = 16
    d_camera: int = 16
    active_modalities: tuple = ("lidar", "camera")
    init_strategy: str = "proposed"  # "proposed" | "agnostic"
    refine_locations: bool = True
    sample_pattern: str = "single"  # "single" | "cross"

    # classes / scene generation
    num_classes: int = 3
    min_objects: int = 2
    max_objects: int = 8
    points_per_box: int = 120
    clutter_points: int = 600
    lidar_map_nx: int = 48
    lidar_map_ny: int = 48

    # camera rig
    n_cameras: int = 2
    image_w: int = 160
    image_h: int = 120
    cam_stride: int = 8
    cam_focal: float = 140.0

    # supervision
    lambda_cls: float = 1.0
    lambda_reg: float = 0.25
    heatmap_weight: float = 1.0
    layer_loss_weight: float = 1.0
    use_heatmap_loss: bool = True
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    prf_gamma: float = 2.0
    prf_beta: float = 4.0

    # optimizer
    lr: float = 3e-3
    epochs: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.d_model % 6 != 0:
            raise ConfigError(f"d_model must be divisible by 6, got {self.d_model}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.m_queries > self.grid_nx * self.grid_ny:
            raise ConfigError("m_queries exceeds the dense proposal count")
        if self.image_w % self.cam_stride or self.image_h % self.cam_stride:
            raise ConfigError("camera stride must divide the image size exactly")
        if self.init_strategy not in ("proposed", "agnostic"):
            raise ConfigError(f"unknown init_strategy {self.init_strategy!r}")
        if self.sample_pattern not in ("single", "cross"):
            raise ConfigError(f"unknown sample_pattern {self.sample_pattern!r}")
        mods = tuple(self.active_modalities)
        if not mods or any(m not in MODALITIES for m in mods):
            raise ConfigError(f"active_modalities must be a nonempty subset of {MODALITIES}")
        self.active_modalities = mods
        self.x_range = tuple(map(float, self.x_range))
        self.y_range = tuple(map(float, self.y_range))
        self.z_range = tuple(map(float, self.z_range))
        if self.num_classes > len(CLASS_SIZES):
            raise ConfigError(f"at most {len(CLASS_SIZES)} classes have size priors")

    @property
    def m_dense(self) -> int:
        return self.grid_nx * self.grid_ny

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("x_range", "y_range", "z_range", "active_modalities"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("x_range", "y_range", "z_range", "active_modalities"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def full_scale_shape_profile(**overrides) -> RunConfig:
    """Full-scale shape profile (dense grid 60x60 = 3600, M = 200).

    Used for shape/count tests only; too slow for desk-scale training.
    """
    base = dict(
        grid_nx=60,
        grid_ny=60,
        x_range=(-54.0, 54.0),
        y_range=(-54.0, 54.0),
        m_queries=200,
        d_model=252,
        n_heads=4,
        n_layers=6,
    )
    base.update(overrides)
    return RunConfig(**base)
