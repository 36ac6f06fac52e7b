"""Run configuration: model sizes, ablation switches, loss weights and schedule."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError
from .scene import SceneConfig

INIT_MODES = ("prior2d", "random", "mixed")
QUERY_TYPES = ("hierarchical", "instance")
KEY_LEVELS = ("coarse", "all")


@dataclass
class RunConfig:
    # model width and attention
    dim: int = 32
    heads: int = 4
    ffn_dim: int = 64
    layers_2d: int = 2
    layers_3d: int = 2
    layers_te: int = 2
    n_lanes: int = 6  # instance queries per view (N_L)
    n_points: int = 6  # point queries per lane (N_P)
    n_te: int = 10  # traffic element queries (N_T)
    sample_points: int = 4  # deformable sampling points per head and level
    depth_bins: int = 8
    depth_min: float = 1.0
    depth_max: float = 60.0
    bev_range: tuple = (-15.0, 50.0, -15.0, 15.0, -3.0, 3.0)
    # ablation switches
    init_mode: str = "prior2d"
    query_type: str = "hierarchical"
    refine_2d: bool = True
    key_pe: bool = True
    key_levels: str = "coarse"  # feature levels used as 3D cross-attention keys: coarse | all
    detach_2d: bool = False
    topo_use_2d: bool = True
    topo_use_proj: bool = True
    use_topology: bool = True
    use_dir_loss: bool = True
    skip_2d_when_random: bool = True
    # loss weights
    w_cls: float = 2.0
    w_reg: float = 5.0
    w_te_cls: float = 2.0
    w_te_reg: float = 5.0
    w_te_giou: float = 2.0
    w_topo_ll: float = 5.0
    w_topo_lt: float = 5.0
    w_dir: float = 0.005
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # optimisation
    steps: int = 1500
    lr: float = 2e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 5.0
    batch_size: int = 4
    seed: int = 0
    log_every: int = 50
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if isinstance(self.scene, dict):
            self.scene = SceneConfig.from_dict(self.scene)
        self.bev_range = tuple(float(v) for v in self.bev_range)
        self.validate()

    @property
    def n_instances(self):
        return self.scene.n_cameras * self.n_lanes

    def key_level_indices(self):
        if self.key_levels == "all":
            return list(range(self.scene.levels))
        return [self.scene.levels - 1]

    def depth_values(self):
        if self.depth_bins == 1:
            return np.array([self.depth_min])
        return np.linspace(self.depth_min, self.depth_max, self.depth_bins)

    def validate(self):
        for name in ("dim", "heads", "ffn_dim", "n_lanes", "n_points", "n_te", "sample_points",
                     "depth_bins", "batch_size", "layers_2d", "layers_3d", "layers_te"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4:
            raise ConfigError("dim must be a multiple of 4 for the sine embeddings")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}")
        if self.query_type not in QUERY_TYPES:
            raise ConfigError(f"query_type must be one of {QUERY_TYPES}")
        if self.key_levels not in KEY_LEVELS:
            raise ConfigError(f"key_levels must be one of {KEY_LEVELS}")
        if self.init_mode == "mixed" and self.n_lanes < 2:
            raise ConfigError("mixed init needs at least two instance queries per view")
        if self.n_points != self.scene.n_points:
            raise ConfigError("n_points must equal scene.n_points")
        if self.n_instances < self.scene.max_lanes:
            raise ConfigError(
                f"capacity n_cameras*n_lanes={self.n_instances} below max lanes {self.scene.max_lanes}")
        if not 0 < self.depth_min <= self.depth_max:
            raise ConfigError("depth bins must be positive and increasing")
        x0, x1, y0, y1, z0, z1 = self.bev_range
        if not (x0 < x1 and y0 < y1 and z0 < z1):
            raise ConfigError(f"empty BEV range {self.bev_range}")

    def to_dict(self):
        d = asdict(self)
        d["bev_range"] = list(self.bev_range)
        d["scene"] = self.scene.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes):
        d = self.to_dict()
        scene_changes = changes.pop("scene", None)
        d.update(changes)
        if scene_changes:
            d["scene"].update(scene_changes)
        return RunConfig.from_dict(d)


def bev_normalize(points, bev_range):
    lo = np.array(bev_range[0::2])
    hi = np.array(bev_range[1::2])
    return (np.asarray(points) - lo) / (hi - lo)


def bev_denormalize(unit, bev_range):
    lo = np.array(bev_range[0::2])
    hi = np.array(bev_range[1::2])
    return np.asarray(unit) * (hi - lo) + lo
