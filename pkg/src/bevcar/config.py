"""Run configuration: dataclass tree, JSON files, CLI overrides, hashing.

Precedence: CLI override > config file > built-in default.  Overrides use
dotted paths (``grid.x_cells=100``).  The canonical JSON form (sorted keys)
is hashed into checkpoints so a checkpoint refuses to load under a different
configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .geometry import BevGrid
from .heads import LossConfig

SEED_ENV_VAR = "BEVCAR_SEED"


@dataclass
class GridConfig:
    x_cells: int = 200
    y_cells: int = 200
    z_cells: int = 8
    x_extent: float = 100.0
    y_extent: float = 100.0
    z_min: float = 0.0
    z_max: float = 10.0

    def build(self) -> BevGrid:
        return BevGrid(**dataclasses.asdict(self))


@dataclass
class BackboneConfig:
    name: str = "residual"
    frozen: bool = False


@dataclass
class AttentionConfig:
    heads: int = 4
    points_per_ref: int = 4


@dataclass
class ModelConfig:
    feature_width: int = 64
    use_radar: bool = True
    radar_max_points: int = 10        # per-voxel buffer capacity
    lift_blocks: int = 6
    fusion_blocks: int = 6
    ffn_expansion: int = 2


@dataclass
class LossSettings:
    alpha: float = 0.25
    gamma: float = 3.0
    w_bce: float = 1.0
    w_focal: float = 1.0

    def build(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, gamma=self.gamma,
                          w_bce=self.w_bce, w_focal=self.w_focal)


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    steps: int = 1000
    batch_size: int = 2
    cosine_decay: bool = True
    grad_clip: float = 10.0


@dataclass
class DataConfig:
    path: str = "dataset"
    val_path: str = ""                # empty: evaluate on the training set
    split_file: str = ""
    image_height: int = 448
    image_width: int = 896
    cameras: int = 6
    sweeps: int = 5
    prefetch: int = 2
    deterministic_order: bool = False


@dataclass
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSettings = field(default_factory=LossSettings)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int | None = None           # None -> $BEVCAR_SEED -> 0
    out_dir: str = "runs/default"
    eval_every: int = 200
    log_every: int = 25

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return int(self.seed)
        env = os.environ.get(SEED_ENV_VAR)
        if env is not None:
            try:
                return int(env)
            except ValueError:
                raise ConfigurationError(
                    f"{SEED_ENV_VAR}={env!r} is not an integer") from None
        return 0


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in data.items():
        if not hasattr(cfg, key):
            raise ConfigurationError(f"unknown config section or key {key!r}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigurationError(f"section {key!r} must be an object")
            for sub, subval in value.items():
                if not hasattr(current, sub):
                    raise ConfigurationError(f"unknown config key {key}.{sub}")
                setattr(current, sub, subval)
        else:
            setattr(cfg, key, value)
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _coerce(old, raw: str):
    if isinstance(old, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"expected a boolean, got {raw!r}")
    if isinstance(old, int) and not isinstance(old, bool):
        return int(raw)
    if isinstance(old, float):
        return float(raw)
    if old is None:                  # e.g. seed
        return int(raw)
    return raw


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` (or ``key=value``) strings in order."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        parts = path.strip().split(".")
        target = cfg
        for p in parts[:-1]:
            if not hasattr(target, p):
                raise ConfigurationError(f"unknown config path {path!r}")
            target = getattr(target, p)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise ConfigurationError(f"unknown config path {path!r}")
        setattr(target, leaf, _coerce(getattr(target, leaf), raw.strip()))
    return cfg


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()
