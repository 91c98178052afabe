"""Run configuration: a flat JSON document, every key required."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # spherical projection
    proj_height: int = 16
    proj_width: int = 360
    fov_up_deg: float = 15.0
    fov_down_deg: float = -15.0
    max_range: float = 100.0
    # map partitioning
    crop_radius: float = 100.0
    partition_stride: int = 1
    min_submap_points: int = 100
    # retrieval
    backend: str = "spectral"
    top_k: int = 5
    # registration
    icp_max_iterations: int = 60
    icp_tolerance: float = 1e-4
    icp_base_distance: float = 0.5
    icp_distance_slope: float = 1.0
    icp_min_distance: float = 0.5
    icp_max_distance: float = 3.0
    min_fitness: float = 0.6
    max_rmse: float = 0.1
    # event trigger
    trigger_debounce: int = 3
    trigger_cooldown: int = 20
    # training
    margin: float = 0.5
    learning_rate: float = 1e-3
    learning_rate_final: float | None = None
    epochs: int = 30
    batch_size: int = 16
    triplets_per_epoch: int = 256
    label_smoothing: float = 0.1
    mining_switch_epoch: int | None = None
    classifier_start_epoch: int | None = None
    hidden_units: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("proj_height", "proj_width", "top_k", "icp_max_iterations",
                     "partition_stride", "trigger_debounce", "epochs", "batch_size",
                     "triplets_per_epoch", "hidden_units"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("min_submap_points", "trigger_cooldown"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.fov_up_deg > self.fov_down_deg:
            raise ConfigError("fov_up_deg must exceed fov_down_deg")
        for name in ("max_range", "crop_radius", "icp_tolerance", "margin", "learning_rate",
                     "icp_min_distance"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be > 0, got {v}")
        if self.learning_rate_final is not None and not (
                math.isfinite(self.learning_rate_final) and 0 < self.learning_rate_final <= self.learning_rate):
            raise ConfigError("learning_rate_final must lie in (0, learning_rate]")
        if self.icp_max_distance < self.icp_min_distance:
            raise ConfigError("icp_max_distance must be >= icp_min_distance")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if not 0.0 <= self.min_fitness <= 1.0:
            raise ConfigError("min_fitness must be in [0, 1]")
        if self.backend not in ("learned", "spectral"):
            raise ConfigError(f"backend must be 'learned' or 'spectral', got {self.backend!r}")
        for name in ("mining_switch_epoch", "classifier_start_epoch"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= self.epochs:
                raise ConfigError(f"{name} must lie in [0, epochs]")

    @property
    def mining_epoch(self) -> int:
        if self.mining_switch_epoch is not None:
            return self.mining_switch_epoch
        return self.epochs // 2

    @property
    def classifier_epoch(self) -> int:
        if self.classifier_start_epoch is not None:
            return self.classifier_start_epoch
        return self.epochs - round(0.3 * self.epochs)

    def epoch_learning_rate(self, epoch: int) -> float:
        """Cosine decay from ``learning_rate`` to ``learning_rate_final``
        over epochs 1..epochs; constant when no final rate is set."""
        if self.learning_rate_final is None or self.epochs == 1:
            return self.learning_rate
        frac = (epoch - 1) / (self.epochs - 1)
        lo, hi = self.learning_rate_final, self.learning_rate
        return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * frac))

    def replace(self, **changes) -> RunConfig:
        d = asdict(self)
        d.update(changes)
        return RunConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)


_INT_KEYS = {f.name for f in fields(RunConfig) if f.type in ("int", "int | None")}


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    names = [f.name for f in fields(RunConfig)]
    unknown = sorted(set(doc) - set(names))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    for name in names:
        if name not in doc:
            raise ConfigError(f"missing required config key: {name}")
    for name in _INT_KEYS:
        v = doc[name]
        if v is None and name.endswith("_epoch"):
            continue
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{name} must be an integer, got {v!r}")
    try:
        return RunConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


def default_config_path() -> Path:
    return Path(str(resources.files("lidar_reloc") / "data" / "default_config.json"))


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
