"""Run configuration: one JSON document with a section per stage.

Every section is validated against its dataclass before any work starts;
unknown keys are rejected with their dotted path in the message.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .core import Box3D, ClassId, RangeConfig
from .detector.network import NetworkConfig
from .detector.training import CoralConfig, TrainConfig
from .errors import ConfigError, PillarCoralError
from .evaluation import EvalConfig
from .pillar import PillarGridConfig, desk_grid
from .scenegen import GapConfig, LidarConfig, SceneConfig, default_ego_footprint


@dataclass(frozen=True)
class GenSection:
    n_frames: int = 200
    n_eval_frames: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1 or self.n_eval_frames < 0:
            raise ConfigError("gen.n_frames must be >= 1 and gen.n_eval_frames >= 0")


@dataclass(frozen=True)
class EvalSection:
    score_threshold: float = 0.3
    nms_iou: float = 0.5
    min_gt_points: int = 0
    metrics: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError("eval.score_threshold must lie in [0, 1]")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ConfigError("eval.nms_iou must lie in (0, 1]")
        if self.min_gt_points < 0:
            raise ConfigError("eval.min_gt_points must be >= 0")


@dataclass(frozen=True)
class StatsSection:
    n_range_bins: int = 20
    n_azimuth_bins: int = 36
    max_range: float = 50.0
    log_scale: bool = False
    svg: bool = False

    def __post_init__(self):
        if self.n_range_bins < 1 or self.n_azimuth_bins < 1:
            raise ConfigError("stats bin counts must be >= 1")
        if self.max_range <= 0:
            raise ConfigError("stats.max_range must be > 0")


def desk_lidar() -> LidarConfig:
    return LidarConfig(32, (math.radians(-25.0), math.radians(5.0)), math.radians(0.5), 12.0, 1.8)


@dataclass(frozen=True)
class RunConfig:
    gen: GenSection = field(default_factory=GenSection)
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(lidar=desk_lidar()))
    gap: GapConfig = field(default_factory=GapConfig)
    grid: PillarGridConfig = field(default_factory=desk_grid)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    coral: CoralConfig = field(default_factory=CoralConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    stats: StatsSection = field(default_factory=StatsSection)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


# -- dict <-> dataclass ------------------------------------------------------------

# nested dataclass fields and fields excluded from files
_NESTED = {
    (SceneConfig, "area"): RangeConfig,
    (SceneConfig, "lidar"): LidarConfig,
    (PillarGridConfig, "range"): RangeConfig,
    (EvalSection, "metrics"): EvalConfig,
}
_SKIP = {(SceneConfig, "seed"), (GapConfig, "ego_footprint")}
_TUPLE_FIELDS = {
    (SceneConfig, "n_cars"), (SceneConfig, "n_pedestrians"), (LidarConfig, "vertical_fov"),
    (GapConfig, "box_shift"), (PillarGridConfig, "pillar_size"),
}


def _to_plain(obj) -> Any:
    if isinstance(obj, Box3D):
        return {"center": list(obj.center), "size": list(obj.size), "yaw": obj.yaw}
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in fields(obj):
            if (type(obj), f.name) in _SKIP:
                continue
            out[f.name] = _to_plain(getattr(obj, f.name))
        return out
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str, bool)):
        return obj.value
    return obj


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls) if (cls, f.name) not in _SKIP}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key '{path}.{key}'")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{path}.{key}")
        elif (cls, key) in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}.{key}: expected a list")
            kwargs[key] = tuple(value)
        elif cls is SceneConfig and key == "ego_footprint":
            kwargs[key] = _footprint(value, f"{path}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except (TypeError, ValueError, PillarCoralError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _footprint(value, path: str) -> Box3D:
    if not isinstance(value, dict) or set(value) - {"center", "size", "yaw"}:
        raise ConfigError(f"{path}: expected {{center, size, yaw}}")
    try:
        return Box3D(tuple(value["center"]), tuple(value["size"]), float(value.get("yaw", 0.0)), ClassId.Car)
    except (KeyError, TypeError, ValueError, PillarCoralError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


_SECTIONS = {
    "gen": GenSection, "scene": SceneConfig, "gap": GapConfig, "grid": PillarGridConfig,
    "network": NetworkConfig, "coral": CoralConfig, "train": TrainConfig, "eval": EvalSection,
    "stats": StatsSection,
}


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be an object")
    base = RunConfig()
    merged = base.to_dict()
    for key, value in data.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config key '{key}'")
        merged[key] = _merge(merged[key], value, key)
    kwargs = {name: _build(cls, merged[name], name) for name, cls in _SECTIONS.items()}
    if "ego_footprint" not in merged["scene"]:
        kwargs["scene"] = replace(kwargs["scene"], ego_footprint=default_ego_footprint(kwargs["scene"].lidar.sensor_height))
    return RunConfig(**kwargs)


def _merge(base, override, path: str):
    if isinstance(base, dict) and isinstance(override, dict):
        out = dict(base)
        for k, v in override.items():
            out[k] = _merge(base[k], v, f"{path}.{k}") if k in base else v
        return out
    return override


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            from .errors import IoError
            raise IoError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    for item in overrides or ():
        apply_override(data, item)
    return config_from_dict(data)


def apply_override(data: dict, item: str) -> None:
    """Apply one ``section.key[.sub]=value`` override in place; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) < 2 or not all(parts):
        raise ConfigError(f"override key {key!r} must be section.key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = value


def network_from_dict(data: dict) -> NetworkConfig:
    return _build(NetworkConfig, data, "network")


def grid_from_dict(data: dict) -> PillarGridConfig:
    return _build(PillarGridConfig, data, "grid")
