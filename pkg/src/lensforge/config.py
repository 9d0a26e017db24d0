"""Run configuration: defaults <- config file <- command-line flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .losses import ConstraintConfig
from .optimize import FAST_SAMPLING, TOLERANCE_SAMPLING, OptimizerConfig, ToleranceSpec
from .raytrace import SamplingConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    out: str = "runs/latest"
    scenes: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    sampling: SamplingConfig = SamplingConfig()
    constraints: ConstraintConfig = ConstraintConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    tolerance: ToleranceSpec = ToleranceSpec()
    tolerance_sampling: SamplingConfig = TOLERANCE_SAMPLING
    paths: PathsConfig = PathsConfig()
    seed: int = 0
    res2x: bool = False
    lens_weight: float = 1.0
    batch_size: int = 4

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data: Dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        default = getattr(cls(), key) if key in known else None
        if is_dataclass(default):
            kwargs[key] = _merge(default, value, f"{where}.{key}")
        else:
            if isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
    return kwargs


def _merge(base, data: Dict[str, Any], where: str):
    try:
        return replace(base, **_build(type(base), data, where))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from None


def load_config_file(path) -> Dict[str, Any]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return data or {}


def resolve_config(file_data: Optional[Dict[str, Any]] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge defaults, file contents and flag overrides (later wins)."""
    cfg = RunConfig()
    if file_data:
        cfg = _merge(cfg, file_data, "config")
    if overrides:
        cfg = _merge(cfg, overrides, "flags")
    return cfg


def run_config_from_dict(data: Dict[str, Any]) -> RunConfig:
    return _merge(RunConfig(), data, "config")
