"""Run configuration: nested or dotted keys from a YAML/JSON file, overridable by flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .backbone import BackboneConfig
from .hdca import HdcaConfig
from .model import IGNORE_INDEX, ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class HdcaSection:
    # an empty schedule means the no-context baseline
    region_schedule: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    context_channels: int = 16
    hidden_channels: int | None = None
    eps_region: float = 1e-6
    include_reduced: bool = False


@dataclass
class ModelSection:
    num_classes: int = 6
    ignore_index: int = IGNORE_INDEX
    seed: int = 0


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    hdca: HdcaSection = field(default_factory=HdcaSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainConfig = field(default_factory=TrainConfig)

    def model_config(self) -> ModelConfig:
        h = self.hdca
        hcfg = None
        if h.region_schedule:
            hcfg = HdcaConfig(tuple(h.region_schedule), h.context_channels, h.hidden_channels,
                              h.eps_region, h.include_reduced)
        return ModelConfig(self.model.num_classes, self.model.ignore_index, self.backbone, hcfg)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {s.name: dataclasses.asdict(getattr(self, s.name)) for s in dataclasses.fields(self)}

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _flatten(d: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping) and k in _SECTIONS and not prefix:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _section_fields(section: str) -> dict[str, dataclasses.Field]:
    cls = {"backbone": BackboneConfig, "hdca": HdcaSection, "model": ModelSection, "training": TrainConfig}[section]
    return {f.name: f for f in dataclasses.fields(cls)}


def from_dict(data: Mapping[str, Any] | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Build a RunConfig; unknown keys raise ConfigError naming the key."""
    flat = _flatten(data or {})
    flat.update(overrides or {})
    per_section: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        if name not in _section_fields(section):
            raise ConfigError(f"unknown config key {key!r}")
        per_section[section][name] = value
    try:
        cfg = RunConfig(
            backbone=BackboneConfig(**per_section["backbone"]),
            hdca=HdcaSection(**per_section["hdca"]),
            model=ModelSection(**per_section["model"]),
            training=TrainConfig(**per_section["training"]),
        )
        cfg.model_config()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def load(path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(data, overrides)


def parse_levels(text: str) -> list[int]:
    """'2,4,8' -> [2, 4, 8]; 'none' or '' -> [] (baseline)."""
    text = text.strip()
    if text.lower() in ("", "none", "baseline"):
        return []
    try:
        levels = [int(t) for t in text.split(",")]
    except ValueError:
        raise ConfigError(f"--levels: expected comma-separated integers, got {text!r}") from None
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigError(f"--levels {text}: region schedule must be strictly increasing")
    if any(s < 2 for s in levels):
        raise ConfigError(f"--levels {text}: every region count must be >= 2")
    return levels
