"""Run configuration shared by every CLI stage.

A YAML file with optional sections ``scene``, ``system``, ``data``,
``dictionary``, ``identify``, ``ot``, ``train``, ``fingerprint`` and ``sweep``.
Missing keys take the dataclass defaults below; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .channel import SystemConfig
from .estimator import DictionaryConfig
from .identify import IdentifierConfig
from .nn import DEFAULT_HIDDEN, TrainConfig
from .ot import OtConfig
from .scene import SceneMap, default_scene, load_scene


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 1800
    n_test: int = 1800
    train_seed: int = 1
    test_seed: int = 2
    noise_std: float = 0.0
    reflection_coeff: float = 0.7
    max_order: int = 2


@dataclass(frozen=True)
class LabelConfig:
    delta_d: float = 0.5
    snap: bool = False


@dataclass(frozen=True)
class FingerprintConfig:
    spacing: float = 0.5
    cap: int = 1800
    seed: int = 3


@dataclass(frozen=True)
class SweepConfig:
    grid: tuple = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0)
    retrain: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    scene: str | None = None
    system: SystemConfig = field(default_factory=SystemConfig)
    data: DataConfig = field(default_factory=DataConfig)
    dictionary: DictionaryConfig = field(default_factory=DictionaryConfig)
    identify: IdentifierConfig = field(default_factory=IdentifierConfig)
    ot: OtConfig = field(default_factory=OtConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: tuple = DEFAULT_HIDDEN
    fingerprint: FingerprintConfig = field(default_factory=FingerprintConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def load_scene(self) -> SceneMap:
        return default_scene() if self.scene is None else load_scene(self.scene)

    def to_dict(self) -> dict:
        return _plain(self)

    def digest(self) -> str:
        """Short content hash used as the provenance string of every output."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **sections) -> "PipelineConfig":
        return dataclasses.replace(self, **sections)


_SECTIONS = {
    "system": SystemConfig,
    "data": DataConfig,
    "dictionary": DictionaryConfig,
    "identify": IdentifierConfig,
    "ot": OtConfig,
    "label": LabelConfig,
    "train": TrainConfig,
    "fingerprint": FingerprintConfig,
    "sweep": SweepConfig,
}


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (tuple, list)):
        return [_plain(x) for x in obj]
    return obj


def _build(cls, raw: dict):
    raw = dict(raw or {})
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = fields[name].default
        if isinstance(default, enum.Enum):
            value = type(default)(value)
        elif isinstance(default, tuple) and value is not None:
            value = tuple(value)
        elif isinstance(default, float) and isinstance(value, (int, str)):
            value = float(value)
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> PipelineConfig:
    raw = dict(raw or {})
    unknown = set(raw) - set(_SECTIONS) - {"scene", "hidden"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {name: _build(cls, raw[name]) for name, cls in _SECTIONS.items() if name in raw}
    if "scene" in raw:
        kwargs["scene"] = raw["scene"]
    if "hidden" in raw:
        kwargs["hidden"] = tuple(int(h) for h in raw["hidden"])
    return PipelineConfig(**kwargs)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    raw = yaml.safe_load(path.read_text()) or {}
    cfg = config_from_dict(raw)
    if cfg.scene is not None and not Path(cfg.scene).is_absolute():
        cfg = cfg.replace(scene=str((path.parent / cfg.scene).resolve()))
    return cfg


def override(cfg: PipelineConfig, section: str, **values) -> PipelineConfig:
    """Copy of ``cfg`` with some fields of one section replaced (CLI flags)."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    current = getattr(cfg, section)
    return cfg.replace(**{section: dataclasses.replace(current, **values)})
