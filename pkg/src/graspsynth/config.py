"""Pipeline configuration: dataclass sections read from an INI-style key/value file.

Lengths are in meters, angles in degrees unless a key says otherwise.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gripper import GripperGeometry
from .regressor import TrainConfig
from .selection import SelectionConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    table_height: float = 0.0
    workspace: float = 0.6
    samples_per_m2: float = 60000.0
    voxel_leaf: float = 0.005
    object_dir: str = ""


@dataclass(frozen=True)
class CameraConfig:
    width: int = 320
    height: int = 240
    vfov: float = 60.0
    back: float = 0.6
    up: float = 0.8
    pitch: float = 45.0
    sigma: float = 0.003


@dataclass(frozen=True)
class ContactConfig:
    threshold: float = 0.7
    anchors_per_object: int = 8
    partners_per_anchor: int = 1
    approach_count: int = 8
    normal_neighbors: int = 10
    slab: float = 0.003
    perturb_translation: float = 0.004
    perturb_rotation: float = 0.1
    reevaluate_antipodal: bool = True


@dataclass(frozen=True)
class AnnotationConfig:
    boundaries: tuple = (0.5, 2.0, 4.0)
    points_per_record: int = 25600


@dataclass(frozen=True)
class PipelineConfig:
    gripper: GripperGeometry = field(default_factory=GripperGeometry)
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    contact: ContactConfig = field(default_factory=ContactConfig)
    annotation: AnnotationConfig = field(default_factory=AnnotationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        parts = {}
        for f in dataclasses.fields(cls):
            sub = f.default_factory()
            parts[f.name] = _build(type(sub), d.get(f.name, {}), f.name)
        return cls(**parts)


def _coerce(value, default, key: str):
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            v = str(value).strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [x for x in value.replace(",", " ").split()]
            return tuple(type(default[0])(x) if default else float(x) for x in value)
        if default is None:
            if value in (None, "", "none", "None"):
                return None
            return int(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e


def _build(klass, values: dict, section: str):
    known = {f.name: f for f in dataclasses.fields(klass)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    defaults = klass()
    kwargs = {k: _coerce(v, getattr(defaults, k), f"{section}.{k}") for k, v in values.items()}
    try:
        return klass(**{**{k: getattr(defaults, k) for k in known}, **kwargs})
    except ValueError as e:
        raise ConfigError(f"[{section}]: {e}") from e


def load_config(path: Optional[str]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    cp = configparser.ConfigParser()
    try:
        ok = cp.read(path)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    if not ok:
        raise ConfigError(f"config file not found: {path}")
    sections = {f.name for f in dataclasses.fields(PipelineConfig)}
    extra = set(cp.sections()) - sections
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    return PipelineConfig.from_dict({s: dict(cp[s]) for s in cp.sections()})


def derive_seed(seed: int, *keys: int) -> int:
    """Independent, reproducible child seed for a stage/scene."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint32)[0])
