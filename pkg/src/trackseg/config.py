"""Versioned run configuration: one JSON file drives every command.

Parsing is strict: unknown keys and version mismatches are rejected, and
serialize -> parse is the identity, so any run can be reproduced from its
config echo. Every artifact a command writes embeds the config hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

from .model import ModelConfig
from .mot import MotConfig
from .synthdata import SHAPES
from .track import TrackOptions
from .train import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    """Synthetic-scene generation recipe used by the data generator."""

    preset: str = "default"  # "default" | "oracle-study"
    n_sequences: int = 8
    n_frames: int = 24
    n_objects: int = 1
    canvas: tuple[int, int] = (192, 256)
    shapes: tuple[str, ...] = SHAPES
    size_range: tuple[float, float] = (36.0, 64.0)
    aspect_range: tuple[float, float] = (1.0, 2.5)
    speed_range: tuple[float, float] = (0.5, 3.0)
    rotation_rate: tuple[float, float] = (0.0, 0.0)
    well_separated: bool = False
    noise_sigma: float = 6.0

    def __post_init__(self):
        if self.preset not in ("default", "oracle-study"):
            raise ConfigError(f"unknown gen preset {self.preset!r}")


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    variant: str = "three_branch"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    track: TrackOptions = field(default_factory=TrackOptions)
    mot: MotConfig = field(default_factory=MotConfig)
    gen: GenConfig = field(default_factory=GenConfig)

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version} not supported (expected {CONFIG_VERSION})")
        if self.variant not in ("two_branch", "three_branch"):
            raise ConfigError(f"unknown variant {self.variant!r}")


def _coerce(value, hint):
    """Coerce JSON-decoded values back to the annotated field types."""
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"expected an object for {hint.__name__}, got {type(value).__name__}")
        return _from_dict(hint, value)
    if origin is tuple and isinstance(value, (list, tuple)):
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0]) for v in value)
        if args and len(args) == len(value):
            return tuple(_coerce(v, a) for v, a in zip(value, args))
        return tuple(value)
    if origin is typing.Union:
        for arg in typing.get_args(hint):
            if arg is type(None) and value is None:
                return None
        for arg in typing.get_args(hint):
            if arg is not type(None):
                try:
                    return _coerce(value, arg)
                except (TypeError, ValueError):
                    continue
        return value
    if hint is float and isinstance(value, (int, float)):
        return float(value)
    return value


def _from_dict(cls, data: dict):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {cls.__name__}: {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k]) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data)


def config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def load_config(path) -> RunConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def dump_config(config: RunConfig) -> str:
    return json.dumps(config_to_dict(config), indent=2, sort_keys=True)


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(dump_config(config).encode()).hexdigest()[:16]
