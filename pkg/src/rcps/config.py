"""Declarative run configuration.

A run is described by one nested mapping (YAML or JSON on disk) whose
sections mirror the dataclasses of the individual modules. Resolution order
is command line > config file > dataclass defaults. Unknown keys anywhere in
the tree are rejected, and the error names every offending dotted path.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .inference import SlidingWindowConfig
from .network import NetworkConfig
from .trainer import TrainConfig
from .volume_io import PhantomSpec


class ConfigError(ValueError):
    """Invalid configuration; ``keys`` lists the offending dotted paths."""

    def __init__(self, message: str, keys=()):
        super().__init__(message)
        self.keys = tuple(keys)


@dataclass(frozen=True)
class DataConfig:
    """Which cases to train on.

    ``labeled_ratio`` (if set) keeps ``round(ratio * pool)`` labeled cases,
    where the pool is labeled + unlabeled; surplus labeled cases have their
    labels dropped and join the unlabeled split.
    """

    labeled_ratio: Optional[float] = None

    def __post_init__(self):
        if self.labeled_ratio is not None and not 0 < self.labeled_ratio <= 1:
            raise ValueError("labeled_ratio must lie in (0, 1]")


@dataclass(frozen=True)
class RunConfig:
    phantoms: PhantomSpec = field(default_factory=PhantomSpec)
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: SlidingWindowConfig = field(default_factory=SlidingWindowConfig)


def _nested_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if dataclasses.is_dataclass(hints[f.name])}


def unknown_keys(cls, data: Mapping, prefix: str = "") -> list:
    """Dotted paths in ``data`` that do not correspond to a field of ``cls``."""
    names = {f.name for f in dataclasses.fields(cls)}
    nested = _nested_types(cls)
    bad = []
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            bad.append(path)
        elif key in nested:
            if not isinstance(value, Mapping):
                bad.append(path)
            else:
                bad += unknown_keys(nested[key], value, path + ".")
    return bad


def _build(cls, data: Mapping, prefix: str):
    nested = _nested_types(cls)
    kwargs = {}
    for key, value in data.items():
        if key in nested:
            kwargs[key] = _build(nested[key], value, f"{prefix}{key}.")
        else:
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        section = prefix.rstrip(".") or "<root>"
        raise ConfigError(f"{section}: {exc}", [section]) from exc


def from_dict(data: Optional[Mapping], cls=RunConfig):
    data = dict(data or {})
    bad = unknown_keys(cls, data)
    if bad:
        raise ConfigError("unknown configuration keys: " + ", ".join(bad), bad)
    return _build(cls, data, "")


def to_dict(cfg) -> dict:
    """Plain nested dict (tuples as lists) suitable for YAML or JSON."""

    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    return plain(dataclasses.asdict(cfg))


def deep_merge(base: Mapping, override: Mapping) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def dotted_to_nested(flat: Mapping[str, Any]) -> dict:
    """``{"train.loss.alpha": 0.2}`` -> ``{"train": {"loss": {"alpha": 0.2}}}``."""
    out: dict = {}
    for key, value in flat.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def resolve(config_path=None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then the config file, then dotted command-line overrides."""
    merged = read_config_file(config_path) if config_path is not None else {}
    if overrides:
        merged = deep_merge(merged, dotted_to_nested(overrides))
    return from_dict(merged)


def dump(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
    return path
