"""Run configuration: TOML file with strict (unknown-key rejecting) schema.

Defaults reproduce the paper-scale experiment: the 16-angle grid, 500
instances per angle, signal ratios (1, 0.5, 0.1) and the k=3 autoencoder.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .autoencoder import AutoencoderSpec
from .extractor import FfnnSpec
from .mle import MleConfig
from .quantum import PHI_GRID

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class RunConfig:
    schema_version: int = CONFIG_SCHEMA_VERSION
    seed: int = 12345
    instances: int = 500
    ratios: tuple = (1.0, 0.5, 0.1)
    phi_grid_radians: tuple = tuple(float(v) for v in PHI_GRID)
    threads: int = 1
    quiet: bool = False
    out_dir: str = "runs"
    mle: MleConfig = field(default_factory=MleConfig)
    autoencoder: AutoencoderSpec = field(default_factory=AutoencoderSpec)
    ffnn: FfnnSpec = field(default_factory=FfnnSpec)

    @property
    def phi_grid(self) -> np.ndarray:
        return np.asarray(self.phi_grid_radians, dtype=float)


def _coerce(value, target_type):
    if target_type is tuple and isinstance(value, list):
        return tuple(value)
    return value


def _fill_dataclass(cls, data: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        ftype = known[name].type
        if isinstance(ftype, str):
            ftype = tuple if ftype == "tuple" else None
        kwargs[name] = _coerce(value, ftype)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] settings: {exc}") from exc


_SECTIONS = {"mle": MleConfig, "autoencoder": AutoencoderSpec, "ffnn": FfnnSpec}


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    if data.get("schema_version", CONFIG_SCHEMA_VERSION) != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {data.get('schema_version')}")
    sections = {}
    for name, cls in _SECTIONS.items():
        raw = data.pop(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _fill_dataclass(cls, raw, name)
    top_fields = {f.name for f in fields(RunConfig)} - set(_SECTIONS)
    unknown = set(data) - top_fields
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kwargs = {name: _coerce(value, tuple if name in ("ratios", "phi_grid_radians") else None) for name, value in data.items()}
    try:
        return RunConfig(**kwargs, **sections)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(config: RunConfig) -> dict:
    out = dataclasses.asdict(config)
    out["ratios"] = list(out["ratios"])
    out["phi_grid_radians"] = list(out["phi_grid_radians"])
    for name in _SECTIONS:
        for key, value in list(out[name].items()):
            if isinstance(value, tuple):
                out[name][key] = list(value)
    return out
