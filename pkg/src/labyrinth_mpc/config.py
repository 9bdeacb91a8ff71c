"""Run configuration file: one YAML mapping with a section per module.

Example::

    sim:
      lag_tau: 0.05
    hl:
      N: 100
      solver: {tol: 1.0e-6}
    harness:
      hl_latency: 0.1

Omitted keys keep their defaults; unknown sections or keys are errors.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Any, Union

import yaml

from .harness import RunConfig
from .solver import SolverOptions

SECTIONS = ("sim", "estimator", "hl", "ll", "pid", "linmpc", "harness")
_SKIP = {"tilt_field"}  # set per seed by the harness


class ConfigError(ValueError):
    pass


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in _SKIP}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(unknown)}")
    kw = {}
    for key, val in data.items():
        if key == "solver":
            kw[key] = _build(SolverOptions, val, f"{where}.solver")
        elif isinstance(val, list):
            kw[key] = tuple(val)
        elif isinstance(val, str) and val.lower() in ("inf", "+inf", "-inf"):
            kw[key] = float(val)
        else:
            kw[key] = val
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def config_from_dict(data: dict | None) -> RunConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping of sections")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    default = RunConfig()
    kw = {}
    for name in SECTIONS:
        cls = type(getattr(default, name))
        kw[name] = _build(cls, data.get(name) or {}, name)
    return RunConfig(**kw)


def load_config(path: Union[str, Path]) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def _plain(v: Any):
    if dataclasses.is_dataclass(v):
        return {f.name: _plain(getattr(v, f.name)) for f in dataclasses.fields(v) if f.name not in _SKIP}
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def config_to_dict(cfg: RunConfig) -> dict:
    return {name: _plain(getattr(cfg, name)) for name in SECTIONS}


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
