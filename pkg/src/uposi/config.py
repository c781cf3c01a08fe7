"""Run configuration: per-task defaults, YAML files and ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import re
from pathlib import Path
from typing import Iterable, Optional

import yaml

from .core import ConfigError
from .envs import TASKS
from .osi import OsiConfig
from .trpo import TrpoConfig

SECTIONS = ("env", "trpo", "osi", "eval", "friction", "extrapolation")

EVAL_DEFAULTS = {"n_eval": 20, "grid_points": 25, "max_steps": None,
                 # UP-OSI evaluation after each identifier round
                 "round_grid_points": 9, "round_n_eval": 4}
FRICTION_DEFAULTS = {"region": [20.0, 30.0], "base_friction": 0.9, "steps": 2000, "mu_vary": [0.4, 0.5, 0.6],
                     "trace_mu": 0.55, "n_eval": 5, "fixed_mu": 0.9}
EXTRAPOLATION_DEFAULTS = {"points": 13, "n_eval": 20, "length": [0.8, 1.4], "mass": [1.0, 1.9]}

# desk-scale settings that differ from the generic defaults
TASK_DEFAULTS = {
    "dpend": {"trpo": {"iterations": 200, "samples_per_iteration": 30_000, "n_envs": 128}},
    "cartpole": {"trpo": {"iterations": 300, "samples_per_iteration": 30_000, "n_envs": 64},
                 "eval": {"grid_points": 5, "round_grid_points": 3}},
    "hopper": {"trpo": {"iterations": 300, "samples_per_iteration": 30_000, "n_envs": 64},
               "friction": {"region": [1.0, 3.0]}},
    "arm": {"trpo": {"iterations": 200, "samples_per_iteration": 30_000, "n_envs": 64}},
}

# full training scale
PAPER_PRESET = {
    "dpend": {"trpo": {"iterations": 500, "samples_per_iteration": 150_000}},
    "arm": {"trpo": {"iterations": 500, "samples_per_iteration": 50_000}},
    "hopper": {"trpo": {"iterations": 500, "samples_per_iteration": 75_000},
               "friction": {"region": [20.0, 30.0]}},
    "cartpole": {"trpo": {"iterations": 500, "samples_per_iteration": 70_000}},
}

PRESETS = {"desk": {}, "paper": PAPER_PRESET}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-4`` style literals as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
               |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
               |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
               |[-+]?\.(?:inf|Inf|INF)
               |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def _dataclass_defaults(cls) -> dict:
    obj = cls()
    return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def defaults(task: str, preset: str = "desk") -> dict:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = {
        "task": task,
        "env": _dataclass_defaults(TASKS[task][1]),
        "trpo": _dataclass_defaults(TrpoConfig),
        "osi": _dataclass_defaults(OsiConfig),
        "eval": dict(EVAL_DEFAULTS),
        "friction": dict(FRICTION_DEFAULTS),
        "extrapolation": dict(EXTRAPOLATION_DEFAULTS),
    }
    cfg = merge(cfg, TASK_DEFAULTS.get(task, {}))
    return merge(cfg, PRESETS[preset].get(task, {}))


def _check_keys(cfg: dict, reference: dict, where: str = "") -> None:
    for k, v in cfg.items():
        if k not in reference:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(v, dict) and isinstance(reference[k], dict):
            _check_keys(v, reference[k], f"{where}{k}.")


def parse_override(text: str):
    """``"trpo.iterations=5"`` -> ``(["trpo", "iterations"], 5)``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, value = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"empty key in override {text!r}")
    return path, _load_yaml(value)


def load_config(task: str, path=None, overrides: Iterable[str] = (), preset: str = "desk") -> dict:
    """Defaults for ``task``, then the YAML file at ``path``, then the overrides."""
    cfg = defaults(task, preset)
    reference = copy.deepcopy(cfg)
    if path is not None:
        try:
            data = _load_yaml(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
        if data.get("task", task) != task:
            raise ConfigError(f"config {path} is for task {data['task']!r}, not {task!r}")
        _check_keys(data, reference)
        cfg = merge(cfg, data)
    for text in overrides:
        keys, value = parse_override(text)
        node = cfg
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown config section in {text!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key in {text!r}")
        node[keys[-1]] = value
    # validate by construction
    trpo_config(cfg)
    osi_config(cfg)
    return cfg


def _tuples(d: dict) -> dict:
    return {k: tuple(_tuples_list(v)) if isinstance(v, list) else v for k, v in d.items()}


def _tuples_list(v):
    return [tuple(_tuples_list(x)) if isinstance(x, list) else x for x in v]


def trpo_config(cfg: dict) -> TrpoConfig:
    try:
        return TrpoConfig(**_tuples(cfg["trpo"]))
    except TypeError as exc:
        raise ConfigError(f"bad trpo config: {exc}") from exc


def osi_config(cfg: dict) -> OsiConfig:
    try:
        return OsiConfig(**_tuples(cfg["osi"]))
    except TypeError as exc:
        raise ConfigError(f"bad osi config: {exc}") from exc


def env_overrides(cfg: dict) -> dict:
    return dict(cfg.get("env", {}))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def dump_config(cfg: dict, path: Optional[str] = None) -> str:
    text = yaml.safe_dump(cfg, sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text
