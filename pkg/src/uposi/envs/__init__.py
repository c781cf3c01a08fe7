"""Parameterized control tasks with in-repo analytic physics."""

from __future__ import annotations

from typing import Optional

from ..core import ConfigError
from .arm import Arm, ArmConfig
from .base import DT, Env, EnvSpec, StepResult, update_dataclass
from .hopper import Hopper, HopperConfig
from .pendulum import CartPole, CartPoleConfig, DoublePendulum, DoublePendulumConfig

TASKS = {
    "dpend": (DoublePendulum, DoublePendulumConfig),
    "arm": (Arm, ArmConfig),
    "hopper": (Hopper, HopperConfig),
    "cartpole": (CartPole, CartPoleConfig),
}


def make_env(task: str, overrides: Optional[dict] = None) -> Env:
    """Build a task environment, applying config overrides by field name."""
    try:
        cls, cfg_cls = TASKS[task]
    except KeyError:
        raise ConfigError(f"unknown task {task!r}; choose from {sorted(TASKS)}") from None
    return cls(update_dataclass(cfg_cls(), overrides))


__all__ = [
    "Arm", "ArmConfig", "CartPole", "CartPoleConfig", "DT", "DoublePendulum", "DoublePendulumConfig",
    "Env", "EnvSpec", "Hopper", "HopperConfig", "StepResult", "TASKS", "make_env",
]
