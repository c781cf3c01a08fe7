"""Environment interface shared by the four tasks.

Environments are stateless objects holding configuration; the simulation
state is a plain float array with one row per lane, so a single call steps
many independent episodes. Every public method also accepts a single 1-D
state (and 1-D action / parameter vectors) and then returns unbatched values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from ..core import ConfigError, normalize

DT = 0.002


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    mu_dim: int
    mu_bounds: np.ndarray  # (mu_dim, 2), physical units
    action_bounds: np.ndarray  # (act_dim, 2), N or N*m
    state_dim: int
    target_dim: int  # size of the parameter vector fed to UP / predicted by OSI
    dt: float = DT
    frame_skip: int = 1
    max_steps: int = 1000

    def __post_init__(self):
        for name in ("obs_dim", "act_dim", "mu_dim", "state_dim", "target_dim", "frame_skip", "max_steps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: np.ndarray
    terminated: np.ndarray
    info: dict = field(default_factory=dict)


def update_dataclass(obj, overrides: Optional[dict]):
    """Return a copy of dataclass ``obj`` with ``overrides`` applied (unknown keys rejected)."""
    if not overrides:
        return obj
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = set(overrides) - names
    if unknown:
        raise ConfigError(f"unknown {type(obj).__name__} keys: {sorted(unknown)}")
    fixed = {}
    for k, v in overrides.items():
        cur = getattr(obj, k)
        if isinstance(cur, tuple) and isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        fixed[k] = v
    return dataclasses.replace(obj, **fixed)


class Env:
    """Base class; subclasses implement the ``_``-prefixed batched methods."""

    spec: EnvSpec
    config: Any

    # -- parameters ---------------------------------------------------------

    @property
    def mu_bounds(self) -> np.ndarray:
        return self.spec.mu_bounds

    def sample_mu(self, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
        """Uniform draw over the training bounds."""
        lo, hi = self.mu_bounds[:, 0], self.mu_bounds[:, 1]
        size = (self.spec.mu_dim,) if n is None else (n, self.spec.mu_dim)
        return lo + (hi - lo) * rng.random(size)

    def normalize_mu(self, mu) -> np.ndarray:
        return normalize(mu, self.mu_bounds)

    @property
    def target_bounds(self) -> np.ndarray:
        """Physical bounds of each component of the parameter target."""
        return self.mu_bounds

    def target(self, state, mu) -> np.ndarray:
        """Normalized parameter vector given to UP and regressed by OSI."""
        state, mu, squeeze = self._batch(state, mu)
        out = self._target(state, mu)
        return out[0] if squeeze else out

    def _target(self, state, mu):
        return normalize(mu, self.mu_bounds)

    def target_to_mu(self, z) -> np.ndarray:
        """Physical model parameters encoded in a (normalized) target vector."""
        z = np.asarray(z, dtype=float)
        lo, hi = self.mu_bounds[:, 0], self.mu_bounds[:, 1]
        return lo + (z[..., : self.spec.mu_dim] + 1.0) * 0.5 * (hi - lo)

    # -- actions ------------------------------------------------------------

    def scale_action(self, a_norm) -> np.ndarray:
        """Map normalized actions in [-1, 1] to physical units (clipping first)."""
        a = np.clip(np.asarray(a_norm, dtype=float), -1.0, 1.0)
        lo, hi = self.spec.action_bounds[:, 0], self.spec.action_bounds[:, 1]
        return lo + (a + 1.0) * 0.5 * (hi - lo)

    def unscale_action(self, a_phys) -> np.ndarray:
        lo, hi = self.spec.action_bounds[:, 0], self.spec.action_bounds[:, 1]
        return 2.0 * (np.asarray(a_phys, dtype=float) - lo) / (hi - lo) - 1.0

    def clamp_action(self, a_phys) -> np.ndarray:
        lo, hi = self.spec.action_bounds[:, 0], self.spec.action_bounds[:, 1]
        return np.clip(np.asarray(a_phys, dtype=float), lo, hi)

    # -- batched public API -------------------------------------------------

    def _batch(self, state, *vectors):
        state = np.asarray(state, dtype=float)
        squeeze = state.ndim == 1
        if squeeze:
            state = state[None]
        B = state.shape[0]
        out = []
        for v in vectors:
            v = np.asarray(v, dtype=float)
            if v.ndim == 1:
                v = np.broadcast_to(v, (B, v.shape[0]))
            elif v.ndim == 0:
                v = np.full((B, 1), float(v))
            out.append(np.ascontiguousarray(v))
        return (state, *out, squeeze)

    def reset(self, mu, rng: np.random.Generator) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        squeeze = mu.ndim == 1
        mu2 = mu[None] if squeeze else mu
        if mu2.shape[1] != self.spec.mu_dim:
            raise ValueError(f"parameter dim {mu2.shape[1]} != {self.spec.mu_dim}")
        s = self._reset(mu2, rng)
        return s[0] if squeeze else s

    def step(self, state, action, mu) -> StepResult:
        """Advance by one control step (``frame_skip`` integrator steps).

        ``action`` is in physical units and is clamped to the action bounds.
        """
        state, action, mu, squeeze = self._batch(state, action, mu)
        if not np.all(np.isfinite(state)):
            raise FloatingPointError("non-finite environment state")
        if action.shape[1] != self.spec.act_dim:
            raise ValueError(f"action dim {action.shape[1]} != {self.spec.act_dim}")
        if mu.shape[1] != self.spec.mu_dim:
            raise ValueError(f"parameter dim {mu.shape[1]} != {self.spec.mu_dim}")
        action = self.clamp_action(action)
        s = state
        info: dict = {}
        for _ in range(self.spec.frame_skip):
            s, info = self._integrate(s, action, mu, info)
        reward = self._reward(s, action)
        term = self._terminated(s)
        res = StepResult(s, reward, term, info)
        if squeeze:
            res = StepResult(s[0], reward[0], term[0], {k: v[0] for k, v in info.items()})
        return res

    def observe(self, state) -> np.ndarray:
        state, squeeze = self._batch(state)
        o = self._observe(state)
        return o[0] if squeeze else o

    def reward(self, state, action) -> np.ndarray:
        state, action, squeeze = self._batch(state, action)
        r = self._reward(state, self.clamp_action(action))
        return r[0] if squeeze else r

    def terminated(self, state) -> np.ndarray:
        state, squeeze = self._batch(state)
        t = self._terminated(state)
        return t[0] if squeeze else t

    def task_metric(self, state) -> np.ndarray:
        """Per-lane scalar tracked during evaluation (task specific, default 0)."""
        state, squeeze = self._batch(state)
        m = self._task_metric(state)
        return m[0] if squeeze else m

    def _task_metric(self, state):
        return np.zeros(state.shape[0])

    # -- policy input hints -------------------------------------------------

    angle_obs_dims: tuple = ()  # unwrapped angle observations, fed to networks as sin/cos

    def obs_scale(self) -> np.ndarray:
        """Typical magnitude of each observation entry (policy input scaling)."""
        return np.ones(self.spec.obs_dim)

    # -- evaluation ---------------------------------------------------------

    metric_reduce = "max"  # how the per-step task metric is summarized over a rollout
    perf_kind = "reward"  # "reward": normalized return; "metric": raw task metric

    def performance(self, total_reward, metric) -> np.ndarray:
        if self.perf_kind == "reward":
            return np.asarray(total_reward, dtype=float) / self.reference_return()
        return np.asarray(metric, dtype=float)

    def reference_return(self) -> float:
        raise NotImplementedError

    # -- subclass hooks -----------------------------------------------------

    def _reset(self, mu, rng):
        raise NotImplementedError

    def _integrate(self, state, action, mu, info):
        raise NotImplementedError

    def _reward(self, state, action):
        raise NotImplementedError

    def _terminated(self, state):
        raise NotImplementedError

    def _observe(self, state):
        raise NotImplementedError
