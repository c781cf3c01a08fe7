"""Shared value types: model parameters, history windows, rollouts, RNG streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

HISTORY_LEN = 3


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator derived from ``seed`` and a spawn path.

    ``make_rng(7, 3)`` and ``make_rng(7, 4)`` are statistically independent
    streams, and the same ``(seed, keys)`` always yields the same stream.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit integer seed from ``rng`` for deriving sub-streams."""
    return int(rng.integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# Model parameters
# ---------------------------------------------------------------------------


def _check_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2:
        raise ConfigError(f"bounds must have shape (d, 2), got {b.shape}")
    if np.any(b[:, 1] <= b[:, 0]):
        raise ConfigError(f"degenerate bounds (need low < high): {b.tolist()}")
    return b


def normalize(values, bounds) -> np.ndarray:
    """Affine map sending ``low -> -1`` and ``high -> +1`` along the last axis.

    Values outside the bounds are extrapolated linearly.
    """
    b = _check_bounds(bounds)
    v = np.asarray(values, dtype=float)
    if v.shape[-1] != b.shape[0]:
        raise ConfigError(f"dimension mismatch: values {v.shape[-1]} vs bounds {b.shape[0]}")
    low, high = b[:, 0], b[:, 1]
    return 2.0 * (v - low) / (high - low) - 1.0


def denormalize(normed, bounds) -> np.ndarray:
    b = _check_bounds(bounds)
    z = np.asarray(normed, dtype=float)
    if z.shape[-1] != b.shape[0]:
        raise ConfigError(f"dimension mismatch: normalized {z.shape[-1]} vs bounds {b.shape[0]}")
    low, high = b[:, 0], b[:, 1]
    return low + (z + 1.0) * 0.5 * (high - low)


@dataclass(frozen=True)
class ModelParams:
    """Dynamics parameters with their training bounds.

    ``values`` may lie outside ``bounds`` (extrapolation experiments);
    ``in_range`` records whether they do.
    """

    values: np.ndarray
    bounds: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=float)).copy()
        b = _check_bounds(self.bounds).copy()
        if v.shape != (b.shape[0],):
            raise ConfigError(f"values shape {v.shape} does not match {b.shape[0]} bounds")
        v.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "bounds", b)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def in_range(self) -> bool:
        return bool(np.all((self.values >= self.bounds[:, 0]) & (self.values <= self.bounds[:, 1])))

    @property
    def normalized(self) -> np.ndarray:
        return normalize(self.values, self.bounds)


def normalize_mu(mu: ModelParams) -> np.ndarray:
    return normalize(mu.values, mu.bounds)


def denormalize_mu(normed, bounds) -> ModelParams:
    return ModelParams(denormalize(normed, bounds), bounds)


# ---------------------------------------------------------------------------
# History window
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HistorySegment:
    """The last ``h`` (observation, action) pairs, oldest first, plus the current observation.

    Flattened layout (stable)::

        [obs_{t-h}, act_{t-h}, ..., obs_{t-1}, act_{t-1}, obs_t]
    """

    past_obs: np.ndarray  # (h, obs_dim)
    past_act: np.ndarray  # (h, act_dim)
    current_obs: np.ndarray  # (obs_dim,)

    def __post_init__(self):
        po = np.asarray(self.past_obs, dtype=float)
        pa = np.asarray(self.past_act, dtype=float)
        co = np.asarray(self.current_obs, dtype=float)
        if po.ndim != 2 or pa.ndim != 2 or co.ndim != 1:
            raise ValueError("past_obs/past_act must be 2-D and current_obs 1-D")
        if po.shape[0] != pa.shape[0]:
            raise ValueError(f"{po.shape[0]} observations but {pa.shape[0]} actions in history")
        if po.shape[1] != co.shape[0]:
            raise ValueError("observation dimension mismatch in history")
        object.__setattr__(self, "past_obs", po)
        object.__setattr__(self, "past_act", pa)
        object.__setattr__(self, "current_obs", co)

    @classmethod
    def zeros(cls, obs_dim: int, act_dim: int, h: int = HISTORY_LEN) -> "HistorySegment":
        return cls(np.zeros((h, obs_dim)), np.zeros((h, act_dim)), np.zeros(obs_dim))

    @property
    def h(self) -> int:
        return self.past_obs.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.current_obs.shape[0]

    @property
    def act_dim(self) -> int:
        return self.past_act.shape[1]

    @property
    def flat_dim(self) -> int:
        return history_dim(self.obs_dim, self.act_dim, self.h)


def history_dim(obs_dim: int, act_dim: int, h: int = HISTORY_LEN) -> int:
    return (h + 1) * obs_dim + h * act_dim


def history_push(H: HistorySegment, obs, act, next_obs) -> HistorySegment:
    """Evict the oldest pair, append ``(obs, act)`` and make ``next_obs`` current."""
    obs = np.asarray(obs, dtype=float).reshape(-1)
    act = np.asarray(act, dtype=float).reshape(-1)
    next_obs = np.asarray(next_obs, dtype=float).reshape(-1)
    if obs.shape[0] != H.obs_dim or next_obs.shape[0] != H.obs_dim:
        raise ValueError(f"observation dim {obs.shape[0]}/{next_obs.shape[0]} != {H.obs_dim}")
    if act.shape[0] != H.act_dim:
        raise ValueError(f"action dim {act.shape[0]} != {H.act_dim}")
    past_obs = np.vstack([H.past_obs[1:], obs[None]])
    past_act = np.vstack([H.past_act[1:], act[None]])
    return HistorySegment(past_obs, past_act, next_obs)


def flatten_history(H: HistorySegment) -> np.ndarray:
    parts = []
    for o, a in zip(H.past_obs, H.past_act):
        parts.append(o)
        parts.append(a)
    parts.append(H.current_obs)
    return np.concatenate(parts)


class HistoryBuffer:
    """Batched history windows for ``n`` independent lanes.

    Same layout and FIFO semantics as :class:`HistorySegment`; used by the
    vectorized rollout loops. ``count`` tracks how many real pairs each lane
    holds since its last reset (the window is valid once ``count >= h``).
    """

    def __init__(self, n: int, obs_dim: int, act_dim: int, h: int = HISTORY_LEN):
        self.n, self.obs_dim, self.act_dim, self.h = n, obs_dim, act_dim, h
        self.past_obs = np.zeros((n, h, obs_dim))
        self.past_act = np.zeros((n, h, act_dim))
        self.current_obs = np.zeros((n, obs_dim))
        self.count = np.zeros(n, dtype=np.int64)

    @property
    def flat_dim(self) -> int:
        return history_dim(self.obs_dim, self.act_dim, self.h)

    def reset(self, lanes, obs) -> None:
        lanes = np.asarray(lanes)
        self.past_obs[lanes] = 0.0
        self.past_act[lanes] = 0.0
        self.current_obs[lanes] = obs
        self.count[lanes] = 0

    def push(self, act, next_obs) -> None:
        """Push ``(current_obs, act)`` on every lane and advance to ``next_obs``."""
        self.past_obs[:, :-1] = self.past_obs[:, 1:]
        self.past_act[:, :-1] = self.past_act[:, 1:]
        self.past_obs[:, -1] = self.current_obs
        self.past_act[:, -1] = act
        self.current_obs = np.array(next_obs, dtype=float, copy=True)
        self.count += 1

    @property
    def full(self) -> np.ndarray:
        return self.count >= self.h

    def flatten(self) -> np.ndarray:
        pairs = np.concatenate([self.past_obs, self.past_act], axis=2).reshape(self.n, -1)
        return np.concatenate([pairs, self.current_obs], axis=1)

    def segment(self, lane: int) -> HistorySegment:
        return HistorySegment(self.past_obs[lane].copy(), self.past_act[lane].copy(),
                              self.current_obs[lane].copy())


# ---------------------------------------------------------------------------
# Transitions and rollouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    observation: np.ndarray
    action: np.ndarray
    reward: float
    next_observation: np.ndarray
    terminated: bool


@dataclass
class Rollout:
    """One episode under a single ground-truth ``mu``; arrays are time-major."""

    mu: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    terminated: np.ndarray
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def transitions(self) -> list[Transition]:
        return list(iter(self))

    def __iter__(self) -> Iterator[Transition]:
        for t in range(len(self)):
            yield Transition(self.observations[t], self.actions[t], float(self.rewards[t]),
                             self.next_observations[t], bool(self.terminated[t]))

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))

    @classmethod
    def from_transitions(cls, mu, transitions: Sequence[Transition]) -> "Rollout":
        if any(tr.terminated for tr in transitions[:-1]):
            raise ValueError("terminated transition must be the last one in a rollout")
        return cls(
            mu=np.asarray(mu, dtype=float),
            observations=np.array([tr.observation for tr in transitions]),
            actions=np.array([tr.action for tr in transitions]),
            rewards=np.array([tr.reward for tr in transitions], dtype=float),
            next_observations=np.array([tr.next_observation for tr in transitions]),
            terminated=np.array([tr.terminated for tr in transitions], dtype=bool),
        )
