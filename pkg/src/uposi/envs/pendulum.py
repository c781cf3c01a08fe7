"""Double inverted pendulum on a cart, and cart-pole swing-up with a tip mass."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import normalize
from .base import DT, Env, EnvSpec
from .chain import GRAVITY, Body, Chain, energy, stormer_verlet, wrap_angle


# ---------------------------------------------------------------------------
# Double inverted pendulum
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DoublePendulumConfig:
    cart_mass: float = 1.0
    pole_masses: tuple = (0.5, 0.5)
    pole_lengths: tuple = (0.5, 0.5)
    mu_bounds: tuple = ((-0.6, 0.6),)
    vertical_offset_ratio: float = 0.2
    force_bound: float = 100.0
    init_noise: float = 0.01
    k1: float = 10.0
    k2: float = 1.0
    alive_bonus: float = 10.0
    cart_limit: float = 5.0
    angle_limit: float = 0.5 * math.pi
    gravity: float = GRAVITY
    dt: float = DT
    frame_skip: int = 1
    max_steps: int = 1000


class DoublePendulum(Env):
    """Cart with two serial poles; the lower pole's COM is offset by (mu, 0.2 mu).

    State: ``[x, phi1, phi2, xdot, phi1dot, phi2dot]`` where ``phi`` are
    absolute pole angles from upright (positive leans toward +x). The lateral
    COM offset ``mu`` is measured perpendicular to the pole, toward +x when
    upright. The observation is the full state.
    """

    name = "dpend"

    def __init__(self, config: DoublePendulumConfig = DoublePendulumConfig()):
        self.config = c = config
        self.spec = EnvSpec(
            name=self.name, obs_dim=6, act_dim=1, mu_dim=1,
            mu_bounds=np.asarray(c.mu_bounds, dtype=float),
            action_bounds=np.array([[-c.force_bound, c.force_bound]]),
            state_dim=6, target_dim=1, dt=c.dt, frame_skip=c.frame_skip, max_steps=c.max_steps,
        )
        self.chain = Chain(n_q=3, angle_map=[[0, 1, 0], [0, 0, 1]], angle_offset=[0.0, 0.0],
                           parents=[-1, 0], base_x=0)

    def bodies(self, mu):
        c = self.config
        off = mu[:, 0]
        (m1, m2), (L1, L2) = c.pole_masses, c.pole_lengths
        return [
            Body(c.cart_mass),
            Body(m1, m1 * L1**2 / 12.0, link=0, axial=0.5 * L1 + c.vertical_offset_ratio * off, lateral=off),
            Body(m2, m2 * L2**2 / 12.0, link=1, axial=0.5 * L2),
        ]

    def _reset(self, mu, rng):
        a = self.config.init_noise
        return rng.uniform(-a, a, size=(mu.shape[0], 6))

    def _integrate(self, state, action, mu, info):
        q, qd = state[:, :3], state[:, 3:]
        tau = np.zeros_like(q)
        tau[:, 0] = action[:, 0]
        q, qd = stormer_verlet(self.chain, q, qd, self.bodies(mu), self.config.pole_lengths, tau,
                               self.config.dt, self.config.gravity)
        return np.concatenate([q, qd], axis=1), info

    def pole_deviation(self, state):
        """Absolute angular deviation of each pole from upright, in [0, pi]."""
        return np.abs(wrap_angle(state[:, 1:3]))

    def _reward(self, state, action):
        c = self.config
        sig = self.pole_deviation(state).sum(axis=1)
        return -c.k1 * sig**2 - c.k2 * np.abs(state[:, 0]) + c.alive_bonus

    def _terminated(self, state):
        c = self.config
        sig = self.pole_deviation(state).sum(axis=1)
        return (np.abs(state[:, 0]) >= c.cart_limit) | (sig >= c.angle_limit)

    def _observe(self, state):
        return state.copy()

    def energy(self, state, mu):
        state, mu, squeeze = self._batch(state, mu)
        e = energy(self.chain, state[:, :3], state[:, 3:], self.bodies(mu), self.config.pole_lengths,
                   self.config.gravity)
        return e[0] if squeeze else e

    def equilibrium_tilt(self, mu) -> np.ndarray:
        """Lower-pole angle of the static balanced posture (upper pole vertical)."""
        c = self.config
        mu = np.asarray(mu, dtype=float)
        (m1, m2), (L1, _) = c.pole_masses, c.pole_lengths
        axial = 0.5 * L1 + c.vertical_offset_ratio * mu
        return np.arctan2(-m1 * mu, m1 * axial + m2 * L1)

    def reference_return(self) -> float:
        """Return of holding the hardest in-range static balance for the full horizon.

        A rollout scores >= 1 after normalization only if it survives and
        stays, on average, at least as close to upright as the balanced
        posture demanded by the most extreme offset in the training range.
        """
        c = self.config
        tilts = np.abs(self.equilibrium_tilt(self.spec.mu_bounds[0]))
        per_step = c.alive_bonus - c.k1 * np.max(tilts) ** 2
        return float(per_step * c.max_steps)


# ---------------------------------------------------------------------------
# Cart-pole swing-up
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CartPoleConfig:
    cart_mass: float = 1.0
    pole_mass: float = 0.5
    mu_bounds: tuple = ((0.1, 1.0), (0.2, 0.8))  # tip mass (kg), pole length (m)
    velocity_scales: tuple = (5.0, 10.0)  # cart m/s, pole rad/s
    force_bound: float = 40.0
    init_noise_std: float = 0.005
    k1: float = 1.0
    k2: float = 0.2
    w: float = 1.0
    v: float = 1.0
    a: float = 0.1
    alive_bonus: float = 10.0
    cart_limit: float = 2.0
    rotation_limit: float = 4.0 * math.pi
    gravity: float = GRAVITY
    dt: float = DT
    frame_skip: int = 1
    max_steps: int = 1000


class CartPole(Env):
    """Cart-pole with an unknown tip mass and pole length.

    State: ``[x, theta, xdot, thetadot, theta0]`` with ``theta`` the unwrapped
    pole angle from upright and ``theta0`` its initial value. Observations are
    positions only (``[x, theta]``); the parameter target is
    ``[tip mass, length, xdot, thetadot]``, all normalized, so the identifier
    also recovers the velocities.
    """

    name = "cartpole"
    angle_obs_dims = (1,)

    def __init__(self, config: CartPoleConfig = CartPoleConfig()):
        self.config = c = config
        self.spec = EnvSpec(
            name=self.name, obs_dim=2, act_dim=1, mu_dim=2,
            mu_bounds=np.asarray(c.mu_bounds, dtype=float),
            action_bounds=np.array([[-c.force_bound, c.force_bound]]),
            state_dim=5, target_dim=4, dt=c.dt, frame_skip=c.frame_skip, max_steps=c.max_steps,
        )
        self.chain = Chain(n_q=2, angle_map=[[0, 1]], angle_offset=[0.0], parents=[-1], base_x=0)

    @property
    def target_bounds(self):
        vx, vt = self.config.velocity_scales
        return np.vstack([self.spec.mu_bounds, [[-vx, vx], [-vt, vt]]])

    def _target(self, state, mu):
        phys = np.concatenate([mu, state[:, 2:4]], axis=1)
        return normalize(phys, self.target_bounds)

    def bodies(self, mu):
        c = self.config
        L = mu[:, 1]
        return [
            Body(c.cart_mass),
            Body(c.pole_mass, c.pole_mass * L**2 / 12.0, link=0, axial=0.5 * L),
            Body(mu[:, 0], 0.0, link=0, axial=L),
        ]

    def _lengths(self, mu):
        return [mu[:, 1]]

    def _reset(self, mu, rng):
        B = mu.shape[0]
        side = np.where(rng.random(B) < 0.5, -1.0, 1.0)
        theta = side * math.pi + self.config.init_noise_std * rng.standard_normal(B)
        s = np.zeros((B, 5))
        s[:, 1] = theta
        s[:, 4] = theta
        return s

    def _integrate(self, state, action, mu, info):
        q, qd = state[:, :2], state[:, 2:4]
        tau = np.zeros_like(q)
        tau[:, 0] = action[:, 0]
        q, qd = stormer_verlet(self.chain, q, qd, self.bodies(mu), self._lengths(mu), tau,
                               self.config.dt, self.config.gravity)
        return np.concatenate([q, qd, state[:, 4:5]], axis=1), info

    def reward_terms(self, sigma, x):
        c = self.config
        r_sigma = c.w * sigma**2 + c.v * np.log(sigma**2 + c.a)
        return -c.k1 * r_sigma - c.k2 * np.abs(x) + c.alive_bonus

    def _reward(self, state, action):
        return self.reward_terms(wrap_angle(state[:, 1]), state[:, 0])

    def _terminated(self, state):
        c = self.config
        return (np.abs(state[:, 1] - state[:, 4]) > c.rotation_limit) | (np.abs(state[:, 0]) > c.cart_limit)

    def _observe(self, state):
        return state[:, :2].copy()

    def energy(self, state, mu):
        state, mu, squeeze = self._batch(state, mu)
        e = energy(self.chain, state[:, :2], state[:, 2:4], self.bodies(mu), self._lengths(mu),
                   self.config.gravity)
        return e[0] if squeeze else e

    def reference_return(self) -> float:
        """Return of hanging for half the horizon and balancing upright for the other half."""
        down = float(self.reward_terms(np.array(math.pi), np.array(0.0)))
        up = float(self.reward_terms(np.array(0.0), np.array(0.0)))
        return 0.5 * (down + up) * self.config.max_steps
