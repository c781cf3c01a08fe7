"""Two-link planar arm that throws a block of unknown mass."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .base import DT, Env, EnvSpec
from .chain import GRAVITY, Body, Chain, stormer_verlet


@dataclass(frozen=True)
class ArmConfig:
    shoulder_height: float = 1.0
    link_lengths: tuple = (0.4, 0.4)
    link_masses: tuple = (1.0, 1.0)
    mu_bounds: tuple = ((0.1, 1.0),)  # block mass (kg)
    torque_bounds: tuple = (60.0, 40.0)
    init_noise: float = 0.01
    h_target: float = 2.0
    k1: float = 10.0
    k2: float = 1e-5
    k3: float = 1e-3
    alive_bonus: float = 35.0
    floor_limit: float = -0.2
    horizontal_limit: float = 0.8
    release_mode: str = "toss"  # "toss" or "timed"
    min_attach_steps: int = 50
    max_attach_steps: int = 400
    gravity: float = GRAVITY
    dt: float = DT
    frame_skip: int = 1
    max_steps: int = 1000


# state layout
PHI1, TH2, DPHI1, DTH2, BX, BZ, BVX, BVZ, ATTACHED, CLOCK = range(10)


class Arm(Env):
    """Shoulder at ``(0, shoulder_height)``; the block starts held at the gripper.

    Coordinates are the absolute upper-arm angle ``phi1`` (0 up, pi down)
    and the relative elbow angle ``theta2``. The block is a point mass
    rigidly attached to the gripper until it is tossed: after
    ``min_attach_steps`` it leaves the hand as soon as the hand moves up
    while decelerating faster than gravity (a palm can push but not pull),
    and it is let go unconditionally at ``max_attach_steps``. With
    ``release_mode="timed"`` the block is released exactly at
    ``max_attach_steps``. Once free the block follows the exact ballistic
    solution.

    State: ``[phi1, theta2, phi1dot, theta2dot, bx, bz, bvx, bvz, attached, clock]``.
    Observation: joint positions and velocities, block position and velocity.
    """

    name = "arm"
    metric_reduce = "max"
    perf_kind = "metric"

    def __init__(self, config: ArmConfig = ArmConfig()):
        self.config = c = config
        tb = np.asarray(c.torque_bounds, dtype=float)
        self.spec = EnvSpec(
            name=self.name, obs_dim=8, act_dim=2, mu_dim=1,
            mu_bounds=np.asarray(c.mu_bounds, dtype=float),
            action_bounds=np.stack([-tb, tb], axis=1),
            state_dim=10, target_dim=1, dt=c.dt, frame_skip=c.frame_skip, max_steps=c.max_steps,
        )
        self.chain = Chain(n_q=2, angle_map=[[1, 0], [1, 1]], angle_offset=[0.0, 0.0], parents=[-1, 0],
                           base_offset=(0.0, c.shoulder_height))

    def bodies(self, block_mass):
        c = self.config
        (m1, m2), (L1, L2) = c.link_masses, c.link_lengths
        return [
            Body(m1, m1 * L1**2 / 12.0, link=0, axial=0.5 * L1),
            Body(m2, m2 * L2**2 / 12.0, link=1, axial=0.5 * L2),
            Body(block_mass, 0.0, link=1, axial=L2),
        ]

    def gripper(self, q, qd):
        """Gripper position and velocity, each ``(B, 2)``."""
        k = self.chain.point(q, qd, 1, self.config.link_lengths, axial=self.config.link_lengths[1])
        return k.pos, np.einsum("bki,bi->bk", k.jac, qd)

    def _reset(self, mu, rng):
        B = mu.shape[0]
        a = self.config.init_noise
        s = np.zeros((B, 10))
        s[:, :4] = rng.uniform(-a, a, size=(B, 4))
        s[:, PHI1] += math.pi
        pos, vel = self.gripper(s[:, :2], s[:, 2:4])
        s[:, BX:BZ + 1] = pos
        s[:, BVX:BVZ + 1] = vel
        s[:, ATTACHED] = 1.0
        return s

    def _integrate(self, state, action, mu, info):
        c = self.config
        s = state.copy()
        q, qd = s[:, :2], s[:, 2:4]
        held = s[:, ATTACHED] > 0.5
        _, v0 = self.gripper(q, qd)
        q1, qd1 = stormer_verlet(self.chain, q, qd, self.bodies(mu[:, 0] * held), c.link_lengths,
                                 action, c.dt, c.gravity)
        pos, vel = self.gripper(q1, qd1)
        s[:, :2], s[:, 2:4] = q1, qd1

        free = ~held
        g = c.gravity
        s[free, BX] += c.dt * s[free, BVX]
        s[free, BZ] += c.dt * s[free, BVZ] - 0.5 * g * c.dt**2
        s[free, BVZ] -= g * c.dt

        s[held, BX:BZ + 1] = pos[held]
        s[held, BVX:BVZ + 1] = vel[held]
        s[held, CLOCK] += 1.0
        clock = s[:, CLOCK]
        if c.release_mode == "timed":
            release = held & (clock >= c.max_attach_steps)
        elif c.release_mode == "toss":
            accel_z = (vel[:, 1] - v0[:, 1]) / c.dt
            toss = (clock >= c.min_attach_steps) & (vel[:, 1] > 0.0) & (accel_z < -g)
            release = held & (toss | (clock >= c.max_attach_steps))
        else:
            raise ValueError(f"unknown release_mode {c.release_mode!r}")
        s[release, ATTACHED] = 0.0
        return s, info

    def block_height(self, state):
        return state[:, BZ]

    def _reward(self, state, action):
        c = self.config
        h = state[:, BZ]
        r_h = np.where(h <= c.h_target, c.h_target - h, 0.0)
        return (-c.k1 * r_h - c.k2 * np.sum(action**2, axis=1)
                - c.k3 * np.sum(state[:, 2:4] ** 2, axis=1) + c.alive_bonus)

    def _terminated(self, state):
        c = self.config
        return (state[:, BZ] < c.floor_limit) | (np.abs(state[:, BX]) > c.horizontal_limit)

    def _observe(self, state):
        return state[:, :8].copy()

    def obs_scale(self):
        return np.array([1.0, 1.0, 5.0, 5.0, 1.0, 1.0, 3.0, 3.0])

    def _task_metric(self, state):
        return state[:, BZ].copy()

    def reference_return(self) -> float:
        c = self.config
        return float(c.alive_bonus * c.max_steps)

