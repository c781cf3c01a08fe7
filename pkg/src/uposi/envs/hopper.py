"""Planar one-legged hopper on ground with unknown Coulomb friction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import normalize
from .base import DT, Env, EnvSpec
from .chain import GRAVITY, Body, Chain, kinematics, mass_matrix_and_bias, solve


@dataclass(frozen=True)
class HopperConfig:
    link_lengths: tuple = (0.4, 0.45, 0.5, 0.39)  # torso, thigh, shank, foot
    link_masses: tuple = (3.5, 1.5, 1.0, 0.5)
    heel: float = -0.13  # contact points along the foot, measured from the ankle
    toe: float = 0.26
    mu_bounds: tuple = ((0.3, 1.0),)
    torque_bounds: tuple = (100.0, 100.0, 100.0)  # hip, knee, ankle
    contact_stiffness: float = 2.0e5
    contact_damping: float = 2.0e3
    tangential_damping: float = 2.0e4
    contact_iterations: int = 6
    init_noise: float = 0.005
    k1: float = 1.0
    k2: float = 0.002
    alive_bonus: float = 3.0
    fall_height_ratio: float = 0.8
    pitch_limit: float = 1.0
    # varying-friction track: (x_start, x_end, friction_outside); inside the
    # region the friction is the model parameter mu
    track: Optional[tuple] = None
    gravity: float = GRAVITY
    dt: float = DT
    frame_skip: int = 1
    max_steps: int = 1000


class Hopper(Env):
    """Torso, thigh, shank and foot in the sagittal plane.

    Generalized coordinates ``q = [x, z, pitch, hip, knee, ankle]``: ``(x, z)``
    is the hip position, ``pitch`` the absolute torso angle from vertical, the
    rest are relative joint angles (all zero when standing straight with the
    foot flat, toe pointing to +x). The heel and toe touch the ground through
    a stiff spring-damper; tangential forces are viscous and clamped to the
    friction cone. Both are integrated implicitly in the contact velocity
    (the stiffness and damping are far beyond the explicit stability limit),
    with an active-set loop over contact modes.

    State: ``[q, qdot]`` (12). Observation drops the forward position (11).
    """

    name = "hopper"
    metric_reduce = "last"
    perf_kind = "metric"

    def __init__(self, config: HopperConfig = HopperConfig()):
        self.config = c = config
        tb = np.asarray(c.torque_bounds, dtype=float)
        self.spec = EnvSpec(
            name=self.name, obs_dim=11, act_dim=3, mu_dim=1,
            mu_bounds=np.asarray(c.mu_bounds, dtype=float),
            action_bounds=np.stack([-tb, tb], axis=1),
            state_dim=12, target_dim=1, dt=c.dt, frame_skip=c.frame_skip, max_steps=c.max_steps,
        )
        self.chain = Chain(
            n_q=6,
            angle_map=[[0, 0, 1, 0, 0, 0], [0, 0, 1, 1, 0, 0], [0, 0, 1, 1, 1, 0], [0, 0, 1, 1, 1, 1]],
            angle_offset=[0.0, math.pi, math.pi, 0.5 * math.pi],
            parents=[-1, -1, 1, 2],
            base_x=0, base_z=1,
        )
        L, m = c.link_lengths, c.link_masses
        self.bodies = [
            Body(m[0], m[0] * L[0] ** 2 / 12.0, link=0, axial=0.5 * L[0]),
            Body(m[1], m[1] * L[1] ** 2 / 12.0, link=1, axial=0.5 * L[1]),
            Body(m[2], m[2] * L[2] ** 2 / 12.0, link=2, axial=0.5 * L[2]),
            Body(m[3], m[3] * L[3] ** 2 / 12.0, link=3, axial=0.5 * (c.heel + c.toe)),
        ]

    @property
    def standing_height(self) -> float:
        L = self.config.link_lengths
        return L[1] + L[2]

    # -- friction -------------------------------------------------------------

    def ankle_x(self, state):
        q, qd = state[:, :6], state[:, 6:]
        return self.chain.point(q, qd, 2, self.config.link_lengths, axial=self.config.link_lengths[2]).pos[:, 0]

    def friction(self, state, mu):
        """Ground friction under the foot, ``(B,)``.

        On a track the coefficient depends on the ankle's horizontal position.
        """
        state, mu, squeeze = self._batch(state, mu)
        f = self._friction(state, mu)
        return f[0] if squeeze else f

    def _friction(self, state, mu):
        track = self.config.track
        if track is None:
            return mu[:, 0].copy()
        x0, x1, outside = track
        ax = self.ankle_x(state)
        return np.where((ax >= x0) & (ax <= x1), mu[:, 0], outside)

    def _target(self, state, mu):
        return normalize(self._friction(state, mu)[:, None], self.mu_bounds)

    # -- dynamics ---------------------------------------------------------------

    def contact_points(self, q, qd):
        c = self.config
        return [self.chain.point(q, qd, 3, c.link_lengths, axial=a) for a in (c.heel, c.toe)]

    def _reset(self, mu, rng):
        B = mu.shape[0]
        a = self.config.init_noise
        s = np.zeros((B, 12))
        s[:, 1] = self.standing_height
        s += rng.uniform(-a, a, size=(B, 12))
        s[:, 0] = 0.0
        # rest the lowest contact point exactly on the ground
        low = np.min([k.pos[:, 1] for k in self.contact_points(s[:, :6], s[:, 6:])], axis=0)
        s[:, 1] -= low
        return s

    def _integrate(self, state, action, mu, info):
        c = self.config
        dt = c.dt
        q, qd = state[:, :6], state[:, 6:]
        kin = kinematics(self.chain, q, qd, self.bodies, c.link_lengths)
        M, h = mass_matrix_and_bias(self.chain, q, qd, self.bodies, c.link_lengths, c.gravity, kin)
        tau = np.zeros_like(q)
        tau[:, 3:] = action
        rhs0 = np.einsum("bij,bj->bi", M, qd) + dt * (h + tau)

        pts = self.contact_points(q, qd)
        Jt = np.stack([p.jac[:, 0, :] for p in pts], axis=1)  # (B, C, n)
        Jn = np.stack([p.jac[:, 1, :] for p in pts], axis=1)
        depth = np.maximum(0.0, -np.stack([p.pos[:, 1] for p in pts], axis=1))  # (B, C)
        fric = self._friction(state, mu)[:, None] * np.ones((1, len(pts)))
        kn, dn, ct = c.contact_stiffness, c.contact_damping, c.tangential_damping
        kd = kn * dt + dn

        active = depth > 0.0
        slip = np.zeros_like(active)
        sign = np.zeros(active.shape)
        v = None
        for _ in range(c.contact_iterations):
            A = M.copy()
            b = rhs0.copy()
            w_n = dt * kd * active
            A += np.einsum("bc,bci,bcj->bij", w_n, Jn, Jn)
            b += np.einsum("bc,bci->bi", dt * kn * depth * active, Jn)
            stick = active & ~slip
            A += np.einsum("bc,bci,bcj->bij", dt * ct * stick, Jt, Jt)
            slide = active & slip
            smu = sign * fric * slide
            b -= np.einsum("bc,bci->bi", dt * smu * kn * depth, Jt)
            A -= np.einsum("bc,bci,bcj->bij", dt * smu * kd, Jt, Jn)
            v = solve(A, b)
            vn = np.einsum("bci,bi->bc", Jn, v)
            vt = np.einsum("bci,bi->bc", Jt, v)
            fn = kn * depth - kd * vn
            new_active = active & (fn > 0.0)
            cone = fric * np.maximum(fn, 0.0)
            to_slip = new_active & ~slip & (ct * np.abs(vt) > cone)
            to_stick = new_active & slip & (sign * vt < 0.0)
            new_slip = (slip | to_slip) & ~to_stick & new_active
            new_sign = np.where(to_slip, np.sign(vt), sign)
            if (np.array_equal(new_active, active) and np.array_equal(new_slip, slip)
                    and np.array_equal(new_sign, sign)):
                break
            active, slip, sign = new_active, new_slip, new_sign

        # final forces satisfy the cone exactly; velocities are made consistent with them
        vn = np.einsum("bci,bi->bc", Jn, v)
        vt = np.einsum("bci,bi->bc", Jt, v)
        fn = np.where(depth > 0.0, np.maximum(0.0, kn * depth - kd * vn), 0.0)
        ft = np.clip(-ct * vt, -fric * fn, fric * fn)
        gen = np.einsum("bc,bci->bi", fn, Jn) + np.einsum("bc,bci->bi", ft, Jt)
        qd_new = solve(M, rhs0 + dt * gen)
        q_new = q + dt * qd_new
        info = {"normal_force": fn, "tangential_force": ft, "friction": fric[:, 0],
                "penetration": depth}
        return np.concatenate([q_new, qd_new], axis=1), info

    # -- task ---------------------------------------------------------------------

    def _reward(self, state, action):
        c = self.config
        u = self.unscale_action(action)
        return c.k1 * state[:, 6] - c.k2 * np.sum(u**2, axis=1) + c.alive_bonus

    def _terminated(self, state):
        c = self.config
        return (state[:, 1] < c.fall_height_ratio * self.standing_height) | (np.abs(state[:, 2]) > c.pitch_limit)

    def _observe(self, state):
        return state[:, 1:].copy()

    def obs_scale(self):
        return np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 5.0, 5.0, 5.0, 5.0])

    def _task_metric(self, state):
        return state[:, 0].copy()

    def reference_return(self) -> float:
        c = self.config
        return float(c.alive_bonus * c.max_steps)
