"""Batched planar multibody kinematics and dynamics.

Links hang off a base point in a tree. A link's absolute angle is measured
from the vertical (0 points straight up, pi straight down) and is an affine
function of the generalized coordinates: ``phi = S @ q + phi0``. A point on
link ``i`` at local offset (axial, lateral) sits at::

    base + sum_{j in ancestors(i)} L_j e(phi_j) + axial e(phi_i) + lateral n(phi_i)

with ``e(phi) = (sin phi, cos phi)`` and ``n(phi) = (cos phi, -sin phi)``.
Because each term depends on one angle only, the velocity-product (bias)
acceleration of a point is ``sum_j d2p/dphi_j2 * phidot_j**2``.

All functions work on a leading batch axis of ``B`` lanes; per-lane
parameters (lengths, masses, offsets) are arrays of shape ``(B,)`` or scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

GRAVITY = 9.81


def unit(phi):
    return np.stack([np.sin(phi), np.cos(phi)], axis=-1)


def normal(phi):
    return np.stack([np.cos(phi), -np.sin(phi)], axis=-1)


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class PointKin:
    pos: np.ndarray  # (B, 2)
    jac: np.ndarray  # (B, 2, n_q)
    bias: np.ndarray  # (B, 2)  = Jdot @ qdot
    hess: Optional[np.ndarray] = None  # (B, 2, n_links) d2p/dphi_j2 (diagonal in phi)


@dataclass
class Chain:
    """Tree of links attached to a base point.

    ``base_x``/``base_z`` give the generalized-coordinate index that moves the
    base point along x/z (``None`` for a fixed coordinate, located at
    ``base_offset``). ``parents[i]`` is the parent link of link ``i`` (-1 for
    the base point); a child attaches to the distal end of its parent.
    """

    n_q: int
    angle_map: np.ndarray  # (n_links, n_q)
    angle_offset: np.ndarray  # (n_links,)
    parents: Sequence[int]
    base_x: Optional[int] = None
    base_z: Optional[int] = None
    base_offset: tuple = (0.0, 0.0)
    _ancestors: list = field(init=False, repr=False)

    def __post_init__(self):
        self.angle_map = np.asarray(self.angle_map, dtype=float)
        self.angle_offset = np.asarray(self.angle_offset, dtype=float)
        anc = []
        for i in range(len(self.parents)):
            chain = []
            p = self.parents[i]
            while p >= 0:
                chain.append(p)
                p = self.parents[p]
            anc.append(chain[::-1])
        self._ancestors = anc

    @property
    def n_links(self) -> int:
        return len(self.parents)

    def angles(self, q):
        return q @ self.angle_map.T + self.angle_offset

    def angle_rates(self, qd):
        return qd @ self.angle_map.T

    def point(self, q, qd, link: int, lengths: Sequence, axial=0.0, lateral=0.0) -> PointKin:
        """Position, Jacobian and bias acceleration of a point on ``link``."""
        B = q.shape[0]
        phi = self.angles(q)
        phid = self.angle_rates(qd)
        pos = np.zeros((B, 2))
        pos[:, 0] += self.base_offset[0]
        pos[:, 1] += self.base_offset[1]
        if self.base_x is not None:
            pos[:, 0] += q[:, self.base_x]
        if self.base_z is not None:
            pos[:, 1] += q[:, self.base_z]
        dphi = np.zeros((B, 2, self.n_links))  # dp/dphi_j
        hess = np.zeros((B, 2, self.n_links))
        for j in self._ancestors[link]:
            L = np.asarray(lengths[j], dtype=float)
            Le = (L[..., None] * unit(phi[:, j])) if L.ndim else L * unit(phi[:, j])
            pos += Le
            dphi[:, :, j] += (L[..., None] * normal(phi[:, j])) if L.ndim else L * normal(phi[:, j])
            hess[:, :, j] -= Le
        ax = np.asarray(axial, dtype=float)
        la = np.asarray(lateral, dtype=float)
        ax2 = ax[..., None] if ax.ndim else ax
        la2 = la[..., None] if la.ndim else la
        e = unit(phi[:, link])
        nrm = normal(phi[:, link])
        pos += ax2 * e + la2 * nrm
        dphi[:, :, link] += ax2 * nrm - la2 * e
        hess[:, :, link] -= ax2 * e + la2 * nrm
        bias = np.einsum("bkj,bj->bk", hess, phid**2)
        jac = dphi @ self.angle_map  # (B, 2, n_q)
        if self.base_x is not None:
            jac[:, 0, self.base_x] += 1.0
        if self.base_z is not None:
            jac[:, 1, self.base_z] += 1.0
        return PointKin(pos, jac, bias, hess)

    def base_point(self, q, qd) -> PointKin:
        B = q.shape[0]
        pos = np.tile(np.asarray(self.base_offset, dtype=float), (B, 1))
        jac = np.zeros((B, 2, self.n_q))
        if self.base_x is not None:
            pos[:, 0] += q[:, self.base_x]
            jac[:, 0, self.base_x] = 1.0
        if self.base_z is not None:
            pos[:, 1] += q[:, self.base_z]
            jac[:, 1, self.base_z] = 1.0
        return PointKin(pos, jac, np.zeros((B, 2)), np.zeros((B, 2, self.n_links)))


@dataclass
class Body:
    """A rigid body: mass at a point of the chain plus rotational inertia.

    ``link=None`` means the body rides on the base point (a cart or a
    floating hip mass) and has no rotational coordinate of its own.
    """

    mass: object
    inertia: object = 0.0
    link: Optional[int] = None
    axial: object = 0.0
    lateral: object = 0.0


def kinematics(chain: Chain, q, qd, bodies: Sequence[Body], lengths) -> list[PointKin]:
    out = []
    for b in bodies:
        if b.link is None:
            out.append(chain.base_point(q, qd))
        else:
            out.append(chain.point(q, qd, b.link, lengths, b.axial, b.lateral))
    return out


def mass_matrix_and_bias(chain: Chain, q, qd, bodies: Sequence[Body], lengths,
                         gravity: float = GRAVITY, kin: Optional[list] = None):
    """Return ``(M, h)`` with ``M qdd = h + tau + J_c^T f_c``.

    ``h`` collects gravity and velocity-product generalized forces.
    """
    B = q.shape[0]
    kin = kin if kin is not None else kinematics(chain, q, qd, bodies, lengths)
    M = np.zeros((B, chain.n_q, chain.n_q))
    h = np.zeros((B, chain.n_q))
    g = np.array([0.0, -gravity])
    for b, k in zip(bodies, kin):
        m = np.asarray(b.mass, dtype=float)
        mm = m[:, None, None] if m.ndim else m
        M += mm * np.einsum("bki,bkj->bij", k.jac, k.jac)
        f = (g - k.bias) * (m[:, None] if m.ndim else m)
        h += np.einsum("bki,bk->bi", k.jac, f)
        if b.link is not None:
            inertia = np.asarray(b.inertia, dtype=float)
            if np.any(inertia != 0.0):
                s = chain.angle_map[b.link]
                ii = inertia[:, None, None] if inertia.ndim else inertia
                M += ii * np.outer(s, s)[None]
    return M, h


def gravity_forces(chain: Chain, bodies: Sequence[Body], kin: list, gravity: float = GRAVITY):
    """Generalized gravity force ``-dV/dq`` per lane."""
    g = np.array([0.0, -gravity])
    out = 0.0
    for b, k in zip(bodies, kin):
        m = np.asarray(b.mass, dtype=float)
        f = np.broadcast_to(g * (m[:, None] if m.ndim else m), k.pos.shape)
        out = out + np.einsum("bki,bk->bi", k.jac, f)
    return out


def kinetic_gradient(chain: Chain, qd, bodies: Sequence[Body], kin: list):
    """``dT/dq`` at fixed generalized velocity ``qd`` (rotational terms do not depend on q)."""
    phid = chain.angle_rates(qd)
    out = np.zeros_like(qd)
    for b, k in zip(bodies, kin):
        v = np.einsum("bki,bi->bk", k.jac, qd)
        dv_dq = (k.hess * phid[:, None, :]) @ chain.angle_map
        m = np.asarray(b.mass, dtype=float)
        out += (m[:, None] if m.ndim else m) * np.einsum("bki,bk->bi", dv_dq, v)
    return out


def energy(chain: Chain, q, qd, bodies: Sequence[Body], lengths, gravity: float = GRAVITY):
    """Kinetic plus gravitational potential energy per lane (zero potential at z = 0)."""
    kin = kinematics(chain, q, qd, bodies, lengths)
    M, _ = mass_matrix_and_bias(chain, q, qd, bodies, lengths, gravity, kin)
    ke = 0.5 * np.einsum("bi,bij,bj->b", qd, M, qd)
    pe = np.zeros(q.shape[0])
    for b, k in zip(bodies, kin):
        pe = pe + np.asarray(b.mass, dtype=float) * gravity * k.pos[:, 1]
    return ke + pe


def solve(M, rhs):
    return np.linalg.solve(M, rhs[..., None])[..., 0]


def mass_matrix(chain: Chain, bodies: Sequence[Body], kin: list):
    B = kin[0].jac.shape[0]
    M = np.zeros((B, chain.n_q, chain.n_q))
    for b, k in zip(bodies, kin):
        m = np.asarray(b.mass, dtype=float)
        M += (m[:, None, None] if m.ndim else m) * np.einsum("bki,bkj->bij", k.jac, k.jac)
        if b.link is not None:
            inertia = np.asarray(b.inertia, dtype=float)
            if np.any(inertia != 0.0):
                s = chain.angle_map[b.link]
                M += (inertia[:, None, None] if inertia.ndim else inertia) * np.outer(s, s)[None]
    return M


def symplectic_euler(chain: Chain, q, qd, bodies: Sequence[Body], lengths, tau, dt: float,
                     gravity: float = GRAVITY, iterations: int = 2):
    """One semi-implicit (symplectic) Euler step in momentum form.

    ``p' = p + dt * (dT/dq(q, v') - dV/dq(q) + tau)`` with ``v' = M(q)^-1 p'``
    (solved by fixed-point iteration), then ``q' = q + dt v'`` and the stored
    velocity is re-derived from the momentum at the new configuration,
    ``qd' = M(q')^-1 p'``.
    """
    kin = kinematics(chain, q, qd, bodies, lengths)
    M, h = mass_matrix_and_bias(chain, q, qd, bodies, lengths, gravity, kin)
    p = np.einsum("bij,bj->bi", M, qd)
    f0 = gravity_forces(chain, bodies, kin, gravity) + tau
    v = qd + dt * solve(M, h + tau)
    for _ in range(iterations):
        v = solve(M, p + dt * (f0 + kinetic_gradient(chain, v, bodies, kin)))
    q_new = q + dt * v
    p_new = np.einsum("bij,bj->bi", M, v)
    M_new = mass_matrix(chain, bodies, kinematics(chain, q_new, v, bodies, lengths))
    return q_new, solve(M_new, p_new)


def stormer_verlet(chain: Chain, q, qd, bodies: Sequence[Body], lengths, tau, dt: float,
                   gravity: float = GRAVITY, iterations: int = 3):
    """One generalized Stormer-Verlet (leapfrog) step; symplectic and second order.

    Half kick ``p+ = p + dt/2 * (dT/dq(q, M(q)^-1 p+) - dV/dq(q) + tau)``,
    drift ``q' = q + dt/2 * (M(q)^-1 p+ + M(q')^-1 p+)``, half kick at ``q'``.
    The implicit stages are solved by fixed-point iteration; ``tau`` is held
    constant over the step.
    """
    h2 = 0.5 * dt
    kin = kinematics(chain, q, qd, bodies, lengths)
    M, hb = mass_matrix_and_bias(chain, q, qd, bodies, lengths, gravity, kin)
    p = np.einsum("bij,bj->bi", M, qd)
    f0 = gravity_forces(chain, bodies, kin, gravity) + tau
    v = qd + h2 * solve(M, hb + tau)
    for _ in range(iterations):
        v = solve(M, p + h2 * (f0 + kinetic_gradient(chain, v, bodies, kin)))
    p_half = np.einsum("bij,bj->bi", M, v)
    q_new = q + dt * v
    for _ in range(iterations):
        kin1 = kinematics(chain, q_new, v, bodies, lengths)
        v1 = solve(mass_matrix(chain, bodies, kin1), p_half)
        q_new = q + h2 * (v + v1)
    kin1 = kinematics(chain, q_new, v, bodies, lengths)
    M1 = mass_matrix(chain, bodies, kin1)
    v1 = solve(M1, p_half)
    p_new = p_half + h2 * (gravity_forces(chain, bodies, kin1, gravity) + tau
                           + kinetic_gradient(chain, v1, bodies, kin1))
    return q_new, solve(M1, p_new)
