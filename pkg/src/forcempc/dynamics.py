"""Rigid-body model of a 3-joint manipulator writing on a vertical surface.

The arm has one revolute base joint about the vertical axis and two revolute
joints about parallel horizontal axes, so the last two links move in a
vertical plane that the base joint rotates.  At the home configuration
``q = (0, 0, 0)`` all links extend along the +y axis of the base frame and
the pen tip sits at ``(0, l1 + l2 + l3, base_height)``.

All kinematic and dynamic routines broadcast over leading batch dimensions:
``q`` may be shaped ``(3,)`` or ``(..., 3)``.  This keeps multiple-shooting
sensitivity sweeps to a handful of vectorized calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class IntegrationDivergedError(RuntimeError):
    """State left the sanity box during fixed-step integration."""


@dataclass(frozen=True)
class JointState:
    """Joint angles q [rad] and velocities qd [rad/s] of the 3-DOF arm."""

    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "qd", np.asarray(self.qd, dtype=float))
        if self.q.shape != (3,) or self.qd.shape != (3,):
            raise ValueError("JointState needs 3 angles and 3 velocities")
        if not (np.isfinite(self.q).all() and np.isfinite(self.qd).all()):
            raise ValueError("JointState entries must be finite")

    def stacked(self) -> np.ndarray:
        """Stacked state vector x = (q, qd), shape (6,)."""
        return np.concatenate([self.q, self.qd])

    @classmethod
    def from_stacked(cls, x) -> "JointState":
        x = np.asarray(x, dtype=float)
        return cls(q=x[:3], qd=x[3:6])


@dataclass(frozen=True)
class RobotGeometry:
    """Link lengths, masses and inertia parameters of the 3-link chain.

    Links are modeled as uniform thin rods of radius ``rod_radius``; a
    rotor inertia per joint keeps the inertia matrix positive definite in
    every configuration (including stretched/singular ones).
    """

    link_lengths: np.ndarray = field(
        default_factory=lambda: np.array([0.12, 0.30, 0.22]))
    link_masses: np.ndarray = field(
        default_factory=lambda: np.array([2.0, 1.5, 0.5]))
    base_height: float = 0.65
    base_y: float = 0.20
    rod_radius: float = 0.02
    rotor_inertias: np.ndarray = field(
        default_factory=lambda: np.array([0.01, 0.01, 0.01]))

    def __post_init__(self):
        object.__setattr__(
            self, "link_lengths", np.asarray(self.link_lengths, dtype=float))
        object.__setattr__(
            self, "link_masses", np.asarray(self.link_masses, dtype=float))
        object.__setattr__(
            self, "rotor_inertias",
            np.asarray(self.rotor_inertias, dtype=float))
        if self.link_lengths.shape != (3,) or np.any(self.link_lengths <= 0):
            raise ValueError("link lengths must be 3 positive values")
        if self.link_masses.shape != (3,) or np.any(self.link_masses <= 0):
            raise ValueError("link masses must be 3 positive values")
        if np.any(self.rotor_inertias <= 0):
            raise ValueError("rotor inertias must be positive")


def forward_kinematics(q, geom: RobotGeometry) -> np.ndarray:
    """Pen-tip position p = (x, y, z) in the base frame.

    Accepts ``q`` of shape (..., 3) and returns (..., 3).
    """
    q = np.asarray(q, dtype=float)
    l1, l2, l3 = geom.link_lengths
    q1, q2, q23 = q[..., 0], q[..., 1], q[..., 1] + q[..., 2]
    s = l1 + l2 * np.cos(q2) + l3 * np.cos(q23)
    h = geom.base_height + l2 * np.sin(q2) + l3 * np.sin(q23)
    return np.stack([-np.sin(q1) * s, geom.base_y + np.cos(q1) * s, h],
                    axis=-1)


def jacobian(q, geom: RobotGeometry) -> np.ndarray:
    """Translational Jacobian J(q) with dp/dt = J(q) qd, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    l1, l2, l3 = geom.link_lengths
    q1, q2, q23 = q[..., 0], q[..., 1], q[..., 1] + q[..., 2]
    sin1, cos1 = np.sin(q1), np.cos(q1)
    s = l1 + l2 * np.cos(q2) + l3 * np.cos(q23)
    # Radial/vertical partials of the in-plane 2R chain.
    s2 = -l2 * np.sin(q2) - l3 * np.sin(q23)
    s3 = -l3 * np.sin(q23)
    h2 = l2 * np.cos(q2) + l3 * np.cos(q23)
    h3 = l3 * np.cos(q23)
    zero = np.zeros_like(q1)
    J = np.stack([
        np.stack([-cos1 * s, -sin1 * s2, -sin1 * s3], axis=-1),
        np.stack([-sin1 * s, cos1 * s2, cos1 * s3], axis=-1),
        np.stack([zero, h2, h3], axis=-1),
    ], axis=-2)
    return J


def _link_frames(q, geom: RobotGeometry):
    """World-frame joint origins, axes and link directions for the chain.

    Returns (origins o1..o3, unit link directions e1..e3, base axis z,
    bend axis n), each of shape (..., 3).
    """
    q = np.asarray(q, dtype=float)
    l1, l2, _ = geom.link_lengths
    q1, q2, q23 = q[..., 0], q[..., 1], q[..., 1] + q[..., 2]
    sin1, cos1 = np.sin(q1), np.cos(q1)
    zero = np.zeros_like(q1)
    one = np.ones_like(q1)
    d = np.stack([-sin1, cos1, zero], axis=-1)        # arm plane direction
    n = np.stack([cos1, sin1, zero], axis=-1)         # joints 2/3 axis
    z = np.stack([zero, zero, one], axis=-1)
    up = z
    e1 = d
    e2 = d * np.cos(q2)[..., None] + up * np.sin(q2)[..., None]
    e3 = d * np.cos(q23)[..., None] + up * np.sin(q23)[..., None]
    o1 = np.stack([zero, np.full_like(q1, geom.base_y),
                   np.full_like(q1, geom.base_height)], axis=-1)
    o2 = o1 + l1 * e1
    o3 = o2 + l2 * e2
    return (o1, o2, o3), (e1, e2, e3), z, n


def _rod_inertias(geom: RobotGeometry):
    """Per-rod COM inertia about perpendicular and axial directions."""
    m, L, r = geom.link_masses, geom.link_lengths, geom.rod_radius
    i_perp = m * (L**2 / 12.0 + r**2 / 4.0)
    i_ax = 0.5 * m * r**2
    return i_perp, i_ax


def inertia_matrix(q, geom: RobotGeometry) -> np.ndarray:
    """Configuration-dependent joint-space inertia B(q), shape (..., 3, 3).

    Closed form of B = sum_i m_i Jv_i^T Jv_i + Jw_i^T I_i Jw_i for this
    chain: the base rotation decouples from the in-plane joint pair, so B
    is block diagonal with a scalar (1,1) block and a 2x2 elbow block.
    Rotor inertias on the diagonal keep B positive definite everywhere.
    """
    q = np.asarray(q, dtype=float)
    l1, l2, l3 = geom.link_lengths
    m1, m2, m3 = geom.link_masses
    i_perp, i_ax = _rod_inertias(geom)
    d_ax = i_ax - i_perp
    q2, q23 = q[..., 1], q[..., 1] + q[..., 2]
    c2, s2 = np.cos(q2), np.sin(q2)
    c23, s23 = np.cos(q23), np.sin(q23)
    c3 = np.cos(q[..., 2])

    # Horizontal (arm-plane) lever arms of the COMs about the base axis.
    r1 = 0.5 * l1
    r2 = l1 + 0.5 * l2 * c2
    r3 = l1 + l2 * c2 + 0.5 * l3 * c23
    b11 = (m1 * r1**2 + m2 * r2**2 + m3 * r3**2
           + i_perp.sum() + d_ax[1] * s2**2 + d_ax[2] * s23**2)

    b22 = (m2 * 0.25 * l2**2 + i_perp[1]
           + m3 * (l2**2 + 0.25 * l3**2 + l2 * l3 * c3) + i_perp[2])
    b23 = m3 * (0.25 * l3**2 + 0.5 * l2 * l3 * c3) + i_perp[2]
    b33 = np.full_like(b11, m3 * 0.25 * l3**2 + i_perp[2])

    zero = np.zeros_like(b11)
    B = np.stack([
        np.stack([b11 + geom.rotor_inertias[0], zero, zero], axis=-1),
        np.stack([zero, b22 + geom.rotor_inertias[1], b23], axis=-1),
        np.stack([zero, b23, b33 + geom.rotor_inertias[2]], axis=-1),
    ], axis=-2)
    return B


def inertia_matrix_assembled(q, geom: RobotGeometry) -> np.ndarray:
    """Reference link-Jacobian assembly of B(q) (slow; used as an oracle)."""
    q = np.asarray(q, dtype=float)
    lengths = geom.link_lengths
    masses = geom.link_masses
    (o1, o2, o3), (e1, e2, e3), z, n = _link_frames(q, geom)
    origins = (o1, o2, o3)
    dirs = (e1, e2, e3)
    axes = (z, n, n)
    i_perp_all, i_ax_all = _rod_inertias(geom)

    batch = q.shape[:-1]
    B = np.zeros(batch + (3, 3))
    for i in range(3):
        m = masses[i]
        com = origins[i] + 0.5 * lengths[i] * dirs[i]
        Jv = np.zeros(batch + (3, 3))
        Jw = np.zeros(batch + (3, 3))
        for j in range(i + 1):
            Jv[..., :, j] = np.cross(axes[j], com - origins[j])
            Jw[..., :, j] = axes[j]
        B += m * np.einsum("...ki,...kj->...ij", Jv, Jv)
        # World-frame rod inertia: I_perp I + (I_ax - I_perp) ee^T.
        ee = np.einsum("...i,...j->...ij", dirs[i], dirs[i])
        eye = np.broadcast_to(np.eye(3), batch + (3, 3))
        I_world = i_perp_all[i] * eye + (i_ax_all[i] - i_perp_all[i]) * ee
        B += np.einsum("...ki,...kl,...lj->...ij", Jw, I_world, Jw)
    return B + np.diag(geom.rotor_inertias)


def state_derivative(x, u, force, geom: RobotGeometry) -> np.ndarray:
    """Time derivative of the stacked state x = (q, qd).

    ``force`` is the 3-vector contact force the pen applies to the
    environment; its reaction loads the joints through -J(q)^T force.
    Coriolis, friction and gravity terms are zero (gravity-compensated arm).
    Broadcasts over leading dimensions of x/u/force.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    force = np.asarray(force, dtype=float)
    if not (np.isfinite(x).all() and np.isfinite(u).all()
            and np.isfinite(force).all()):
        raise ValueError("non-finite input to state_derivative")
    q, qd = x[..., :3], x[..., 3:6]
    B = inertia_matrix(q, geom)
    J = jacobian(q, geom)
    tau = u - np.einsum("...ji,...j->...i", J, force)
    qdd = np.linalg.solve(B, tau[..., None])[..., 0]
    return np.concatenate([qd, qdd], axis=-1)


def rk4_step(f, x, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of x' = f(x) with step dt."""
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_rk4(x, u, force_law, geom: RobotGeometry, dt: float,
                  steps: int, sanity_box=None) -> np.ndarray:
    """Roll the arm forward under constant torque u for ``steps`` RK4 steps.

    ``force_law`` maps a pen-tip position (..., 3) to the applied contact
    force (..., 3); it is re-evaluated at every integrator stage.  If
    ``sanity_box`` (pair of (6,) bounds) is given and the state leaves it,
    integration aborts with IntegrationDivergedError.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)

    def f(state):
        pos = forward_kinematics(state[..., :3], geom)
        return state_derivative(state, u, force_law(pos), geom)

    for _ in range(steps):
        x = rk4_step(f, x, dt)
        if not np.isfinite(x).all():
            raise IntegrationDivergedError("non-finite state")
        if sanity_box is not None:
            lo, hi = sanity_box
            if np.any(x < lo) or np.any(x > hi):
                raise IntegrationDivergedError(
                    f"state left sanity box: {x}")
    return x


def inverse_kinematics(target, geom: RobotGeometry,
                       elbow_up: bool = True) -> np.ndarray:
    """Joint angles placing the pen tip at ``target`` (3,), if reachable.

    The elbow branch is selected by ``elbow_up``.  Raises ValueError for
    unreachable targets.
    """
    target = np.asarray(target, dtype=float)
    l1, l2, l3 = geom.link_lengths
    px, py, pz = target
    py = py - geom.base_y
    q1 = np.arctan2(-px, py)
    s = np.hypot(px, py)
    # In-plane 2R problem from the end of link 1.
    rx = s - l1
    rz = pz - geom.base_height
    rho2 = rx**2 + rz**2
    c3 = (rho2 - l2**2 - l3**2) / (2.0 * l2 * l3)
    if abs(c3) > 1.0:
        raise ValueError(f"target {target} out of reach")
    q3 = np.arccos(c3)
    if elbow_up:
        q3 = -q3
    q2 = np.arctan2(rz, rx) - np.arctan2(l3 * np.sin(q3),
                                         l2 + l3 * np.cos(q3))
    q = np.array([q1, q2, q3])
    err = forward_kinematics(q, geom) - target
    if np.linalg.norm(err) > 1e-9:
        raise ValueError(f"inverse kinematics residual {err}")
    return q
