"""Path-following optimal control problem and its Gauss-Newton SQP solver.

The horizon is transcribed by direct multiple shooting: one RK4 step per
shooting interval, piecewise-constant torques u and virtual input v, and
shooting states s_k = (x, z) stitched by defect constraints.  The stage
cost integrand

    L = (e', theta) Q (e', theta)' + (u', v) R (u', v)'

is approximated by the rectangle rule; the terminal term penalizes the
remaining path progress.  Output (force) constraints act on the model mean
at the shooting nodes and may be tightened by a back-off derived from the
model's posterior standard deviation.

Each SQP iteration linearizes dynamics and outputs, eliminates the shooting
states (condensing), and solves a small dense QP (cvxopt) over the input
corrections plus l1 slacks on the force rows.  A back-tracking line search
on an exact-penalty merit keeps accepted steps monotone.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from cvxopt import matrix as cvx_matrix
from cvxopt import solvers as cvx_solvers

from . import contact, gp as gp_mod
from .dynamics import (RobotGeometry, _rod_inertias, jacobian, rk4_step,
                       state_derivative)
from .pathref import PathDefinition, virtual_dynamics

_ROD_CACHE: dict = {}


def _rod_inertias_cached(geom: RobotGeometry):
    key = id(geom)
    got = _ROD_CACHE.get(key)
    if got is None:
        got = _rod_inertias(geom)
        _ROD_CACHE[key] = got
    return got

log = logging.getLogger(__name__)

NS = 8   # shooting state: 6 robot + 2 virtual
NC = 4   # interval controls: 3 torques + virtual input

_QP_OPTIONS = {"show_progress": False, "maxiters": 100,
               "abstol": 1e-8, "reltol": 1e-8, "feastol": 1e-8}


class EmptyTightenedSetError(ValueError):
    """Back-off exceeds half the output box; tightened set is empty."""


class InfeasibleOcpError(RuntimeError):
    """QP subproblem stayed infeasible through the relaxation ladder."""


@dataclass(frozen=True)
class OcpConfig:
    """Horizon, weights and solver knobs (units: s, N, N m, rad)."""

    horizon: float = 0.15
    sampling_time: float = 0.01
    n_intervals: int = 15
    q_weights: np.ndarray = field(
        default_factory=lambda: np.array([9e6, 9e6, 6.0, 1e2]))
    r_weights: np.ndarray = field(
        default_factory=lambda: np.array([6.0, 6.0, 6.0, 6.0]))
    terminal_weights: np.ndarray = field(
        default_factory=lambda: np.array([0, 0, 0, 0, 0, 0, 1e2, 0.0]))
    sqp_max_iters: int = 25
    kkt_tol: float = 1e-4
    slack_penalty: float = 1e6
    merit_penalty: float = 1e2
    regularization: float = 1e-8
    fd_step: float = 1e-5
    hold_on_infeasible: bool = True
    # RK4 substeps per shooting interval; one 10 ms step under-resolves
    # the contact mode enough to matter against a 1 ms plant.
    prediction_substeps: int = 3
    # Inequality rows whose normalized slack exceeds this margin are left
    # out of the QP (they re-enter via the merit check if a step reaches
    # them). None disables screening.
    screen_margin: float | None = 3.0

    def __post_init__(self):
        object.__setattr__(self, "q_weights",
                           np.asarray(self.q_weights, dtype=float))
        object.__setattr__(self, "r_weights",
                           np.asarray(self.r_weights, dtype=float))
        object.__setattr__(self, "terminal_weights",
                           np.asarray(self.terminal_weights, dtype=float))
        if abs(self.horizon - self.n_intervals * self.sampling_time) > 1e-12:
            raise ValueError("horizon must equal n_intervals * sampling_time")
        if np.any(self.q_weights < 0) or np.any(self.terminal_weights < 0):
            raise ValueError("Q and terminal weights must be >= 0")
        if np.any(self.r_weights <= 0):
            raise ValueError("R diagonal must be > 0")


@dataclass(frozen=True)
class ConstraintSet:
    """Box constraints on states, inputs, virtual system and output force."""

    q_min: np.ndarray = field(default_factory=lambda: np.deg2rad(
        np.array([-170.0, -120.0, -120.0])))
    q_max: np.ndarray = field(default_factory=lambda: np.deg2rad(
        np.array([170.0, 120.0, 120.0])))
    qd_min: np.ndarray = field(
        default_factory=lambda: np.array([-0.04, -1.0, -0.05]))
    qd_max: np.ndarray = field(
        default_factory=lambda: np.array([0.04, 1.0, 0.03]))
    u_min: np.ndarray = field(
        default_factory=lambda: np.array([-13.0, -5.0, -5.0]))
    u_max: np.ndarray = field(
        default_factory=lambda: np.array([10.0, 5.0, 5.0]))
    z_min: np.ndarray = field(default_factory=lambda: np.array([-1.0, 0.0]))
    z_max: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0]))
    v_min: float = -10.0
    v_max: float = 0.5
    force_box: tuple = (0.0, 6.0)

    def __post_init__(self):
        for name in ("q_min", "q_max", "qd_min", "qd_max", "u_min", "u_max",
                     "z_min", "z_max"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=float))
        lows = self.state_lower()
        highs = self.state_upper()
        if np.any(lows >= highs) or self.v_min >= self.v_max:
            raise ValueError("constraint boxes must be nonempty")
        if self.force_box[0] >= self.force_box[1]:
            raise ValueError("force box must be nonempty")

    def state_lower(self) -> np.ndarray:
        return np.concatenate([self.q_min, self.qd_min, self.z_min])

    def state_upper(self) -> np.ndarray:
        return np.concatenate([self.q_max, self.qd_max, self.z_max])

    def input_lower(self) -> np.ndarray:
        return np.concatenate([self.u_min, [self.v_min]])

    def input_upper(self) -> np.ndarray:
        return np.concatenate([self.u_max, [self.v_max]])


@dataclass(frozen=True)
class TighteningPolicy:
    """How the output force box is shrunk against model uncertainty.

    Modes: ``none`` (no back-off), ``pointwise`` (multiplier * sigma at the
    predicted states, refreshed each SQP pass), ``worst-case`` (multiplier
    times the max sigma over a region grid, constant), ``fixed`` (explicit
    back-off in N).
    """

    mode: str = "none"
    multiplier: float = 2.0
    backoff: float = 0.0
    region_points_per_dim: int = 6
    region_inflation: float = 1.0

    def __post_init__(self):
        if self.mode not in ("none", "pointwise", "worst-case", "fixed"):
            raise ValueError(f"unknown tightening mode {self.mode!r}")
        if self.multiplier < 0 or self.backoff < 0:
            raise ValueError("multiplier and backoff must be >= 0")


def tighten_output_box(box, backoff: float) -> tuple:
    """Symmetrically shrink [lo, hi] by ``backoff`` on both sides."""
    if backoff < 0:
        raise ValueError("backoff must be >= 0")
    lo, hi = box[0] + backoff, box[1] - backoff
    if lo > hi:
        raise EmptyTightenedSetError(
            f"backoff {backoff} empties the output box {tuple(box)}")
    return lo, hi


def sigma_max_over_region(gp: gp_mod.GpPosterior, grid) -> float:
    """Worst-case posterior standard deviation over a finite state grid."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] == 0:
        raise ValueError("region grid must be nonempty")
    _, var = gp_mod.predict(gp, grid)
    return float(np.sqrt(np.max(var)))


def default_sigma_region(gp: gp_mod.GpPosterior, points_per_dim: int = 6,
                         inflation: float = 1.0) -> np.ndarray:
    """Grid over the training-input bounding box inflated by lengthscales."""
    lo = gp.X.min(axis=0) - inflation * gp.config.lengthscales
    hi = gp.X.max(axis=0) + inflation * gp.config.lengthscales
    axes = [np.linspace(a, b, points_per_dim) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def stage_cost(e_pf, theta: float, u, v: float, cfg: OcpConfig) -> float:
    """Quadratic stage integrand (e', theta) Q (.) + (u', v) R (.)."""
    e = np.concatenate([np.asarray(e_pf, dtype=float).ravel(), [theta]])
    w = np.concatenate([np.asarray(u, dtype=float).ravel(), [v]])
    return float(e @ (cfg.q_weights * e) + w @ (cfg.r_weights * w))


class RobotPredictionModel:
    """Coupled robot + virtual dynamics with a contact-force output model.

    ``step`` advances one shooting interval with a single RK4 step; the
    contact force entering the joint dynamics is the model's mean force,
    re-evaluated at every integrator stage.  Single-state calls take a
    scalar fast path (closed-form block solve of the inertia system) that
    matters in sequential rollouts.
    """

    def __init__(self, force_model, geom: RobotGeometry,
                 surf: contact.SurfaceGeometry, dt: float,
                 substeps: int = 1):
        self.force_model = force_model
        self.geom = geom
        self.surf = surf
        self.substeps = substeps
        self.dt = dt / substeps
        m = force_model
        if isinstance(m, contact.HybridModel):
            self._gp_Xs = m.gp.X / m.gp.config.lengthscales
            self._gp_alpha = m.gp.alpha
            self._gp_prior = m.gp.config.prior_mean
            self._gp_sv = m.gp.config.signal_var
            self._gp_ls = m.gp.config.lengthscales

    def _force_single(self, q, delta: float) -> float:
        m = self.force_model
        if isinstance(m, contact.HookModel):
            return m.stiffness * delta
        if isinstance(m, contact.HertzModel):
            return m.stiffness * delta**m.exponent if delta > 0.0 else 0.0
        diff = self._gp_Xs - q / self._gp_ls
        k = self._gp_sv * np.exp(-0.5 * np.einsum("ij,ij->i", diff, diff))
        return (m.hook.stiffness * delta + self._gp_prior
                + float(k @ self._gp_alpha))

    def _derivative_single(self, s, w) -> np.ndarray:
        g = self.geom
        l1, l2, l3 = g.link_lengths
        m1, m2, m3 = g.link_masses
        q1, q2, q3 = s[0], s[1], s[2]
        q23 = q2 + q3
        sin1, cos1 = np.sin(q1), np.cos(q1)
        c2, s2 = np.cos(q2), np.sin(q2)
        c23, s23 = np.cos(q23), np.sin(q23)
        radial = l1 + l2 * c2 + l3 * c23
        px = -sin1 * radial
        py = cos1 * radial
        pz = g.base_height + l2 * s2 + l3 * s23
        n = self.surf.normal
        depth = (self.surf.plane_offset
                 + px * n[0] + py * n[1] + pz * n[2])
        f_n = self._force_single(s[:3], depth if depth > 0 else 0.0)
        fx, fy, fz = f_n * n
        # Translational Jacobian columns (dp/dq_i).
        sr2 = -l2 * s2 - l3 * s23
        sr3 = -l3 * s23
        h2 = l2 * c2 + l3 * c23
        h3 = l3 * c23
        tau1 = w[0] - (-cos1 * radial * fx - sin1 * radial * fy)
        tau2 = w[1] - (-sin1 * sr2 * fx + cos1 * sr2 * fy + h2 * fz)
        tau3 = w[2] - (-sin1 * sr3 * fx + cos1 * sr3 * fy + h3 * fz)
        i_perp, i_ax = _rod_inertias_cached(g)
        d_ax = i_ax - i_perp
        r1 = 0.5 * l1
        r2 = l1 + 0.5 * l2 * c2
        r3 = l1 + l2 * c2 + 0.5 * l3 * c23
        b11 = (m1 * r1**2 + m2 * r2**2 + m3 * r3**2 + i_perp.sum()
               + d_ax[1] * s2**2 + d_ax[2] * s23**2) + g.rotor_inertias[0]
        c3 = np.cos(q3)
        b22 = (m2 * 0.25 * l2**2 + i_perp[1]
               + m3 * (l2**2 + 0.25 * l3**2 + l2 * l3 * c3) + i_perp[2]
               + g.rotor_inertias[1])
        b23 = m3 * (0.25 * l3**2 + 0.5 * l2 * l3 * c3) + i_perp[2]
        b33 = m3 * 0.25 * l3**2 + i_perp[2] + g.rotor_inertias[2]
        det = b22 * b33 - b23 * b23
        return np.array([
            s[3], s[4], s[5],
            tau1 / b11,
            (b33 * tau2 - b23 * tau3) / det,
            (-b23 * tau2 + b22 * tau3) / det,
            s[7], w[3]])

    def step_single(self, s, w) -> np.ndarray:
        dt = self.dt
        for _ in range(self.substeps):
            k1 = self._derivative_single(s, w)
            k2 = self._derivative_single(s + 0.5 * dt * k1, w)
            k3 = self._derivative_single(s + 0.5 * dt * k2, w)
            k4 = self._derivative_single(s + dt * k3, w)
            s = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return s

    def _derivative(self, S, W):
        x, z = S[..., :6], S[..., 6:8]
        q = x[..., :3]
        f_n = contact.model_force(self.force_model, q, self.geom, self.surf)
        force_vec = f_n[..., None] * self.surf.normal
        dx = state_derivative(x, W[..., :3], force_vec, self.geom)
        dz = virtual_dynamics(z, W[..., 3])
        return np.concatenate([dx, dz], axis=-1)

    def step(self, S, W) -> np.ndarray:
        S = np.asarray(S)
        if S.ndim == 2 and S.shape[0] == 1:
            return self.step_single(S[0].astype(float),
                                    np.asarray(W, float).ravel())[None, :]
        for _ in range(self.substeps):
            S = rk4_step(lambda s: self._derivative(s, W), S, self.dt)
        return S

    def output(self, S):
        """Controlled outputs (p_y, p_z, mean force)."""
        S = np.asarray(S)
        q = S[..., :3]
        pos = contact.forward_kinematics(q, self.geom)
        f_n = contact.model_force(self.force_model, q, self.geom, self.surf)
        return np.stack([pos[..., 1], pos[..., 2], f_n], axis=-1)

    def output_sigma(self, S):
        """Posterior standard deviation of the force output."""
        return contact.model_sigma(self.force_model, np.asarray(S)[..., :3])

    def output_jacobian(self, S) -> np.ndarray:
        S = np.asarray(S)
        q = S[..., :3]
        J = jacobian(q, self.geom)
        f_grad = contact.model_force_gradient(self.force_model, q,
                                              self.geom, self.surf)
        out = np.zeros(S.shape[:-1] + (3, NS))
        out[..., 0, :3] = J[..., 1, :]
        out[..., 1, :3] = J[..., 2, :]
        out[..., 2, :3] = f_grad
        return out


class LinearPredictionModel:
    """Linear stub plant s+ = A s + B w with linear outputs y = C s."""

    def __init__(self, A, B, C, sigma: float = 0.0):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.C = np.asarray(C, dtype=float)
        self.sigma = sigma

    def step(self, S, W):
        return np.asarray(S) @ self.A.T + np.asarray(W) @ self.B.T

    def output(self, S):
        return np.asarray(S) @ self.C.T

    def output_sigma(self, S):
        S = np.asarray(S)
        return np.full(S.shape[:-1], self.sigma)

    def output_jacobian(self, S):
        S = np.asarray(S)
        return np.broadcast_to(self.C, S.shape[:-1] + self.C.shape).copy()


@dataclass
class OcpSolution:
    """Converged (or best) trajectory with solver diagnostics."""

    u_traj: np.ndarray          # (N, 3)
    v_traj: np.ndarray          # (N,)
    s_traj: np.ndarray          # (N+1, 8), exact rollout of the inputs
    y_traj: np.ndarray          # (N+1, 3) model outputs along s_traj
    sigma_traj: np.ndarray      # (N+1,)
    backoffs: np.ndarray        # (N,) force back-off per constrained node
    objective: float
    iterations: int
    kkt_residual: float
    feasible: bool
    max_slack: float
    defect_inf: float
    events: list = field(default_factory=list)
    duals: np.ndarray | None = None

    @property
    def w_traj(self) -> np.ndarray:
        return np.column_stack([self.u_traj, self.v_traj])


class TranscribedNlp:
    """Multiple-shooting NLP for one OCP instance (fixed initial state)."""

    def __init__(self, s0, model, path: PathDefinition, cfg: OcpConfig,
                 constraints: ConstraintSet, policy: TighteningPolicy,
                 fixed_backoff: float | None = None):
        self.s0 = np.asarray(s0, dtype=float)
        self.model = model
        self.path = path
        self.cfg = cfg
        self.con = constraints
        self.policy = policy
        self.N = cfg.n_intervals
        self.events: list[str] = []

        lo, hi = constraints.state_lower(), constraints.state_upper()
        x0_tol = 1e-6
        if np.any(self.s0 < lo - x0_tol) or np.any(self.s0 > hi + x0_tol):
            log.warning("initial state outside its box; solving anyway")
            self.events.append("x0_outside_box")

        if fixed_backoff is not None:
            self._const_backoff = fixed_backoff
        elif policy.mode == "none":
            self._const_backoff = 0.0
        elif policy.mode == "fixed":
            self._const_backoff = policy.backoff
        elif policy.mode == "worst-case":
            gp = getattr(model, "force_model", None)
            if isinstance(gp, contact.HybridModel):
                grid = default_sigma_region(gp.gp,
                                            policy.region_points_per_dim,
                                            policy.region_inflation)
                self._const_backoff = (policy.multiplier
                                       * sigma_max_over_region(gp.gp, grid))
            else:
                self._const_backoff = 0.0
        else:
            self._const_backoff = None  # pointwise: refreshed per pass
        if self._const_backoff is not None:
            tighten_output_box(constraints.force_box, self._const_backoff)

    # -- trajectory-level helpers -------------------------------------------

    def initial_trajectory(self, W=None):
        """Rollout of W (default zero inputs) from the initial state."""
        W = np.zeros((self.N, NC)) if W is None else np.asarray(W, float)
        return self.rollout(W), W

    def rollout(self, W) -> np.ndarray:
        S = np.empty((self.N + 1, NS))
        S[0] = self.s0
        for k in range(self.N):
            S[k + 1] = self.model.step(S[k][None, :], W[k][None, :])[0]
        return S

    def node_backoffs(self, S) -> np.ndarray:
        """Back-off per constrained node 1..N for the current iterate."""
        if self._const_backoff is not None:
            b = np.full(self.N, self._const_backoff)
        else:
            sigma = self.model.output_sigma(np.asarray(S)[1:])
            b = self.policy.multiplier * sigma
        for bk in b:
            tighten_output_box(self.con.force_box, float(bk))
        return b

    def residual_vector(self, S, W) -> np.ndarray:
        """Stacked GN residuals; their squared norm is the objective."""
        cfg = self.cfg
        sqrt_q = np.sqrt(cfg.sampling_time * cfg.q_weights)
        sqrt_r = np.sqrt(cfg.sampling_time * cfg.r_weights)
        sqrt_e = np.sqrt(cfg.terminal_weights)
        S = np.asarray(S)
        W = np.asarray(W)
        y = self.model.output(S[:self.N])
        theta = S[:self.N, 6]
        track = np.concatenate(
            [(self.path.eval(theta) - y), theta[:, None]], axis=1) * sqrt_q
        inputs = W * sqrt_r
        terminal = S[self.N] * sqrt_e
        return np.concatenate([track.ravel(), inputs.ravel(), terminal])

    def objective(self, S, W) -> float:
        rho = self.residual_vector(S, W)
        return float(rho @ rho)

    def defects(self, S, W) -> np.ndarray:
        """Shooting gaps Phi(s_k, w_k) - s_{k+1}, shape (N, NS)."""
        S = np.asarray(S)
        phi = self.model.step(S[:self.N], np.asarray(W))
        return phi - S[1:]

    def violations(self, S, W, backoffs) -> float:
        """l1 norm of box and force violations at the nodes."""
        S, W = np.asarray(S), np.asarray(W)
        lo, hi = self.con.state_lower(), self.con.state_upper()
        viol = (np.maximum(lo - S[1:], 0.0).sum()
                + np.maximum(S[1:] - hi, 0.0).sum())
        wlo, whi = self.con.input_lower(), self.con.input_upper()
        viol += (np.maximum(wlo - W, 0.0).sum()
                 + np.maximum(W - whi, 0.0).sum())
        y = self.model.output(S[1:])
        flo = self.con.force_box[0] + backoffs
        fhi = self.con.force_box[1] - backoffs
        viol += (np.maximum(flo - y[:, 2], 0.0).sum()
                 + np.maximum(y[:, 2] - fhi, 0.0).sum())
        return float(viol)

    # -- linearization ------------------------------------------------------

    def sensitivities(self, S, W):
        """Batched central-difference A_k, B_k of the shooting map."""
        N, h = self.N, self.cfg.fd_step
        base_s = np.repeat(np.asarray(S)[:N, None, :], 2 * (NS + NC), axis=1)
        base_w = np.repeat(np.asarray(W)[:, None, :], 2 * (NS + NC), axis=1)
        for i in range(NS):
            base_s[:, 2 * i, i] += h
            base_s[:, 2 * i + 1, i] -= h
        for j in range(NC):
            base_w[:, 2 * NS + 2 * j, j] += h
            base_w[:, 2 * NS + 2 * j + 1, j] -= h
        out = self.model.step(base_s.reshape(-1, NS),
                              base_w.reshape(-1, NC))
        out = out.reshape(N, 2 * (NS + NC), NS)
        A = np.stack([(out[:, 2 * i] - out[:, 2 * i + 1]) / (2 * h)
                      for i in range(NS)], axis=-1)
        B = np.stack([(out[:, 2 * NS + 2 * j] - out[:, 2 * NS + 2 * j + 1])
                      / (2 * h) for j in range(NC)], axis=-1)
        return A, B

    def condense(self, A, B, defects):
        """Map input corrections to state corrections: ds_{k+1} = E_k dw + e_k."""
        N = self.N
        E = np.zeros((N, NS, N * NC))
        e = np.zeros((N, NS))
        prev_E = np.zeros((NS, N * NC))
        prev_e = np.zeros(NS)
        for k in range(N):
            cur_E = A[k] @ prev_E
            cur_E[:, k * NC:(k + 1) * NC] += B[k]
            cur_e = A[k] @ prev_e + defects[k]
            E[k], e[k] = cur_E, cur_e
            prev_E, prev_e = cur_E, cur_e
        return E, e

    def assemble_qp(self, S, W, backoffs, relax_state_boxes: bool = False):
        """Condensed QP data (P, q, G, h) plus metadata for one SQP pass."""
        cfg, con, N = self.cfg, self.con, self.N
        S, W = np.asarray(S), np.asarray(W)
        A, B = self.sensitivities(S, W)
        defects = self.defects(S, W)
        E, e = self.condense(A, B, defects)

        y_all = self.model.output(S)
        oj_all = self.model.output_jacobian(S)
        sqrt_q = np.sqrt(cfg.sampling_time * cfg.q_weights)
        sqrt_r = np.sqrt(cfg.sampling_time * cfg.r_weights)
        sqrt_e = np.sqrt(cfg.terminal_weights)

        n_w = N * NC
        rows_track = 4 * N
        rows = rows_track + n_w + NS
        Jt = np.zeros((rows, n_w))
        rt = np.empty(rows)

        dpath = self.path.derivative(S[:N, 6])
        track_res = np.concatenate(
            [(self.path.eval(S[:N, 6]) - y_all[:N]), S[:N, 6][:, None]],
            axis=1) * sqrt_q
        rt[:rows_track] = track_res.ravel()
        for k in range(N):
            T = np.zeros((4, NS))
            T[:3] = -oj_all[k]
            T[:3, 6] += dpath[k]
            T[3, 6] = 1.0
            T *= sqrt_q[:, None]
            if k >= 1:
                Jt[4 * k:4 * k + 4] = T @ E[k - 1]
                rt[4 * k:4 * k + 4] += T @ e[k - 1]
        # Input residuals: block-diagonal constant Jacobian.
        rt[rows_track:rows_track + n_w] = (W * sqrt_r).ravel()
        for k in range(N):
            Jt[rows_track + NC * k:rows_track + NC * (k + 1),
               NC * k:NC * (k + 1)] = np.diag(sqrt_r)
        # Terminal residuals.
        term0 = rows_track + n_w
        rt[term0:] = S[N] * sqrt_e
        Jt[term0:] = sqrt_e[:, None] * E[N - 1]

        n_t = N                      # force slacks
        n_ts = N if relax_state_boxes else 0
        n_d = n_w + n_t + n_ts
        P = np.zeros((n_d, n_d))
        P[:n_w, :n_w] = 2.0 * Jt.T @ Jt
        scale = max(1.0, float(np.mean(np.diag(P)[:n_w])))
        reg = cfg.regularization * scale
        P[np.diag_indices(n_d)] += reg
        # Slacks carry an l1 cost; a moderate quadratic term keeps the QP
        # well conditioned without affecting the exact-penalty behavior.
        P[np.arange(n_w, n_d), np.arange(n_w, n_d)] += scale
        qv = np.zeros(n_d)
        qv[:n_w] = 2.0 * Jt.T @ rt
        qv[n_w:] = cfg.slack_penalty

        wlo, whi = con.input_lower(), con.input_upper()
        G_in = np.zeros((2 * n_w, n_d))
        G_in[0::2, :n_w] = np.eye(n_w)
        G_in[1::2, :n_w] = -np.eye(n_w)
        h_in = np.empty(2 * n_w)
        h_in[0::2] = (np.tile(whi, N) - W.ravel())
        h_in[1::2] = (W.ravel() - np.tile(wlo, N))

        slo, shi = con.state_lower(), con.state_upper()
        off = S[1:] + e                       # (N, NS) linearization offsets
        G_st = np.zeros((2 * N * NS, n_d))
        G_st[0::2, :n_w] = E.reshape(N * NS, n_w)
        G_st[1::2, :n_w] = -E.reshape(N * NS, n_w)
        if relax_state_boxes:
            node = np.repeat(np.arange(N), NS)
            G_st[0::2, n_w + n_t + node] = -1.0
            G_st[1::2, n_w + n_t + node] = -1.0
        h_st = np.empty(2 * N * NS)
        h_st[0::2] = (np.tile(shi, N) - off.ravel())
        h_st[1::2] = (off.ravel() - np.tile(slo, N))

        bounds = np.array([tighten_output_box(con.force_box, float(b))
                           for b in backoffs])
        g_f = oj_all[1:, 2, :]                # (N, NS)
        grow = np.einsum("ki,kij->kj", g_f, E)
        f_off = y_all[1:, 2] + np.einsum("ki,ki->k", g_f, e)
        G_f = np.zeros((2 * N, n_d))
        G_f[0::2, :n_w] = grow
        G_f[1::2, :n_w] = -grow
        G_f[0::2, n_w + np.arange(N)] = -1.0
        G_f[1::2, n_w + np.arange(N)] = -1.0
        h_f = np.empty(2 * N)
        h_f[0::2] = bounds[:, 1] - f_off
        h_f[1::2] = f_off - bounds[:, 0]

        G_sl = np.zeros((n_t + n_ts, n_d))
        G_sl[:, n_w:] = -np.eye(n_t + n_ts)
        h_sl = np.zeros(n_t + n_ts)

        G = np.vstack([G_in, G_st, G_f, G_sl])
        h = np.concatenate([h_in, h_st, h_f, h_sl])
        # Only state-box rows are screenable; inputs, force rows and slack
        # positivity always stay in the QP.
        screenable = np.zeros(len(h), dtype=bool)
        screenable[2 * n_w:2 * n_w + 2 * N * NS] = True
        meta = {"Jt": Jt, "rt": rt, "E": E, "e": e, "defects": defects,
                "n_w": n_w, "n_t": n_t, "n_ts": n_ts,
                "screenable": screenable}
        return P, qv, G, h, meta


def transcribe(x0, z0, force_model, cfg: OcpConfig,
               constraints: ConstraintSet, policy: TighteningPolicy,
               path: PathDefinition, geom: RobotGeometry | None = None,
               surf: contact.SurfaceGeometry | None = None,
               prediction_model=None) -> TranscribedNlp:
    """Build the multiple-shooting NLP for one initial condition.

    ``prediction_model`` overrides the default robot model (used to stub
    the dynamics in tests); otherwise geometry and surface are required.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    z0 = np.asarray(z0, dtype=float).ravel()
    s0 = np.concatenate([x0, z0])
    if prediction_model is None:
        if geom is None or surf is None:
            raise ValueError("geometry and surface required for robot model")
        prediction_model = RobotPredictionModel(force_model, geom, surf,
                                                cfg.sampling_time,
                                                cfg.prediction_substeps)
    return TranscribedNlp(s0, prediction_model, path, cfg, constraints,
                          policy)


def _solve_qp(P, qv, G, h):
    args = (cvx_matrix(P), cvx_matrix(qv), cvx_matrix(G), cvx_matrix(h))
    status = "error"
    for kwargs in ({}, {"kktsolver": "ldl"}):
        try:
            sol = cvx_solvers.qp(*args, options=_QP_OPTIONS, **kwargs)
        except (ValueError, ArithmeticError) as exc:
            status = str(exc)
            continue
        if sol["status"] == "optimal":
            return (np.asarray(sol["x"]).ravel(),
                    np.asarray(sol["z"]).ravel(), "optimal")
        status = sol["status"]
    return None, None, status


def solve_sqp(nlp: TranscribedNlp, warm_start=None,
              warm_duals=None) -> OcpSolution:
    """Gauss-Newton SQP with condensing, slacks and a merit line search.

    Iterates stay dynamically consistent: every line-search trial rolls
    the candidate inputs out through the shooting map, so the exact-
    penalty merit only weighs objective and constraint violations.  The
    warm start supplies inputs (and optionally shifted states, used for
    the first linearization only).
    """
    cfg = nlp.cfg
    N = nlp.N
    rolled = True
    if warm_start is None:
        S, W = nlp.initial_trajectory()
    else:
        W = np.array(warm_start[0], dtype=float).reshape(N, NC)
        if warm_start[1] is not None:
            S = np.array(warm_start[1], dtype=float).reshape(N + 1, NS)
            S[0] = nlp.s0
            rolled = False
        else:
            S = nlp.rollout(W)
    mu = cfg.merit_penalty
    duals = None if warm_duals is None else np.asarray(warm_duals).ravel()
    prev_G = None
    events = list(nlp.events)
    kkt = np.inf
    max_slack = 0.0
    iterations = 0
    best = None

    for iteration in range(1, cfg.sqp_max_iters + 1):
        iterations = iteration
        backoffs = nlp.node_backoffs(S)
        P, qv, G, h, meta = nlp.assemble_qp(S, W, backoffs)
        n_w, n_t = meta["n_w"], meta["n_t"]

        defect_inf = float(np.max(np.abs(meta["defects"])))
        viol = nlp.violations(S, W, backoffs)
        stat = np.abs(qv[:n_w].copy())
        if duals is not None and duals.shape[0] == G.shape[0]:
            stat = np.abs(qv[:n_w] + (G[:, :n_w].T @ duals))
        kkt = max(float(np.max(stat)), defect_inf, viol)
        merit_now = nlp.objective(S, W) + mu * (defect_inf + viol)
        if best is None or merit_now < best[0]:
            best = (merit_now, S.copy(), W.copy(), kkt)
        if kkt < cfg.kkt_tol:
            break

        keep = np.ones(len(h), dtype=bool)
        if cfg.screen_margin is not None:
            norms = np.max(np.abs(G[:, :n_w]), axis=1)
            far = h > cfg.screen_margin * np.maximum(norms, 1e-12)
            keep &= ~(meta["screenable"] & far)
        d, z_kept, status = _solve_qp(P, qv, G[keep], h[keep])
        if d is not None:
            duals = np.zeros(len(h))
            duals[keep] = z_kept
        else:
            log.warning("QP subproblem failed (%s); relaxing state boxes",
                        status)
            events.append("qp_relaxed")
            P, qv, G, h, meta = nlp.assemble_qp(S, W, backoffs,
                                                relax_state_boxes=True)
            d, duals, status = _solve_qp(P, qv, G, h)
            if d is None:
                raise InfeasibleOcpError(
                    f"QP infeasible after relaxation ladder ({status})")
        prev_G = G
        dW = d[:n_w].reshape(N, NC)
        slacks = d[n_w:n_w + n_t]
        max_slack = float(np.max(slacks)) if n_t else 0.0

        # Quadratic model value at the step for the predicted reduction.
        lin_res = meta["rt"] + meta["Jt"] @ d[:n_w]
        model_val = float(lin_res @ lin_res) + mu * float(np.sum(d[n_w:]))
        pred = merit_now - model_val

        alpha = 1.0
        accepted = False
        while alpha > 1e-6:
            W_t = W + alpha * dW
            S_t = nlp.rollout(W_t)
            merit_t = nlp.objective(S_t, W_t) + mu * nlp.violations(
                S_t, W_t, backoffs)
            target = merit_now - 1e-4 * alpha * max(pred, 0.0)
            if merit_t < target or (pred <= 0 and merit_t < merit_now):
                S, W = S_t, W_t
                rolled = True
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            events.append("line_search_stalled")
            break
        if np.max(np.abs(alpha * d[:n_w])) < 1e-12:
            break
    else:
        events.append("iteration_cap")

    if best is not None:
        merit_cur = nlp.objective(S, W) + mu * (
            float(np.max(np.abs(nlp.defects(S, W))))
            + nlp.violations(S, W, nlp.node_backoffs(S)))
        if merit_cur > best[0]:
            _, S, W, kkt = best
            rolled = False

    # Final trajectory: exact rollout of the accepted inputs.
    S_roll = S if rolled else nlp.rollout(W)
    y_roll = nlp.model.output(S_roll)
    sigma_roll = nlp.model.output_sigma(S_roll)
    backoffs = nlp.node_backoffs(S_roll)
    defect_inf = float(np.max(np.abs(nlp.defects(S_roll, W))))
    feas_tol = 1e-6
    lo, hi = nlp.con.state_lower(), nlp.con.state_upper()
    state_ok = bool(np.all(S_roll[1:] >= lo - feas_tol)
                    and np.all(S_roll[1:] <= hi + feas_tol))
    flo = nlp.con.force_box[0] + backoffs
    fhi = nlp.con.force_box[1] - backoffs
    force_ok = bool(np.all(y_roll[1:, 2] >= flo - feas_tol)
                    and np.all(y_roll[1:, 2] <= fhi + feas_tol))
    feasible = state_ok and force_ok and max_slack <= feas_tol

    return OcpSolution(
        u_traj=W[:, :3].copy(), v_traj=W[:, 3].copy(), s_traj=S_roll,
        y_traj=y_roll, sigma_traj=sigma_roll, backoffs=backoffs,
        objective=nlp.objective(S_roll, W), iterations=iterations,
        kkt_residual=kkt, feasible=feasible, max_slack=max_slack,
        defect_inf=defect_inf, events=events, duals=duals)


class PathFollowingMpc:
    """Receding-horizon controller context with shifted warm starts.

    One context drives one simulated plant; it owns its warm-start state
    and must not be shared across concurrent plants.
    """

    def __init__(self, force_model, path: PathDefinition, cfg: OcpConfig,
                 constraints: ConstraintSet, policy: TighteningPolicy,
                 geom: RobotGeometry, surf: contact.SurfaceGeometry):
        self.force_model = force_model
        self.path = path
        self.cfg = cfg
        self.constraints = constraints
        self.policy = policy
        self.geom = geom
        self.surf = surf
        self.model = RobotPredictionModel(force_model, geom, surf,
                                          cfg.sampling_time,
                                          cfg.prediction_substeps)
        self._warm = None
        self._last_input = None
        self._duals = None

    def reset(self) -> None:
        self._warm = None
        self._last_input = None
        self._duals = None

    def _initial_warm(self, x, z):
        """Static balance torque against the reference force, v = 0."""
        q = np.asarray(x)[:3]
        f_ref = self.path.eval(float(np.asarray(z)[0]))[2]
        u0 = jacobian(q, self.geom).T @ (f_ref * self.surf.normal)
        u0 = np.clip(u0, self.constraints.u_min, self.constraints.u_max)
        W = np.tile(np.concatenate([u0, [0.0]]), (self.cfg.n_intervals, 1))
        return W

    def step(self, x, z):
        """One receding-horizon update; returns (u, v, diagnostics)."""
        t0 = time.perf_counter()
        nlp = TranscribedNlp(
            np.concatenate([np.asarray(x, float), np.asarray(z, float)]),
            self.model, self.path, self.cfg, self.constraints, self.policy)
        if self._warm is None:
            W = self._initial_warm(x, z)
            S = nlp.rollout(W)
        else:
            W, S_prev = self._warm
            S = np.vstack([nlp.s0[None, :], S_prev[1:]])
        try:
            sol = solve_sqp(nlp, warm_start=(W, S), warm_duals=self._duals)
        except InfeasibleOcpError:
            if not (self.cfg.hold_on_infeasible
                    and self._last_input is not None):
                raise
            log.warning("OCP infeasible; holding previous input")
            u, v = self._last_input
            diag = {"solve_time": time.perf_counter() - t0, "iterations": 0,
                    "kkt_residual": np.inf, "objective": np.nan,
                    "feasible": False, "max_slack": np.nan,
                    "sigma": np.nan, "backoff": np.nan,
                    "predicted_force": np.nan, "event": "infeasible-hold"}
            return u, v, diag

        u, v = sol.u_traj[0].copy(), float(sol.v_traj[0])
        self._last_input = (u, v)
        self._duals = sol.duals
        # Shift: drop the first interval, repeat the last input.
        W_next = np.vstack([sol.w_traj[1:], sol.w_traj[-1]])
        S_next = np.vstack([sol.s_traj[1:],
                            self.model.step(sol.s_traj[-1][None, :],
                                            sol.w_traj[-1][None, :])])
        self._warm = (W_next, S_next)
        diag = {"solve_time": time.perf_counter() - t0,
                "iterations": sol.iterations,
                "kkt_residual": sol.kkt_residual,
                "objective": sol.objective,
                "feasible": sol.feasible,
                "max_slack": sol.max_slack,
                "sigma": float(sol.sigma_traj[0]),
                "backoff": float(np.max(sol.backoffs)),
                "predicted_force": float(sol.y_traj[0, 2]),
                "event": ";".join(sol.events) if sol.events else ""}
        return u, v, diag
