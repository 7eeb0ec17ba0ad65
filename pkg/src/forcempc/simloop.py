"""Deterministic closed-loop simulation of the writing task.

The plant integrates the same dynamics the controller predicts with (the
contact force entering the joint equations is the controller model's mean
force), at a 1 ms step under zero-order-hold inputs sampled every 10 ms.
Model-plant mismatch lives purely in the measured output: a ground-truth
force map, evaluated along the trajectory, produces the "true" contact
force used for logging, metrics and constraint accounting, and (plus
noise) the training measurements.

Torque disturbances are added to the commanded torques inside their time
window, invisible to the controller.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import contact, gp as gp_mod
from .dynamics import (RobotGeometry, forward_kinematics,
                       inverse_kinematics)
from .ocp import (ConstraintSet, OcpConfig, PathFollowingMpc,
                  RobotPredictionModel, TighteningPolicy)
from .pathref import PathDefinition

log = logging.getLogger(__name__)

LOG_COLUMNS = [
    "t", "q1", "q2", "q3", "qd1", "qd2", "qd3", "u1", "u2", "u3", "v",
    "z1", "z2", "p_y", "p_z", "force_true", "force_model", "sigma",
    "backoff", "e_y", "e_z", "e_f", "iterations", "kkt_residual",
    "feasible", "max_slack", "event",
]


class RunAbortedError(RuntimeError):
    """Closed-loop run could not continue (divergence or infeasibility)."""


@dataclass(frozen=True)
class GroundTruthForce:
    """Simulated-plant output map from joint angles to the normal force.

    ``analytic`` mode: a power-law spring with smoothly varying stiffness
    over the contact plane, zero out of contact.  ``gp`` mode: the mean of
    a dense GP fitted to generated data (mirrors using a large data-driven
    model as the plant truth; its extrapolation may go negative, which is
    read as contact loss).
    """

    kind: str = "analytic"
    base_stiffness: float = 3.4e4
    exponent: float = 1.5
    wave_y: float = 0.18
    wavelength_y: float = 0.16
    origin_y: float = 0.12
    wave_z: float = 0.12
    wavelength_z: float = 0.10
    origin_z: float = 0.60
    gp: gp_mod.GpPosterior | None = None

    def __post_init__(self):
        if self.kind not in ("analytic", "gp"):
            raise ValueError(f"unknown truth kind {self.kind!r}")
        if self.kind == "gp" and self.gp is None:
            raise ValueError("gp truth requires a fitted posterior")

    def stiffness_at(self, p_y, p_z):
        return self.base_stiffness * (
            1.0
            + self.wave_y * np.sin(2 * np.pi * (p_y - self.origin_y)
                                   / self.wavelength_y)
            + self.wave_z * np.cos(2 * np.pi * (p_z - self.origin_z)
                                   / self.wavelength_z))

    def force(self, q, geom: RobotGeometry,
              surf: contact.SurfaceGeometry):
        """True normal force at joint angles q (broadcasts over (..., 3))."""
        q = np.asarray(q, dtype=float)
        if self.kind == "gp":
            flat = q.reshape(-1, 3)
            out = gp_mod.predict_mean(self.gp, flat)
            return np.reshape(out, q.shape[:-1])
        pos = forward_kinematics(q, geom)
        delta = contact.penetration_depth(pos, surf)
        k = self.stiffness_at(pos[..., 1], pos[..., 2])
        return np.where(delta > 0.0,
                        k * np.power(np.maximum(delta, 1e-300),
                                     self.exponent),
                        0.0)


@dataclass(frozen=True)
class DisturbanceSpec:
    """Additive torque on one joint inside [t_start, t_end)."""

    joint: int = 2
    torque: float = -1.3
    t_start: float = 8.0
    t_end: float = 9.0

    def __post_init__(self):
        if not 0 <= self.joint <= 2:
            raise ValueError("joint index must be 0..2")
        if self.t_end <= self.t_start:
            raise ValueError("disturbance window must have positive length")

    def torque_vector(self, t: float) -> np.ndarray:
        d = np.zeros(3)
        if self.t_start <= t < self.t_end:
            d[self.joint] = self.torque
        return d


@dataclass(frozen=True)
class Scenario:
    """Everything needed to reproduce one closed-loop experiment."""

    geometry: RobotGeometry = field(default_factory=RobotGeometry)
    surface: contact.SurfaceGeometry = field(
        default_factory=contact.SurfaceGeometry)
    path: PathDefinition = field(default_factory=PathDefinition)
    controller_model: object = None
    ocp: OcpConfig = field(default_factory=OcpConfig)
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    tightening: TighteningPolicy = field(default_factory=TighteningPolicy)
    truth: GroundTruthForce = field(default_factory=GroundTruthForce)
    disturbance: DisturbanceSpec | None = None
    duration: float = 12.0
    plant_dt: float = 1e-3
    noise_sigma: float = 0.0388
    seed: int = 2024
    start_force_fraction: float = 0.6
    start_offset_y: float = 0.005
    start_offset_z: float = -0.004
    max_consecutive_holds: int = 100

    def initial_state(self):
        """Initial joint state near the path start, pressing lightly."""
        start = self.path.eval(-1.0)
        f_target = self.start_force_fraction * start[2]
        y0 = start[0] + self.start_offset_y
        z0 = start[1] + self.start_offset_z
        delta0 = self._invert_truth(f_target, y0, z0)
        n = self.surface.normal
        # Solve p.n = delta0 - plane_offset, i.e. penetration delta0.
        pos = np.array([0.0, y0, z0]) + (
            delta0 - self.surface.plane_offset) * n
        pos[1], pos[2] = y0, z0
        q0 = inverse_kinematics(pos, self.geometry)
        return np.concatenate([q0, np.zeros(3)]), np.array([-1.0, 0.0])

    def _invert_truth(self, f_target, p_y, p_z) -> float:
        if self.truth.kind == "analytic":
            k = self.truth.stiffness_at(p_y, p_z)
            return float((f_target / k) ** (1.0 / self.truth.exponent))
        # Bisection along the penetration axis for a data-driven truth.
        lo, hi = 0.0, 0.02
        n = self.surface.normal

        def truth_at(delta):
            pos = np.array([0.0, p_y, p_z]) + (
                delta - self.surface.plane_offset) * n
            pos[1], pos[2] = p_y, p_z
            q = inverse_kinematics(pos, self.geometry)
            return float(self.truth.force(q, self.geometry, self.surface))

        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if truth_at(mid) < f_target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


@dataclass
class TrajectoryLog:
    """Column-oriented record of one run, one row per sampling instant."""

    columns: dict
    solve_times: np.ndarray
    error: str = ""

    def __len__(self):
        return len(self.columns["t"])

    def as_array(self, name: str) -> np.ndarray:
        return self.columns[name]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            n = len(self)
            for i in range(n):
                row = []
                for name in LOG_COLUMNS:
                    val = self.columns[name][i]
                    if name == "event":
                        row.append(val)
                    elif name in ("iterations", "feasible"):
                        row.append(str(int(val)))
                    else:
                        row.append(f"{float(val):.12g}")
                writer.writerow(row)

    def write_timing_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "solve_time"])
            for t, st in zip(self.columns["t"], self.solve_times):
                writer.writerow([f"{t:.12g}", f"{st:.9g}"])

    @classmethod
    def read_csv(cls, path) -> "TrajectoryLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != LOG_COLUMNS:
                raise ValueError(f"unexpected log header in {path}")
            raw = {name: [] for name in LOG_COLUMNS}
            for idx, row in enumerate(reader, start=2):
                if len(row) != len(LOG_COLUMNS):
                    raise ValueError(f"malformed row {idx} in {path}")
                for name, val in zip(LOG_COLUMNS, row):
                    if name == "event":
                        raw[name].append(val)
                    else:
                        try:
                            raw[name].append(float(val))
                        except ValueError as exc:
                            raise ValueError(
                                f"bad value in row {idx} of {path}") from exc
        columns = {k: (np.asarray(v) if k != "event" else list(v))
                   for k, v in raw.items()}
        return cls(columns=columns,
                   solve_times=np.zeros(len(columns["t"])))


def run_closed_loop(scenario: Scenario) -> TrajectoryLog:
    """Simulate one scenario; returns the full (or partial) log."""
    if scenario.controller_model is None:
        raise ValueError("scenario needs a controller force model")
    geom, surf = scenario.geometry, scenario.surface
    mpc = PathFollowingMpc(scenario.controller_model, scenario.path,
                           scenario.ocp, scenario.constraints,
                           scenario.tightening, geom, surf)
    plant = RobotPredictionModel(scenario.controller_model, geom, surf,
                                 scenario.plant_dt)
    ts = scenario.ocp.sampling_time
    substeps = int(round(ts / scenario.plant_dt))
    n_steps = int(round(scenario.duration / ts))
    sanity_lo = 2.0 * np.concatenate([scenario.constraints.q_min,
                                      scenario.constraints.qd_min * 25])
    sanity_hi = 2.0 * np.concatenate([scenario.constraints.q_max,
                                      scenario.constraints.qd_max * 25])

    x, z = scenario.initial_state()
    cols = {name: [] for name in LOG_COLUMNS}
    solve_times = []
    error = ""
    holds = 0

    for k in range(n_steps):
        t = k * ts
        u, v, diag = mpc.step(x, z)
        if diag["event"] == "infeasible-hold":
            holds += 1
            if holds > scenario.max_consecutive_holds:
                error = f"unrecovered OCP infeasibility at t={t:.3f}"
                log.error(error)
                break
        else:
            holds = 0

        q = x[:3]
        pos = forward_kinematics(q, geom)
        f_true = float(scenario.truth.force(q, geom, surf))
        f_model = float(contact.model_force(scenario.controller_model, q,
                                            geom, surf))
        sigma = float(contact.model_sigma(scenario.controller_model, q))
        ref = scenario.path.eval(z[0])
        e = ref - np.array([pos[1], pos[2], f_model])

        cols["t"].append(t)
        for i, name in enumerate(("q1", "q2", "q3")):
            cols[name].append(x[i])
        for i, name in enumerate(("qd1", "qd2", "qd3")):
            cols[name].append(x[3 + i])
        for i, name in enumerate(("u1", "u2", "u3")):
            cols[name].append(u[i])
        cols["v"].append(v)
        cols["z1"].append(z[0])
        cols["z2"].append(z[1])
        cols["p_y"].append(pos[1])
        cols["p_z"].append(pos[2])
        cols["force_true"].append(f_true)
        cols["force_model"].append(f_model)
        cols["sigma"].append(sigma)
        cols["backoff"].append(diag.get("backoff", 0.0))
        cols["e_y"].append(e[0])
        cols["e_z"].append(e[1])
        cols["e_f"].append(e[2])
        cols["iterations"].append(diag["iterations"])
        cols["kkt_residual"].append(diag["kkt_residual"])
        cols["feasible"].append(float(bool(diag["feasible"])))
        cols["max_slack"].append(diag.get("max_slack", np.nan))
        cols["event"].append(diag.get("event", ""))
        solve_times.append(diag["solve_time"])

        # Plant: 1 ms substeps under held inputs, torque disturbance added.
        s = np.concatenate([x, z])
        for j in range(substeps):
            t_sub = t + j * scenario.plant_dt
            u_applied = u.copy()
            if scenario.disturbance is not None:
                u_applied += scenario.disturbance.torque_vector(t_sub)
            s = plant.step_single(s, np.concatenate([u_applied, [v]]))
        x, z = s[:6], s[6:8]
        # The virtual system is the controller's own construct: progress
        # never runs backwards and stays inside its box up to QP round-off.
        z[1] = min(max(z[1], 0.0), scenario.constraints.z_max[1])
        z[0] = min(max(z[0], -1.0), 0.0)
        if np.any(x < sanity_lo) or np.any(x > sanity_hi) \
                or not np.isfinite(x).all():
            error = f"plant state left sanity box at t={t:.3f}"
            log.error(error)
            break

    columns = {k: (np.asarray(v) if k != "event" else list(v))
               for k, v in cols.items()}
    return TrajectoryLog(columns=columns,
                         solve_times=np.asarray(solve_times), error=error)


@dataclass(frozen=True)
class TrainingData:
    """Generated identification corpus plus the GP training subset."""

    q: np.ndarray          # (n, 3)
    delta: np.ndarray      # (n,)
    force: np.ndarray      # (n,) noisy measured force
    subset: np.ndarray     # indices into the corpus (minimum-distance cover)


def generate_training_data(scenario: Scenario, runs: int = 5,
                           jitter_pos: float = 0.006,
                           jitter_force: float = 0.8,
                           bootstrap_stiffness: float = 2500.0,
                           min_dist: float = 0.015) -> TrainingData:
    """Collect (q, penetration, measured force) samples with a bootstrap
    controller driven around jittered references.

    Run 0 follows the nominal reference; later runs shift the path by
    uniform draws.  Measured forces are the ground truth plus Gaussian
    noise.  The returned subset indices form a greedy minimum-distance
    cover of the joint-angle cloud.
    """
    rng = np.random.default_rng(scenario.seed)
    bootstrap = contact.HookModel(stiffness=bootstrap_stiffness)
    qs, deltas, forces = [], [], []
    for r in range(runs):
        if r == 0:
            path_r = scenario.path
        else:
            path_r = scenario.path.with_offsets(
                d_y=rng.uniform(-jitter_pos, jitter_pos),
                d_z=rng.uniform(-jitter_pos, jitter_pos),
                d_f=rng.uniform(-jitter_force, jitter_force))
        run_scenario = replace(scenario, controller_model=bootstrap,
                               path=path_r,
                               tightening=TighteningPolicy(mode="none"),
                               disturbance=None)
        log_r = run_closed_loop(run_scenario)
        if log_r.error:
            raise RunAbortedError(
                f"bootstrap run {r} aborted: {log_r.error}")
        q_r = np.column_stack([log_r.as_array("q1"), log_r.as_array("q2"),
                               log_r.as_array("q3")])
        pos = forward_kinematics(q_r, scenario.geometry)
        delta_r = contact.penetration_depth(pos, scenario.surface)
        truth_r = scenario.truth.force(q_r, scenario.geometry,
                                       scenario.surface)
        noisy = truth_r + scenario.noise_sigma * rng.standard_normal(
            len(truth_r))
        qs.append(q_r)
        deltas.append(delta_r)
        forces.append(noisy)
    q_all = np.vstack(qs)
    delta_all = np.concatenate(deltas)
    force_all = np.concatenate(forces)
    subset = gp_mod.subsample_by_distance(q_all, min_dist)
    return TrainingData(q=q_all, delta=delta_all, force=force_all,
                        subset=subset)


def fit_truth_gp(data: TrainingData, n_points: int = 515, seed: int = 7,
                 fit_subset: int = 120, restarts: int = 4,
                 noise_var: float = 0.0388**2) -> gp_mod.GpPosterior:
    """Dense data-driven truth: a GP on raw forces over joint angles.

    Hyperparameters are trained on a random subsample for speed, then the
    posterior conditions on ``n_points`` samples.
    """
    rng = np.random.default_rng(seed)
    n = len(data.force)
    pick = rng.choice(n, size=min(n_points, n), replace=False)
    X, y = data.q[pick], data.force[pick]
    small = rng.choice(len(y), size=min(fit_subset, len(y)), replace=False)
    res = gp_mod.fit_hyperparams(gp_mod.Dataset(X=X[small], y=y[small]),
                                 restarts=restarts, seed=seed)
    noise = max(res.noise_var, noise_var)
    return gp_mod.build_posterior(gp_mod.Dataset(X=X, y=y), res.config,
                                  noise)


def fit_force_models(data: TrainingData, geom: RobotGeometry,
                     surf: contact.SurfaceGeometry, gp_restarts: int = 8,
                     gp_seed: int = 11, lock_exponent: float | None = None):
    """Identify all three force models from one corpus.

    Returns (hook, hertz, hybrid); the hybrid's GP regresses the linear
    spring's residual on joint angles over the distance-subsampled subset.
    """
    hook = contact.fit_hook(data.delta, data.force)
    hertz = contact.fit_hertz(data.delta, data.force,
                              lock_exponent=lock_exponent)
    sub = data.subset
    residual = data.force[sub] - hook.stiffness * data.delta[sub]
    train = gp_mod.Dataset(X=data.q[sub], y=residual)
    res = gp_mod.fit_hyperparams(train, restarts=gp_restarts, seed=gp_seed)
    gp = gp_mod.build_posterior(train, res.config, res.noise_var)
    hybrid = contact.HybridModel(hook=hook, gp=gp)
    return hook, hertz, hybrid


def compute_metrics(log: TrajectoryLog,
                    force_box=(0.0, 6.0)) -> dict:
    """Scalar summary of one run (errors, extremes, violations, timing)."""
    if len(log) == 0:
        raise ValueError("empty log")
    t = log.as_array("t")
    f_true = log.as_array("force_true")
    z1 = log.as_array("z1")
    e_cols = np.column_stack([log.as_array("e_y"), log.as_array("e_z"),
                              log.as_array("e_f")])
    metrics = {}
    metrics["n_samples"] = len(log)
    metrics["duration"] = float(t[-1] - t[0]) if len(log) > 1 else 0.0
    # Reference force along the realized progress: e_f + model force.
    ref_force = log.as_array("e_f") + log.as_array("force_model")
    metrics["force_rmse_true"] = float(
        np.sqrt(np.mean((f_true - ref_force)**2)))
    metrics["force_rmse_model"] = float(
        np.sqrt(np.mean(log.as_array("e_f")**2)))
    pos_err = np.column_stack([log.as_array("e_y"), log.as_array("e_z")])
    metrics["position_rmse"] = float(
        np.sqrt(np.mean(np.sum(pos_err**2, axis=1))))
    metrics["min_force_true"] = float(f_true.min())
    metrics["max_force_true"] = float(f_true.max())
    inside = (f_true >= force_box[0]) & (f_true <= force_box[1])
    metrics["violation_fraction"] = float(1.0 - np.mean(inside))
    metrics["theta_monotone"] = bool(np.all(np.diff(z1) >= -1e-9))
    metrics["theta_end"] = float(z1[-1])
    metrics["error_norm_initial"] = float(np.linalg.norm(e_cols[0]))
    tail = max(1, int(0.2 * len(log)))
    metrics["error_norm_final_rms"] = float(
        np.sqrt(np.mean(np.sum(e_cols[-tail:]**2, axis=1))))
    metrics["feasible_fraction"] = float(np.mean(log.as_array("feasible")))
    if log.solve_times.size:
        metrics["solver_time_mean"] = float(np.mean(log.solve_times))
        metrics["solver_time_max"] = float(np.max(log.solve_times))
    else:
        metrics["solver_time_mean"] = 0.0
        metrics["solver_time_max"] = 0.0
    metrics["aborted"] = bool(log.error)
    return metrics


def write_metrics(metrics: dict, path) -> None:
    """Flat key = value text record."""
    with open(path, "w") as fh:
        for key in sorted(metrics):
            fh.write(f"{key} = {metrics[key]}\n")
