"""Contact-force output models for a pen pressing on a compliant plane.

Three interchangeable maps from joint angles to the normal contact force:

* linear spring          F = K_e * delta
* power-law spring       F = K_e * delta^alpha
* hybrid                 F = K_e * delta(q) + gp_mean(q), with the GP
                          regressing the residual left by the linear spring

where delta is the penetration depth of the pen tip past the undeformed
surface plane.  The surface occupies the half space behind the plane; the
unilateral laws return exactly zero force out of contact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gp as gp_mod
from .dynamics import RobotGeometry, forward_kinematics, jacobian


class IdentificationError(RuntimeError):
    """Not enough informative samples to identify spring parameters."""


@dataclass(frozen=True)
class SurfaceGeometry:
    """Contact plane with unit inward normal and plane position.

    The default plane sits at x = -0.49 m with inward normal (-1, 0, 0),
    i.e. the surface occupies x <= -0.49 and pressing means moving toward
    more negative x.
    """

    normal: np.ndarray = field(default_factory=lambda: np.array([-1.0, 0, 0]))
    plane_offset: float = -0.49

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("surface normal must be a unit vector")
        object.__setattr__(self, "normal", n)


def penetration_depth(pos, surf: SurfaceGeometry):
    """Penetration delta >= 0 of position(s) past the surface plane.

    delta = max(0, p0 + p . n) for inward normal n; broadcasts over
    (..., 3) positions.
    """
    pos = np.asarray(pos, dtype=float)
    depth = surf.plane_offset + pos @ surf.normal
    return np.maximum(depth, 0.0)


def penetration_gradient(q, geom: RobotGeometry,
                         surf: SurfaceGeometry) -> np.ndarray:
    """d delta / d q, zero out of contact (subgradient at the boundary)."""
    q = np.asarray(q, dtype=float)
    pos = forward_kinematics(q, geom)
    in_contact = (surf.plane_offset + pos @ surf.normal) > 0.0
    J = jacobian(q, geom)
    grad = np.einsum("...ij,...i->...j", J, np.broadcast_to(
        surf.normal, pos.shape))
    return grad * in_contact[..., None]


@dataclass(frozen=True)
class HookModel:
    """Linear spring, stiffness K_e [N/m]."""

    stiffness: float

    def __post_init__(self):
        if self.stiffness <= 0:
            raise ValueError("stiffness must be positive")


@dataclass(frozen=True)
class HertzModel:
    """Power-law spring F = K_e delta^alpha (alpha = 1.5 for Hertz contact)."""

    stiffness: float
    exponent: float

    def __post_init__(self):
        if self.stiffness <= 0 or self.exponent <= 0:
            raise ValueError("stiffness and exponent must be positive")


@dataclass(frozen=True)
class HybridModel:
    """Linear spring plus a GP over joint angles for the residual force."""

    hook: HookModel
    gp: gp_mod.GpPosterior


def force_hook(model: HookModel, delta):
    delta = np.asarray(delta, dtype=float)
    return model.stiffness * delta


def force_hertz(model: HertzModel, delta):
    delta = np.asarray(delta, dtype=float)
    # 0^alpha = 0 without the 0 log 0 indeterminacy.
    return np.where(delta > 0.0,
                    model.stiffness * np.power(np.maximum(delta, 1e-300),
                                               model.exponent),
                    0.0)


def force_hybrid(model: HybridModel, q, geom: RobotGeometry,
                 surf: SurfaceGeometry):
    """Mean force and its standard deviation at joint angles q.

    The standard deviation is exactly the square root of the GP's
    posterior variance at q.
    """
    q = np.asarray(q, dtype=float)
    delta = penetration_depth(forward_kinematics(q, geom), surf)
    mean_resid, var = gp_mod.predict(model.gp, q)
    return model.hook.stiffness * delta + mean_resid, np.sqrt(var)


def model_force(model, q, geom: RobotGeometry, surf: SurfaceGeometry):
    """Mean force of any model variant at joint angles q (broadcasts)."""
    q = np.asarray(q, dtype=float)
    delta = penetration_depth(forward_kinematics(q, geom), surf)
    if isinstance(model, HybridModel):
        flat = q.reshape(-1, q.shape[-1])
        resid = gp_mod.predict_mean(model.gp, flat)
        return (model.hook.stiffness * delta
                + np.reshape(resid, delta.shape))
    if isinstance(model, HookModel):
        return force_hook(model, delta)
    if isinstance(model, HertzModel):
        return force_hertz(model, delta)
    raise TypeError(f"unknown force model {type(model)!r}")


def model_force_gradient(model, q, geom: RobotGeometry,
                         surf: SurfaceGeometry) -> np.ndarray:
    """d mean-force / d q for any model variant, shape (..., 3)."""
    q = np.asarray(q, dtype=float)
    dgrad = penetration_gradient(q, geom, surf)
    if isinstance(model, HookModel):
        return model.stiffness * dgrad
    if isinstance(model, HertzModel):
        delta = penetration_depth(forward_kinematics(q, geom), surf)
        slope = np.where(delta > 0.0,
                         model.stiffness * model.exponent
                         * np.power(np.maximum(delta, 1e-300),
                                    model.exponent - 1.0),
                         0.0)
        return slope[..., None] * dgrad
    if isinstance(model, HybridModel):
        gp_grad = gp_mod.mean_gradient(model.gp, q)
        return model.hook.stiffness * dgrad + gp_grad
    raise TypeError(f"unknown force model {type(model)!r}")


def model_sigma(model, q):
    """Posterior force standard deviation; zero for pure spring models."""
    q = np.asarray(q, dtype=float)
    if isinstance(model, HybridModel):
        _, var = gp_mod.predict(model.gp, q)
        return np.sqrt(var)
    return np.zeros(q.shape[:-1])


def fit_hook(deltas, forces) -> HookModel:
    """Least-squares line through the origin: K_e = sum dF / sum d^2."""
    deltas = np.asarray(deltas, dtype=float)
    forces = np.asarray(forces, dtype=float)
    mask = deltas > 0
    if not mask.any():
        raise IdentificationError("no samples with positive penetration")
    num = float(deltas[mask] @ forces[mask])
    den = float(deltas[mask] @ deltas[mask])
    if num <= 0:
        raise IdentificationError("data implies nonpositive stiffness")
    return HookModel(stiffness=num / den)


def fit_hertz(deltas, forces, lock_exponent: float | None = None,
              max_iters: int = 100, tol: float = 1e-10) -> HertzModel:
    """Two-stage power-law identification.

    Stage 1 seeds (K_e, alpha) by linear regression of log F on log delta
    over strictly positive samples; stage 2 refines by damped Gauss-Newton
    on the untransformed squared residuals.  ``lock_exponent`` pins alpha
    (e.g. to the classical 1.5) and refines the stiffness only.
    """
    deltas = np.asarray(deltas, dtype=float)
    forces = np.asarray(forces, dtype=float)
    mask = (deltas > 0) & (forces > 0)
    if mask.sum() < 2:
        raise IdentificationError(
            "need >= 2 samples with positive penetration and force")
    ld, lf = np.log(deltas[mask]), np.log(forces[mask])

    if lock_exponent is not None:
        alpha = float(lock_exponent)
        log_k = np.mean(lf - alpha * ld)
    else:
        A = np.column_stack([np.ones_like(ld), ld])
        (log_k, alpha), *_ = np.linalg.lstsq(A, lf, rcond=None)
    k = float(np.exp(log_k))

    d_fit, f_fit = deltas[deltas > 0], forces[deltas > 0]

    def sse(k_, a_):
        return float(np.sum((k_ * d_fit**a_ - f_fit)**2))

    best = sse(k, alpha)
    for _ in range(max_iters):
        pow_da = d_fit**alpha
        r = k * pow_da - f_fit
        jac_cols = [pow_da] if lock_exponent is not None else [
            pow_da, k * pow_da * np.log(d_fit)]
        J = np.column_stack(jac_cols)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        scale = 1.0
        while scale > 1e-12:
            k_t = k + scale * step[0]
            a_t = alpha if lock_exponent is not None else alpha + scale * step[1]
            if k_t > 0 and a_t > 0:
                trial = sse(k_t, a_t)
                if trial <= best:
                    break
            scale *= 0.5
        else:
            break
        improved = best - trial
        k, alpha, best = k_t, a_t, trial
        if improved <= tol * max(best, 1e-30):
            break
    return HertzModel(stiffness=k, exponent=alpha)


def rmse(model, Q, forces, geom: RobotGeometry,
         surf: SurfaceGeometry) -> float:
    """Root-mean-square force prediction error over (q, force) samples."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    forces = np.asarray(forces, dtype=float)
    if Q.shape[0] == 0:
        raise ValueError("empty evaluation data")
    pred = model_force(model, Q, geom, surf)
    return float(np.sqrt(np.mean((pred - forces)**2)))
