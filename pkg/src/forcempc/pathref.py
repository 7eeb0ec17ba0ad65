"""Reference paths over a scalar progress parameter and the virtual system.

A path maps the progress parameter theta in [-1, 0] to the controlled
outputs (y-position [m], z-position [m], normal force [N]).  Progress is
driven by a virtual double integrator whose input is chosen by the
optimizer, so reference speed is a controller degree of freedom.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

log = logging.getLogger(__name__)

THETA_MIN, THETA_MAX = -1.0, 0.0


@dataclass(frozen=True)
class VirtualState:
    """Progress state: z1 = theta (dimensionless), z2 = theta-dot [1/s]."""

    z1: float
    z2: float

    def stacked(self) -> np.ndarray:
        return np.array([self.z1, self.z2])

    @classmethod
    def from_stacked(cls, z) -> "VirtualState":
        z = np.asarray(z, dtype=float)
        return cls(z1=float(z[0]), z2=float(z[1]))


def virtual_dynamics(z, v) -> np.ndarray:
    """Double integrator z1' = z2, z2' = v.  Broadcasts over (..., 2)."""
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.stack([z[..., 1], np.broadcast_to(v, z[..., 1].shape)], axis=-1)


@dataclass(frozen=True)
class PathDefinition:
    """Smooth reference r(theta) -> (p_y, p_z, F_n) on theta in [-1, 0].

    ``offsets`` shift the whole reference (used to jitter training runs),
    ``force_scale`` rescales the force profile around its midpoint.
    """

    kind: str = "sine"
    params: dict = field(default_factory=dict)
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(3))
    _spline: CubicSpline | None = field(default=None, repr=False,
                                        compare=False)

    def __post_init__(self):
        object.__setattr__(self, "offsets",
                           np.asarray(self.offsets, dtype=float))
        if self.kind == "table":
            knots = np.asarray(self.params["theta"], dtype=float)
            values = np.asarray(self.params["values"], dtype=float)
            object.__setattr__(
                self, "_spline", CubicSpline(knots, values, axis=0))
        elif self.kind != "sine":
            raise ValueError(f"unknown path kind {self.kind!r}")

    def _clamp(self, theta):
        theta = np.asarray(theta, dtype=float)
        if np.any(theta < THETA_MIN - 1e-9) or np.any(theta > THETA_MAX + 1e-9):
            log.warning("path parameter %s outside [-1, 0]; clamping",
                        np.atleast_1d(theta))
        return np.clip(theta, THETA_MIN, THETA_MAX)

    def eval(self, theta) -> np.ndarray:
        """Reference output at theta, shape (..., 3)."""
        t = self._clamp(theta)
        if self.kind == "sine":
            p = self._sine_params()
            s = t + 1.0
            ref = np.stack([
                p["y0"] + p["y_span"] * s,
                p["z0"] + p["z_amp"] * np.sin(4 * np.pi * s),
                p["f0"] + p["f_amp"] * np.sin(2 * np.pi * s),
            ], axis=-1)
        else:
            ref = self._spline(t)
        return ref + self.offsets

    def derivative(self, theta) -> np.ndarray:
        """d r / d theta, shape (..., 3)."""
        t = self._clamp(theta)
        if self.kind == "sine":
            p = self._sine_params()
            s = t + 1.0
            return np.stack([
                np.broadcast_to(p["y_span"], np.shape(t)),
                p["z_amp"] * 4 * np.pi * np.cos(4 * np.pi * s),
                p["f_amp"] * 2 * np.pi * np.cos(2 * np.pi * s),
            ], axis=-1)
        return self._spline(t, 1)

    def _sine_params(self) -> dict:
        p = {"y0": 0.15, "y_span": 0.10, "z0": 0.68, "z_amp": 0.02,
             "f0": 3.0, "f_amp": 1.5}
        p.update(self.params)
        return p

    def with_offsets(self, d_y=0.0, d_z=0.0, d_f=0.0) -> "PathDefinition":
        return PathDefinition(kind=self.kind, params=self.params,
                              offsets=self.offsets + np.array([d_y, d_z, d_f]))


def eval_path(path: PathDefinition, theta) -> np.ndarray:
    return path.eval(theta)


def path_error(y_model, z, path: PathDefinition) -> np.ndarray:
    """Path-following error e = r(z1) - y_model for outputs (p_y, p_z, F_n)."""
    y_model = np.asarray(y_model, dtype=float)
    z = np.asarray(z, dtype=float)
    return path.eval(z[..., 0]) - y_model
