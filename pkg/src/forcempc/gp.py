"""Exact Gaussian-process regression for scalar contact-force residuals.

Anisotropic squared-exponential kernel with a constant prior mean:

    kappa(x, x') = s2 * exp(-0.5 * sum_i (x_i - x'_i)^2 / l_i^2)

Training maximizes the log marginal likelihood

    lml = -0.5 y~' a - sum_i log L_ii - n/2 log(2 pi),
    a = (K + s_n2 I)^{-1} y~,   y~ = y - m

over log-hyperparameters (log s2, log l_1..d, log s_n2) by gradient ascent
with a backtracking line search, restarted from log-uniform draws.  The
posterior keeps the Cholesky factor L and weight vector a, so predictions
cost O(n) for the mean and O(n^2) for the variance per query.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

FORMAT_VERSION = 1

# Bounds for log-hyperparameters during the ascent (keeps iterates sane).
_LOG_BOUNDS = {
    "signal_var": (np.log(1e-8), np.log(1e4)),
    "lengthscale": (np.log(1e-4), np.log(1e3)),
    "noise_var": (np.log(1e-12), np.log(1e2)),
}

# Restart draws: log-uniform over these ranges.
_DRAW_RANGES = {
    "lengthscale": (1e-3, 10.0),
    "signal_var": (1e-4, 100.0),
    "noise_var": (1e-8, 1.0),
}

_JITTER_LADDER = (1e-10, 1e-8, 1e-6)  # scaled by tr(K)/n


class GpTrainingError(RuntimeError):
    """No hyperparameter restart produced a factorizable kernel."""


class KernelFactorizationError(RuntimeError):
    """Kernel matrix stayed indefinite after the full jitter ladder."""


@dataclass(frozen=True)
class KernelConfig:
    """Squared-exponential kernel hyperparameters (all strictly positive)."""

    signal_var: float
    lengthscales: np.ndarray
    prior_mean: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lengthscales",
                           np.atleast_1d(np.asarray(self.lengthscales,
                                                    dtype=float)))
        if self.signal_var <= 0 or np.any(self.lengthscales <= 0):
            raise ValueError("kernel hyperparameters must be positive")


@dataclass(frozen=True)
class Dataset:
    """Training inputs X (n, d), targets y (n,) and a noise variance."""

    X: np.ndarray
    y: np.ndarray
    noise_var: float = 0.0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if X.shape[0] != y.shape[0] or X.shape[0] < 1:
            raise ValueError("X rows and y length must match and be >= 1")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise ValueError("dataset entries must be finite")
        if self.noise_var < 0:
            raise ValueError("noise variance must be >= 0")


def kernel_eval(cfg: KernelConfig, x, x_other) -> float:
    """Kernel value for a single pair of d-vectors."""
    x = np.asarray(x, dtype=float)
    x_other = np.asarray(x_other, dtype=float)
    r = (x - x_other) / cfg.lengthscales
    return float(cfg.signal_var * np.exp(-0.5 * np.dot(r, r)))


def kernel_matrix(cfg: KernelConfig, X, Z=None) -> np.ndarray:
    """Cross-covariance matrix kappa(X, Z), shape (n, m)."""
    X = np.atleast_2d(np.asarray(X, dtype=float)) / cfg.lengthscales
    Z = X if Z is None else (np.atleast_2d(np.asarray(Z, dtype=float))
                             / cfg.lengthscales)
    sq = (np.sum(X**2, axis=1)[:, None] + np.sum(Z**2, axis=1)[None, :]
          - 2.0 * X @ Z.T)
    return cfg.signal_var * np.exp(-0.5 * np.maximum(sq, 0.0))


def _chol_with_jitter(K: np.ndarray, noise_var: float):
    """Cholesky of K + noise I, escalating jitter until it factorizes."""
    n = K.shape[0]
    scale = np.trace(K) / n
    A = K + noise_var * np.eye(n)
    for level in (0.0,) + _JITTER_LADDER:
        jitter = level * scale
        try:
            L = cholesky(A + jitter * np.eye(n), lower=True)
            return L, jitter
        except np.linalg.LinAlgError:
            continue
    raise KernelFactorizationError(
        "kernel matrix not positive definite after jitter ladder")


@dataclass(frozen=True)
class GpPosterior:
    """Trained GP: hyperparameters, inputs, Cholesky factor and weights."""

    config: KernelConfig
    X: np.ndarray
    L: np.ndarray
    alpha: np.ndarray
    noise_var: float
    jitter: float = 0.0

    @property
    def n_train(self) -> int:
        return self.X.shape[0]


def build_posterior(data: Dataset, cfg: KernelConfig,
                    noise_var: float) -> GpPosterior:
    """Factorize the training system and precompute prediction weights."""
    K = kernel_matrix(cfg, data.X)
    L, jitter = _chol_with_jitter(K, noise_var)
    resid = data.y - cfg.prior_mean
    alpha = cho_solve((L, True), resid)
    recomposed = L @ L.T
    target = K + (noise_var + jitter) * np.eye(K.shape[0])
    rel = (np.max(np.abs(recomposed - target))
           / max(np.max(np.abs(target)), 1e-300))
    if rel > 1e-10:
        raise KernelFactorizationError(
            f"factorization recomposition error {rel:.2e}")
    return GpPosterior(config=cfg, X=data.X.copy(), L=L, alpha=alpha,
                       noise_var=noise_var, jitter=jitter)


def predict(gp: GpPosterior, x_query):
    """Posterior mean and variance at query points.

    Accepts a single d-vector or an (m, d) batch; returns floats or
    (m,) arrays.  Variance is clamped to 0 for round-off excursions in
    (-1e-10, 0); anything below -1e-10 raises.
    """
    x_query = np.asarray(x_query, dtype=float)
    single = x_query.ndim == 1
    Xq = np.atleast_2d(x_query)
    k = kernel_matrix(gp.config, gp.X, Xq)       # (n, m)
    mean = gp.config.prior_mean + k.T @ gp.alpha
    v = solve_triangular(gp.L, k, lower=True)    # (n, m)
    var = gp.config.signal_var - np.sum(v**2, axis=0)
    if np.any(var < -1e-10):
        raise KernelFactorizationError(
            f"negative posterior variance {var.min():.3e}")
    var = np.maximum(var, 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def predict_mean(gp: GpPosterior, x_query):
    """Posterior mean only (skips the variance back-substitution)."""
    x_query = np.asarray(x_query, dtype=float)
    single = x_query.ndim == 1
    Xq = np.atleast_2d(x_query)
    k = kernel_matrix(gp.config, gp.X, Xq)
    mean = gp.config.prior_mean + k.T @ gp.alpha
    return float(mean[0]) if single else mean


def mean_gradient(gp: GpPosterior, x_query) -> np.ndarray:
    """Gradient of the posterior mean w.r.t. the query point(s).

    For the SE kernel d kappa(x*, xi)/dx* = -kappa * (x* - xi)/l^2, so the
    mean gradient is an O(n d) contraction against alpha.  Shape (m, d)
    for batched queries, (d,) for a single one.
    """
    x_query = np.asarray(x_query, dtype=float)
    single = x_query.ndim == 1
    Xq = np.atleast_2d(x_query)
    k = kernel_matrix(gp.config, gp.X, Xq)       # (n, m)
    diff = Xq[:, None, :] - gp.X[None, :, :]     # (m, n, d)
    scaled = diff / gp.config.lengthscales**2
    grad = -np.einsum("nm,mnd,n->md", k, scaled, gp.alpha)
    return grad[0] if single else grad


def _theta_pack(cfg: KernelConfig, noise_var: float) -> np.ndarray:
    return np.concatenate([[np.log(cfg.signal_var)],
                           np.log(cfg.lengthscales),
                           [np.log(max(noise_var, 1e-300))]])


def _theta_unpack(theta: np.ndarray, d: int, prior_mean: float):
    cfg = KernelConfig(signal_var=float(np.exp(theta[0])),
                       lengthscales=np.exp(theta[1:1 + d]),
                       prior_mean=prior_mean)
    return cfg, float(np.exp(theta[-1]))


def log_marginal_likelihood(data: Dataset, cfg: KernelConfig,
                            noise_var: float, with_gradient: bool = False):
    """Gaussian LML and (optionally) its gradient in log-hyperparameters.

    Gradient entries follow d lml/d theta_j = 0.5 tr((aa' - A^{-1}) dK/d
    theta_j) with A = K + s_n2 I, evaluated analytically for the SE kernel.
    """
    n, d = data.X.shape
    K = kernel_matrix(cfg, data.X)
    L, jitter = _chol_with_jitter(K, noise_var)
    resid = data.y - cfg.prior_mean
    alpha = cho_solve((L, True), resid)
    lml = (-0.5 * resid @ alpha - np.sum(np.log(np.diag(L)))
           - 0.5 * n * np.log(2.0 * np.pi))
    if not with_gradient:
        return float(lml)

    A_inv = cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - A_inv
    grad = np.empty(d + 2)
    grad[0] = 0.5 * np.sum(W * K)                    # d/d log signal_var
    Xs = data.X / cfg.lengthscales
    for i in range(d):
        D = (Xs[:, i][:, None] - Xs[:, i][None, :])**2
        grad[1 + i] = 0.5 * np.sum(W * (K * D))      # d/d log l_i
    grad[-1] = 0.5 * noise_var * np.trace(W)         # d/d log noise_var
    return float(lml), grad


@dataclass(frozen=True)
class FitResult:
    config: KernelConfig
    noise_var: float
    lml: float
    grad_norm: float
    restarts_tried: int = 0
    restarts_failed: int = 0


def _ascend(data: Dataset, theta0: np.ndarray, prior_mean: float,
            max_iters: int, gtol: float):
    """Projected gradient ascent with backtracking from one start point."""
    d = data.X.shape[1]
    lo = np.concatenate([[_LOG_BOUNDS["signal_var"][0]],
                         np.full(d, _LOG_BOUNDS["lengthscale"][0]),
                         [_LOG_BOUNDS["noise_var"][0]]])
    hi = np.concatenate([[_LOG_BOUNDS["signal_var"][1]],
                         np.full(d, _LOG_BOUNDS["lengthscale"][1]),
                         [_LOG_BOUNDS["noise_var"][1]]])

    def objective(theta):
        cfg, s_n2 = _theta_unpack(theta, d, prior_mean)
        try:
            return log_marginal_likelihood(data, cfg, s_n2,
                                           with_gradient=True)
        except KernelFactorizationError:
            return -np.inf, np.zeros_like(theta)

    theta = np.clip(theta0, lo, hi)
    lml, grad = objective(theta)
    if not np.isfinite(lml):
        return None
    step = 0.1
    for _ in range(max_iters):
        gnorm = np.linalg.norm(grad, ord=np.inf)
        if gnorm < gtol:
            break
        accepted = False
        while step > 1e-14:
            trial = np.clip(theta + step * grad, lo, hi)
            lml_t, grad_t = objective(trial)
            # Armijo condition on the actually realized (projected) step.
            if np.isfinite(lml_t) and lml_t >= lml + 1e-4 * grad @ (trial
                                                                    - theta):
                theta, lml, grad = trial, lml_t, grad_t
                step = min(step * 1.5, 10.0)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    return theta, lml, float(np.linalg.norm(grad, ord=np.inf))


def fit_hyperparams(data: Dataset, restarts: int = 8, seed: int = 0,
                    prior_mean: float = 0.0, max_iters: int = 2000,
                    gtol: float = 1e-6) -> FitResult:
    """Maximize the LML over restarts; return the best optimum found.

    Restart 0 starts from moment-based heuristics (per-dimension input
    spread, target variance); the remaining ones draw log-uniformly from
    the standard ranges.
    """
    if data.X.shape[0] < 2:
        raise ValueError("need at least 2 points to fit hyperparameters")
    d = data.X.shape[1]
    rng = np.random.default_rng(seed)
    y_var = max(np.var(data.y), 1e-8)
    spread = np.maximum(np.std(data.X, axis=0), 1e-3)
    starts = [np.concatenate([[np.log(y_var)], np.log(spread),
                              [np.log(0.05 * y_var)]])]
    for _ in range(restarts):
        draw = [rng.uniform(*np.log(_DRAW_RANGES["signal_var"]))]
        draw += list(rng.uniform(*np.log(_DRAW_RANGES["lengthscale"]),
                                 size=d))
        draw += [rng.uniform(*np.log(_DRAW_RANGES["noise_var"]))]
        starts.append(np.array(draw))

    best = None
    failed = 0
    for theta0 in starts:
        out = _ascend(data, theta0, prior_mean, max_iters, gtol)
        if out is None:
            failed += 1
            continue
        if best is None or out[1] > best[1]:
            best = out
    if best is None:
        raise GpTrainingError("all restarts failed to factorize the kernel")
    theta, lml, gnorm = best
    cfg, noise_var = _theta_unpack(theta, d, prior_mean)
    return FitResult(config=cfg, noise_var=noise_var, lml=lml,
                     grad_norm=gnorm, restarts_tried=len(starts),
                     restarts_failed=failed)


def fit(data: Dataset, restarts: int = 8, seed: int = 0,
        prior_mean: float = 0.0) -> GpPosterior:
    """Train hyperparameters and build the posterior in one call."""
    res = fit_hyperparams(data, restarts=restarts, seed=seed,
                          prior_mean=prior_mean)
    return build_posterior(data, res.config, res.noise_var)


def subsample_by_distance(points, min_dist: float) -> np.ndarray:
    """Greedy cover: keep a point iff no earlier kept point is closer.

    Deterministic in input order.  Every retained pair is >= min_dist
    apart (up to round-off) and every rejected point lies within min_dist
    of some retained one.  Returns the retained indices.
    """
    if min_dist <= 0:
        raise ValueError("min_dist must be positive")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    thresh = min_dist**2 * (1.0 - 1e-12)
    kept: list[int] = []
    kept_pts = np.empty((0, points.shape[1]))
    for i, p in enumerate(points):
        if kept and np.min(np.sum((kept_pts - p)**2, axis=1)) < thresh:
            continue
        kept.append(i)
        kept_pts = np.vstack([kept_pts, p])
    return np.array(kept, dtype=int)


def save_dataset_csv(data: Dataset, path) -> None:
    """Write a 3-input residual dataset as q1,q2,q3,residual_force."""
    if data.X.shape[1] != 3:
        raise ValueError("CSV schema is fixed to 3 joint-angle inputs")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["q1", "q2", "q3", "residual_force"])
        for row, target in zip(data.X, data.y):
            writer.writerow([f"{v:.12g}" for v in row]
                            + [f"{target:.12g}"])


def load_dataset_csv(path, noise_var: float = 0.0) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["q1", "q2", "q3", "residual_force"]:
            raise ValueError(f"unexpected dataset header {header}")
        rows = []
        for idx, row in enumerate(reader, start=2):
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"bad value in row {idx}: {row}") from exc
    arr = np.asarray(rows, dtype=float)
    return Dataset(X=arr[:, :3], y=arr[:, 3], noise_var=noise_var)


def save_posterior(gp: GpPosterior, path) -> None:
    """Serialize a posterior as a flat npz bundle with a format version."""
    np.savez(path,
             format_version=FORMAT_VERSION,
             signal_var=gp.config.signal_var,
             lengthscales=gp.config.lengthscales,
             prior_mean=gp.config.prior_mean,
             noise_var=gp.noise_var,
             jitter=gp.jitter,
             X=gp.X, L=gp.L, alpha=gp.alpha)


def load_posterior(path) -> GpPosterior:
    with np.load(path) as bundle:
        version = int(bundle["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported posterior format {version}")
        cfg = KernelConfig(signal_var=float(bundle["signal_var"]),
                           lengthscales=bundle["lengthscales"],
                           prior_mean=float(bundle["prior_mean"]))
        return GpPosterior(config=cfg, X=bundle["X"], L=bundle["L"],
                           alpha=bundle["alpha"],
                           noise_var=float(bundle["noise_var"]),
                           jitter=float(bundle["jitter"]))
