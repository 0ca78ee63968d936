"""Target tracking: constant-velocity unscented Kalman filter.

The state stacks target position and velocity per axis; acceleration is
not modeled explicitly but enters through white-noise process noise of
intensity q.  Both the process and measurement maps are linear, so the
unscented transform here is exact; the sigma-point machinery is kept so
the filter structure matches how it would run with nonlinear models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FactorizationError(ValueError):
    """Covariance square root failed (matrix not positive semidefinite)."""


@dataclass(frozen=True)
class UkfParams:
    """Sigma-point spread (alpha, beta, kappa) and noise intensities.

    q is the white-acceleration process noise intensity in m^2/s^3;
    r_obs the per-axis observation variance in m^2.
    """

    alpha: float = 1.0
    beta: float = 2e-6
    kappa: float = 0.0
    q: float = 1.0
    r_obs: float = 0.005 ** 2

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.q <= 0 or self.r_obs <= 0:
            raise ValueError("q and r_obs must be positive")

    def lam(self, m: int) -> float:
        lam = self.alpha ** 2 * (m + self.kappa) - m
        if m + lam <= 0.0:
            raise ValueError(f"kappa={self.kappa} leaves m + lambda <= 0 for m={m}")
        return lam


@dataclass(frozen=True)
class UkfBelief:
    """Gaussian belief over [positions; velocities] (length 2d)."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.covariance, dtype=float)
        m = mean.shape[0]
        if mean.ndim != 1 or m % 2 != 0 or cov.shape != (m, m):
            raise ValueError(f"bad belief shapes: mean {mean.shape}, cov {cov.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("belief contains non-finite values")
        if np.abs(cov - cov.T).max() > 1e-12:
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0.0:
            raise ValueError("covariance is not positive definite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        """Number of spatial axes d."""
        return self.mean.shape[0] // 2

    @property
    def position(self) -> np.ndarray:
        return self.mean[: self.dim]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[self.dim:]

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.velocity))


@dataclass(frozen=True)
class SigmaPointSet:
    points: np.ndarray         # (2m+1, m); row 0 is the belief mean
    mean_weights: np.ndarray   # (2m+1,)
    cov_weights: np.ndarray    # (2m+1,)

    def __post_init__(self):
        if abs(self.mean_weights.sum() - 1.0) > 1e-12:
            raise ValueError("mean weights must sum to 1")


def _sym_sqrt(C: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root with a one-shot jitter fallback."""
    w, V = np.linalg.eigh(C)
    tol = 1e-10 * max(1.0, float(w.max(initial=0.0)))
    if w.min() < -tol:
        C = C + 1e-12 * np.eye(C.shape[0])
        w, V = np.linalg.eigh(C)
        if w.min() < -tol:
            raise FactorizationError(
                f"covariance not PSD (min eigenvalue {w.min():.3e})"
            )
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def sigma_points(belief: UkfBelief, params: UkfParams) -> SigmaPointSet:
    """Scaled-transform sigma points reproducing the belief's two moments."""
    m = belief.mean.shape[0]
    lam = params.lam(m)
    S = _sym_sqrt((m + lam) * belief.covariance)
    pts = np.empty((2 * m + 1, m))
    pts[0] = belief.mean
    pts[1:m + 1] = belief.mean + S.T
    pts[m + 1:] = belief.mean - S.T
    wm = np.full(2 * m + 1, 1.0 / (2.0 * (m + lam)))
    wc = wm.copy()
    wm[0] = lam / (m + lam)
    wc[0] = lam / (m + lam) + (1.0 - params.alpha ** 2 + params.beta)
    return SigmaPointSet(points=pts, mean_weights=wm, cov_weights=wc)


def _unscented_moments(pts, wm, wc):
    mean = wm @ pts
    dev = pts - mean
    cov = (dev * wc[:, None]).T @ dev
    return mean, cov


def _transition(d: int, dt: float, q: float):
    F = np.eye(2 * d)
    F[:d, d:] = dt * np.eye(d)
    Q = np.zeros((2 * d, 2 * d))
    Q[:d, :d] = q * dt ** 3 / 3.0 * np.eye(d)
    Q[:d, d:] = Q[d:, :d] = q * dt ** 2 / 2.0 * np.eye(d)
    Q[d:, d:] = q * dt * np.eye(d)
    return F, Q


def _symmetrize(C):
    return 0.5 * (C + C.T)


def predict(belief: UkfBelief, params: UkfParams, dt: float) -> UkfBelief:
    """Propagate the belief dt seconds through the motion model."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    d = belief.dim
    F, Q = _transition(d, dt, params.q)
    sp = sigma_points(belief, params)
    prop = sp.points @ F.T
    mean, cov = _unscented_moments(prop, sp.mean_weights, sp.cov_weights)
    return UkfBelief(mean=mean, covariance=_symmetrize(cov + Q))


def update(belief: UkfBelief, params: UkfParams, z) -> UkfBelief:
    """Fold in an observed target position.

    A non-finite observation is rejected: the same belief object comes
    back unchanged, which callers can detect with an identity check.
    """
    z = np.asarray(z, dtype=float)
    d = belief.dim
    if z.shape != (d,) or not np.all(np.isfinite(z)):
        return belief
    sp = sigma_points(belief, params)
    gamma = sp.points[:, :d]                      # measurement model: position block
    z_hat, S = _unscented_moments(gamma, sp.mean_weights, sp.cov_weights)
    S = S + params.r_obs * np.eye(d)
    dev_x = sp.points - belief.mean
    dev_z = gamma - z_hat
    C_xz = (dev_x * sp.cov_weights[:, None]).T @ dev_z
    K = np.linalg.solve(S.T, C_xz.T).T
    mean = belief.mean + K @ (z - z_hat)
    cov = _symmetrize(belief.covariance - K @ S @ K.T)
    return UkfBelief(mean=mean, covariance=cov)


def forecast(belief: UkfBelief, params: UkfParams, horizon: float):
    """Predicted target position and its covariance ``horizon`` seconds out.

    Equivalent to repeated prediction without measurement updates (the
    constant-velocity discretization composes exactly over sub-steps).
    """
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    d = belief.dim
    if horizon == 0.0:
        return belief.position.copy(), belief.covariance[:d, :d].copy()
    ahead = predict(belief, params, horizon)
    return ahead.position.copy(), ahead.covariance[:d, :d].copy()


def initial_belief(z, params: UkfParams, vel_var: float = 1.0) -> UkfBelief:
    """Belief from a first observation: position there, velocity unknown."""
    z = np.asarray(z, dtype=float)
    d = z.shape[0]
    mean = np.concatenate([z, np.zeros(d)])
    cov = np.diag([params.r_obs] * d + [vel_var] * d)
    return UkfBelief(mean=mean, covariance=cov)
