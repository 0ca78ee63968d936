"""Waypoint containers, discrete path operators, and trajectory CSV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# Dense operators get unwieldy past this; long recordings should be resampled.
MAX_NODE_COUNT = 2000


class TrajectoryError(ValueError):
    """Invalid trajectory data or operator request."""


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise TrajectoryError(f"points must be a T x d array, got shape {pts.shape}")
    T, d = pts.shape
    if T < 2:
        raise TrajectoryError(f"need at least 2 waypoints, got {T}")
    if d not in (2, 3):
        raise TrajectoryError(f"dimension must be 2 or 3, got {d}")
    if not np.all(np.isfinite(pts)):
        raise TrajectoryError("waypoints contain non-finite coordinates")
    return pts


@dataclass(frozen=True)
class Trajectory:
    """Ordered waypoints sampled at a fixed timestep.

    ``points`` is a T x d array (meters), ``dt`` the spacing in seconds.
    Instances are immutable; the array is marked read-only on construction.
    """

    points: np.ndarray
    dt: float

    def __post_init__(self):
        pts = _as_points(self.points)
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise TrajectoryError(f"dt must be positive and finite, got {self.dt}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def duration(self) -> float:
        """Total time span in seconds."""
        return (self.n_points - 1) * self.dt

    def times(self) -> np.ndarray:
        return np.arange(self.n_points) * self.dt

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


@dataclass(frozen=True)
class OperatorSet:
    """Discrete operators over a path of T nodes.

    laplacian:   T x T path-graph Laplacian (node degree on the diagonal,
                 -1 between adjacent nodes).
    first_diff:  (T-1) x T forward difference stencil [-1, +1].
    second_diff: (T-2) x T central second difference stencil [+1, -2, +1].
    """

    laplacian: np.ndarray
    first_diff: np.ndarray
    second_diff: np.ndarray
    # sparse copies kept for fast quadratic-form assembly
    _sparse: tuple = field(repr=False, compare=False, default=None)

    @property
    def n_points(self) -> int:
        return self.laplacian.shape[0]

    def sparse(self):
        """(L, E, R) as CSR matrices."""
        return self._sparse


def _sparse_operators(T: int):
    diag = np.full(T, 2.0)
    diag[0] = diag[-1] = 1.0
    ones = np.ones(T - 1)
    L = sp.diags([diag, -ones, -ones], [0, -1, 1], format="csr")
    E = sp.diags([-np.ones(T - 1), np.ones(T - 1)], [0, 1], shape=(T - 1, T), format="csr")
    R = sp.diags(
        [np.ones(T - 2), -2.0 * np.ones(T - 2), np.ones(T - 2)],
        [0, 1, 2],
        shape=(T - 2, T),
        format="csr",
    )
    return L, E, R


def build_operators(T: int) -> OperatorSet:
    """Construct the Laplacian and finite-difference operators for T nodes.

    Requires T >= 3 (the second difference needs three points) and
    T <= MAX_NODE_COUNT (operators are materialized densely).
    """
    if T < 3:
        raise TrajectoryError(f"operators need at least 3 nodes, got {T}")
    if T > MAX_NODE_COUNT:
        raise TrajectoryError(f"node count {T} exceeds cap {MAX_NODE_COUNT}")
    Ls, Es, Rs = _sparse_operators(T)
    L, E, R = Ls.toarray(), Es.toarray(), Rs.toarray()
    for m in (L, E, R):
        m.setflags(write=False)
    return OperatorSet(laplacian=L, first_diff=E, second_diff=R, _sparse=(Ls, Es, Rs))


def resample(traj: Trajectory, T_new: int) -> Trajectory:
    """Resample to exactly T_new points by linear interpolation in index space.

    Endpoints are preserved exactly; total duration is preserved by scaling dt.
    Resampling an already T_new-point trajectory is an exact no-op on the
    points (the interpolation grid coincides with the sample grid).
    """
    if T_new < 3:
        raise TrajectoryError(f"resample target must be >= 3, got {T_new}")
    T = traj.n_points
    s_old = np.arange(T) / (T - 1)
    s_new = np.arange(T_new) / (T_new - 1)
    pts = np.column_stack(
        [np.interp(s_new, s_old, traj.points[:, k]) for k in range(traj.dim)]
    )
    pts[0] = traj.points[0]
    pts[-1] = traj.points[-1]
    dt_new = traj.dt * (T - 1) / (T_new - 1)
    return Trajectory(points=pts, dt=dt_new)


def write_csv(traj: Trajectory, path) -> None:
    """Write as rows of t,x,y[,z] with the matching header line."""
    header = ["t", "x", "y", "z"][: traj.dim + 1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, p in zip(traj.times(), traj.points):
            w.writerow([repr(float(t))] + [repr(float(c)) for c in p])


def read_csv(path) -> Trajectory:
    """Read a trajectory written by write_csv (or any t,x,y[,z] file)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] not in (["t", "x", "y"], ["t", "x", "y", "z"]):
        raise TrajectoryError(f"{path}: first line must be 't,x,y' or 't,x,y,z'")
    d = len(rows[0]) - 1
    body = [r for r in rows[1:] if r]
    if len(body) < 2:
        raise TrajectoryError(f"{path}: need at least 2 waypoint rows")
    data = np.array([[float(v) for v in r] for r in body])
    if data.shape[1] != d + 1:
        raise TrajectoryError(f"{path}: row width does not match header")
    t = data[:, 0]
    steps = np.diff(t)
    if len(steps) == 0 or np.any(steps <= 0):
        raise TrajectoryError(f"{path}: timestamps must be strictly increasing")
    if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9):
        raise TrajectoryError(f"{path}: timestep must be uniform")
    return Trajectory(points=data[:, 1:], dt=float(steps[0]))
