"""Shape-preserving trajectory deformation as constrained least squares.

A reproduction y deviates from a demonstration only as much as its
constraints require: the objective matches the demonstration's graph-
Laplacian coordinates (local shape) while penalizing stretching and
bending, and waypoint constraints attract points into (or repel them
out of) L1 balls.  Everything reduces to dense symmetric solves; the
executed prefix of a trajectory can be frozen and only the remaining
suffix re-optimized.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from .trajectory import Trajectory, build_operators

_ATTRACT_PASSES = 10
_REPEL_PASSES = 5
_REFINE_STEPS = 2
_FEAS_TOL = 1e-9


class ElasticError(ValueError):
    """Malformed problem or unusable partition."""


class InfeasibleConstraintError(ElasticError):
    """The constraint set admits no solution (or the solver cannot reach one)."""

    def __init__(self, msg, constraints=()):
        super().__init__(msg)
        self.constraints = tuple(constraints)


class UnderdeterminedError(ElasticError):
    """No pinning constraint: the objective is translation-invariant."""


class ConstraintKind(enum.Enum):
    ATTRACT = "attract"
    REPEL = "repel"


@dataclass(frozen=True)
class EnergyWeights:
    """Stretching and bending penalty weights (dimensionless, >= 0)."""

    stretch: float = 0.001
    bend: float = 0.001

    def __post_init__(self):
        for name in ("stretch", "bend"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ElasticError(f"{name} weight must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class PointConstraint:
    """Ties waypoint ``index`` to the L1 ball (center, radius).

    ATTRACT requires the waypoint inside the ball (radius 0 pins it to
    the center exactly); REPEL is an obstacle keep-out requiring the
    waypoint outside.
    """

    index: int
    center: np.ndarray
    radius: float
    kind: ConstraintKind = ConstraintKind.ATTRACT

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        if c.ndim != 1 or not np.all(np.isfinite(c)):
            raise ElasticError(f"constraint center must be a finite vector, got {self.center}")
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "index", int(self.index))
        object.__setattr__(self, "radius", float(self.radius))
        if self.index < 0:
            raise ElasticError(f"constraint index must be >= 0, got {self.index}")
        if not (np.isfinite(self.radius) and self.radius >= 0):
            raise ElasticError(f"constraint radius must be finite and >= 0, got {self.radius}")

    def describe(self) -> str:
        return f"{self.kind.value}(index={self.index}, center={self.center.tolist()}, r={self.radius})"


def attract(index, center, radius=0.0) -> PointConstraint:
    return PointConstraint(index, center, radius, ConstraintKind.ATTRACT)


def repel(index, center, radius) -> PointConstraint:
    return PointConstraint(index, center, radius, ConstraintKind.REPEL)


@dataclass(frozen=True)
class ElasticProblem:
    """A demonstration plus the constraints a reproduction must satisfy.

    ``fixed_prefix_len`` > 0 freezes that many leading waypoints at
    ``prefix_values`` (the already-executed portion); they stay in the
    energy terms but are not decision variables.  Offline solves need at
    least one zero-radius attract constraint (conventionally the start
    pin at index 0) to remove the objective's translation invariance.
    """

    demonstration: Trajectory
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    constraints: tuple = ()
    fixed_prefix_len: int = 0
    prefix_values: np.ndarray | None = None

    def __post_init__(self):
        T, d = self.demonstration.points.shape
        if T < 3:
            raise ElasticError(f"demonstration needs at least 3 points, got {T}")
        object.__setattr__(self, "constraints", tuple(self.constraints))
        for c in self.constraints:
            if not isinstance(c, PointConstraint):
                raise ElasticError(f"not a PointConstraint: {c!r}")
            if c.index >= T:
                raise ElasticError(f"constraint index {c.index} out of range for T={T}")
            if c.center.shape != (d,):
                raise ElasticError(
                    f"constraint center dimension {c.center.shape[0]} does not match d={d}"
                )
        t = int(self.fixed_prefix_len)
        object.__setattr__(self, "fixed_prefix_len", t)
        if t < 0 or t >= T:
            raise ElasticError(f"fixed_prefix_len must be in [0, T), got {t}")
        if t > 0:
            pv = np.asarray(self.prefix_values, dtype=float)
            if pv.shape != (t, d):
                raise ElasticError(
                    f"prefix_values shape {pv.shape} does not match (fixed_prefix_len, d)=({t}, {d})"
                )
            if not np.all(np.isfinite(pv)):
                raise ElasticError("prefix_values contain non-finite values")
            pv.setflags(write=False)
            object.__setattr__(self, "prefix_values", pv)
        elif self.prefix_values is not None:
            raise ElasticError("prefix_values given but fixed_prefix_len is 0")

    @property
    def n_points(self) -> int:
        return self.demonstration.n_points

    @property
    def dim(self) -> int:
        return self.demonstration.dim


@lru_cache(maxsize=16)
def _system_matrix(T: int, w_stretch: float, w_bend: float) -> np.ndarray:
    Ls, Es, Rs = build_operators(T).sparse()
    A = (Ls.T @ Ls + w_stretch * (Es.T @ Es) + w_bend * (Rs.T @ Rs)).toarray()
    A.setflags(write=False)
    return A


def assemble_objective(problem: ElasticProblem):
    """Quadratic form of the unconstrained objective.

    Returns (A, b) with A = L'L + w_stretch E'E + w_bend R'R (T x T,
    symmetric PSD, kernel spanned by the constant vector) and
    b = L'L zeta (T x d).  The minimizers solve A y = b per column.
    """
    T = problem.n_points
    A = _system_matrix(T, problem.weights.stretch, problem.weights.bend)
    Ls = build_operators(T).sparse()[0]
    b = Ls.T @ (Ls @ problem.demonstration.points)
    return A, b


def shrink_radius_schedule(initial_r: float, final_r: float, progress: float) -> float:
    """Linearly tighten a constraint radius from initial_r to final_r."""
    if not (np.isfinite(initial_r) and np.isfinite(final_r)) or initial_r < final_r or final_r < 0:
        raise ElasticError(f"need initial_r >= final_r >= 0, got {initial_r}, {final_r}")
    if not (0.0 <= progress <= 1.0):
        raise ElasticError(f"progress must be in [0, 1], got {progress}")
    return (1.0 - progress) * initial_r + progress * final_r


def _l1_ball_project(point: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of ``point`` onto the L1 ball (center, radius)."""
    v = point - center
    a = np.abs(v)
    if a.sum() <= radius:
        return point.copy()
    if radius == 0.0:
        return center.copy()
    # soft threshold: find theta with sum(max(a - theta, 0)) == radius
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.nonzero(u - (css - radius) / np.arange(1, len(u) + 1) > 0)[0].max()
    theta = (css[k] - radius) / (k + 1)
    w = np.sign(v) * np.maximum(a - theta, 0.0)
    return center + w


def _nearest_facet(point: np.ndarray, center: np.ndarray):
    """Sign pattern of the L1-ball facet nearest to ``point``.

    Zero components resolve to +1, so ties go to the facet that is
    lexicographically first by coordinate index.
    """
    v = point - center
    return np.where(v >= 0.0, 1.0, -1.0)


def _solve_equality(A, b, fixed_idx, fixed_vals, cuts):
    """Minimize the quadratic form with waypoints pinned and optional cut rows.

    cuts: list of (waypoint index, facet sign vector, rhs scalar) linear
    equalities s . y_j = rhs coupling the spatial dimensions of one
    waypoint.  Without cuts the problem separates per dimension and a
    single Cholesky factorization serves all columns.
    """
    T, d = b.shape
    if len(fixed_idx) == 0:
        raise UnderdeterminedError(
            "no pinning constraint: add a zero-radius attract constraint "
            "(typically at index 0) to anchor the solution"
        )
    free = np.setdiff1d(np.arange(T), fixed_idx)
    if free.size == 0:
        Y = np.zeros_like(b)
        Y[fixed_idx] = fixed_vals
        return Y
    Aff = A[np.ix_(free, free)]
    rhs = b[free] - A[np.ix_(free, fixed_idx)] @ fixed_vals

    if not cuts:
        try:
            fac = sla.cho_factor(Aff, check_finite=False)
        except np.linalg.LinAlgError as e:
            raise UnderdeterminedError(f"system factorization failed: {e}") from e
        x = sla.cho_solve(fac, rhs, check_finite=False)
        for _ in range(_REFINE_STEPS):
            x += sla.cho_solve(fac, rhs - Aff @ x, check_finite=False)
    else:
        # cuts couple dimensions: stack the per-dimension systems
        nf = free.size
        pos = {w: i for i, w in enumerate(free)}
        n = nf * d
        m = len(cuts)
        K = np.zeros((n + m, n + m))
        for k in range(d):
            K[k * nf:(k + 1) * nf, k * nf:(k + 1) * nf] = Aff
        r = np.zeros(n + m)
        r[:n] = rhs.T.reshape(-1)
        for ci, (wp, s, rv) in enumerate(cuts):
            if wp not in pos:
                continue
            for k in range(d):
                K[n + ci, k * nf + pos[wp]] = s[k]
                K[k * nf + pos[wp], n + ci] = s[k]
            r[n + ci] = rv
        try:
            lu = sla.lu_factor(K, check_finite=False)
        except np.linalg.LinAlgError as e:
            raise UnderdeterminedError(f"system factorization failed: {e}") from e
        sol = sla.lu_solve(lu, r, check_finite=False)
        for _ in range(_REFINE_STEPS):
            sol += sla.lu_solve(lu, r - K @ sol, check_finite=False)
        x = sol[:n].reshape(d, nf).T

    Y = np.zeros_like(b)
    Y[free] = x
    Y[fixed_idx] = fixed_vals
    return Y


def _check_pairwise_feasibility(balls):
    by_index = {}
    for c in balls:
        by_index.setdefault(c.index, []).append(c)
    for idx, group in by_index.items():
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                a, b = group[i], group[j]
                gap = np.abs(a.center - b.center).sum()
                if gap > a.radius + b.radius + _FEAS_TOL:
                    raise InfeasibleConstraintError(
                        f"attract constraints on waypoint {idx} cannot intersect: "
                        f"{a.describe()} vs {b.describe()}",
                        constraints=(a, b),
                    )


class SolveInfo:
    """Active-set summary of a solve (pins actually enforced, cut rows)."""

    def __init__(self, fixed_idx, fixed_vals, cuts):
        self.fixed_idx = np.asarray(fixed_idx, dtype=int)
        self.fixed_vals = np.asarray(fixed_vals, dtype=float)
        self.cuts = list(cuts)


def _solve(problem: ElasticProblem, extra_constraints=()):
    T, d = problem.n_points, problem.dim
    A, b = assemble_objective(problem)
    t = problem.fixed_prefix_len

    active = [c for c in list(problem.constraints) + list(extra_constraints) if c.index >= t]
    attract_all = [c for c in active if c.kind is ConstraintKind.ATTRACT]
    repel_all = [c for c in active if c.kind is ConstraintKind.REPEL]
    _check_pairwise_feasibility(attract_all)

    pins: dict[int, np.ndarray] = {}
    if t > 0:
        for i in range(t):
            pins[i] = problem.prefix_values[i]
    for c in attract_all:
        if c.radius == 0.0:
            pins[c.index] = c.center
    balls = [c for c in attract_all if c.radius > 0.0]

    # hard pins must respect every ball / keep-out sharing their waypoint
    for c in balls + repel_all:
        if c.index in pins:
            gap = np.abs(pins[c.index] - c.center).sum()
            bad = gap > c.radius + _FEAS_TOL if c.kind is ConstraintKind.ATTRACT \
                else gap < c.radius - _FEAS_TOL
            if bad:
                raise InfeasibleConstraintError(
                    f"waypoint {c.index} is pinned at {pins[c.index].tolist()} "
                    f"which violates {c.describe()}",
                    constraints=(c,),
                )

    if not pins:
        raise UnderdeterminedError(
            "no pinning constraint: add a zero-radius attract constraint "
            "(typically at index 0) to anchor the solution"
        )

    def run(fixed: dict) -> tuple[np.ndarray, list]:
        idx = np.array(sorted(fixed), dtype=int)
        vals = np.array([fixed[i] for i in sorted(fixed)], dtype=float)
        cuts: list = []
        Y = _solve_equality(A, b, idx, vals, cuts)
        for _ in range(_REPEL_PASSES):
            new_cuts = []
            for c in repel_all:
                if c.index in fixed:
                    continue
                y = Y[c.index]
                if np.abs(y - c.center).sum() < c.radius - _FEAS_TOL:
                    s = _nearest_facet(y, c.center)
                    new_cuts.append((c.index, s, c.radius + float(s @ c.center)))
                else:
                    for wp, s, rv in cuts:
                        if wp == c.index:
                            new_cuts.append((wp, s, rv))
                            break
            same = len(new_cuts) == len(cuts) and all(
                w1 == w2 and np.array_equal(s1, s2) and r1 == r2
                for (w1, s1, r1), (w2, s2, r2) in zip(new_cuts, cuts)
            )
            if same:
                break
            cuts = new_cuts
            Y = _solve_equality(A, b, idx, vals, cuts)
        return Y, cuts

    Y, cuts = run(pins)
    for _ in range(_ATTRACT_PASSES):
        worst = None
        for c in balls:
            if c.index in pins:
                continue
            miss = np.abs(Y[c.index] - c.center).sum() - c.radius
            if miss > _FEAS_TOL:
                pins[c.index] = _l1_ball_project(Y[c.index], c.center, c.radius)
                worst = c
        if worst is None:
            break
        # pinned points must still satisfy sibling balls on the same waypoint
        for c in balls:
            if c.index in pins and np.abs(pins[c.index] - c.center).sum() > c.radius + _FEAS_TOL:
                pins[c.index] = _l1_ball_project(pins[c.index], c.center, c.radius)
        Y, cuts = run(pins)

    violated = [
        c for c in balls if np.abs(Y[c.index] - c.center).sum() > c.radius + 1e-6
    ] + [
        c for c in repel_all if np.abs(Y[c.index] - c.center).sum() < c.radius - 1e-6
    ]
    if violated:
        raise InfeasibleConstraintError(
            "constraints not satisfiable: " + "; ".join(c.describe() for c in violated),
            constraints=violated,
        )

    idx = np.array(sorted(pins), dtype=int)
    vals = np.array([pins[i] for i in sorted(pins)], dtype=float)
    info = SolveInfo(idx, vals, cuts)
    if t > 0:
        Y[:t] = problem.prefix_values
    return Y, info


def reproduce(problem: ElasticProblem) -> Trajectory:
    """Solve for the full reproduction under the problem's constraints."""
    Y, _ = _solve(problem)
    return Trajectory(points=Y, dt=problem.demonstration.dt)


def reproduce_with_info(problem: ElasticProblem):
    """reproduce plus the active-set summary (for diagnostics and tests)."""
    Y, info = _solve(problem)
    return Trajectory(points=Y, dt=problem.demonstration.dt), info


def adapt_suffix(
    problem: ElasticProblem,
    endpoint_target,
    endpoint_radius: float,
) -> Trajectory:
    """Re-optimize the unexecuted suffix toward a new endpoint region.

    The frozen prefix is reproduced bit-exactly; the final waypoint is
    drawn into the L1 ball (endpoint_target, endpoint_radius).  Any
    constraints of the problem that lie in the suffix stay active.
    """
    T = problem.n_points
    t = problem.fixed_prefix_len
    if t <= 0:
        raise ElasticError("adapt_suffix needs a fixed prefix (fixed_prefix_len > 0)")
    if t >= T - 1:
        raise ElasticError(
            f"nothing left to adapt: fixed_prefix_len={t} leaves no free interior for T={T}"
        )
    end = PointConstraint(T - 1, endpoint_target, endpoint_radius, ConstraintKind.ATTRACT)
    Y, _ = _solve(problem, extra_constraints=(end,))
    gap = np.abs(np.asarray(endpoint_target, dtype=float) - Y[-1]).sum()
    if gap > endpoint_radius + _FEAS_TOL:
        raise InfeasibleConstraintError(
            f"endpoint constraint missed by {gap - endpoint_radius:.3e}: {end.describe()}",
            constraints=(end,),
        )
    return Trajectory(points=Y, dt=problem.demonstration.dt)
