import numpy as np
import pytest

from elte_adapt.elastic import (
    ConstraintKind,
    ElasticError,
    ElasticProblem,
    EnergyWeights,
    InfeasibleConstraintError,
    PointConstraint,
    UnderdeterminedError,
    adapt_suffix,
    assemble_objective,
    attract,
    repel,
    reproduce,
    reproduce_with_info,
    shrink_radius_schedule,
)
from elte_adapt.elastic import _solve_equality
from elte_adapt.trajectory import Trajectory
from oracles import kkt_solve, partitioned_suffix_solve, quadratic_form


def straight(T=5, d=2, dt=0.1):
    s = np.linspace(0.0, 1.0, T)
    pts = np.zeros((T, d))
    pts[:, 0] = s
    return Trajectory(points=pts, dt=dt)


def s_shape(T=6, dt=0.1):
    s = np.linspace(0.0, 1.0, T)
    pts = np.column_stack([s, 0.3 * np.sin(2.0 * np.pi * s)])
    return Trajectory(points=pts, dt=dt)


def random_traj(rng, T, d, dt=0.05):
    return Trajectory(points=rng.normal(scale=0.4, size=(T, d)), dt=dt)


def pinned_problem(traj, pins, weights=None, extra=()):
    cons = [attract(i, v, 0.0) for i, v in pins.items()] + list(extra)
    return ElasticProblem(
        demonstration=traj,
        weights=weights or EnergyWeights(),
        constraints=tuple(cons),
    )


def stationarity_residual(problem, traj, info):
    """Gradient of the quadratic objective projected on the free directions."""
    A, b = assemble_objective(problem)
    g = 2.0 * (A @ traj.points - b)
    g = g.copy()
    g[info.fixed_idx] = 0.0
    for wp, s, _ in info.cuts:
        g[wp] -= (g[wp] @ s) / (s @ s) * s
    return np.abs(g).max() / (1.0 + np.abs(b).max())


class TestAssemble:
    def test_degenerate_weights_give_laplacian_gram(self):
        tr = random_traj(np.random.default_rng(0), 7, 2)
        prob = pinned_problem(tr, {0: tr.points[0]}, weights=EnergyWeights(0.0, 0.0))
        A, b = assemble_objective(prob)
        L, _, _ = __import__("oracles").loop_operators(7)
        assert np.allclose(A, L.T @ L, atol=0)
        assert np.allclose(b, L.T @ (L @ tr.points), atol=1e-14)

    def test_constant_vector_in_kernel(self):
        tr = random_traj(np.random.default_rng(1), 9, 3)
        prob = pinned_problem(tr, {0: tr.points[0]}, weights=EnergyWeights(0.7, 0.02))
        A, _ = assemble_objective(prob)
        assert np.abs(A @ np.ones(9)).max() < 1e-12

    def test_matches_bruteforce_products(self):
        rng = np.random.default_rng(2)
        tr = random_traj(rng, 5, 2)
        prob = pinned_problem(tr, {0: tr.points[0]})
        A, b = assemble_objective(prob)
        A2, b2 = quadratic_form(5, tr.points, 0.001, 0.001)
        assert np.abs(A - A2).max() < 1e-15
        assert np.abs(b - b2).max() < 1e-14

    def test_symmetric_psd(self):
        tr = random_traj(np.random.default_rng(3), 12, 2)
        prob = pinned_problem(tr, {0: tr.points[0]})
        A, b = assemble_objective(prob)
        assert np.abs(A - A.T).max() == 0.0
        ev = np.linalg.eigvalsh(A)
        assert ev.min() > -1e-12
        assert (ev < 1e-10).sum() == 1  # kernel is exactly the constant direction
        assert b.shape == (12, 2)


class TestReproduce:
    def test_exact_recovery_with_zero_weights(self):
        rng = np.random.default_rng(4)
        tr = random_traj(rng, 20, 2)
        prob = pinned_problem(
            tr,
            {0: tr.points[0], 19: tr.points[19]},
            weights=EnergyWeights(0.0, 0.0),
        )
        out = reproduce(prob)
        assert np.abs(out.points - tr.points).max() < 1e-10

    def test_translation_equivariance(self):
        rng = np.random.default_rng(5)
        tr = random_traj(rng, 12, 2)
        v = np.array([3.5, -1.25])
        endpoint = tr.points[-1] + np.array([0.2, 0.1])
        prob = pinned_problem(tr, {0: tr.points[0], 11: endpoint})
        shifted = pinned_problem(
            Trajectory(points=tr.points + v, dt=tr.dt),
            {0: tr.points[0] + v, 11: endpoint + v},
        )
        out = reproduce(prob)
        out_shift = reproduce(shifted)
        assert np.abs(out_shift.points - (out.points + v)).max() < 1e-9

    def test_straight_line_endpoint_pin_matches_kkt_oracle(self):
        tr = straight(T=5)
        pins = {0: np.array([0.0, 0.0]), 4: np.array([1.0, 0.5])}
        out = reproduce(pinned_problem(tr, pins))
        expected = kkt_solve(tr.points, 0.001, 0.001, pins)
        rel = np.linalg.norm(out.points - expected) / (1.0 + np.linalg.norm(expected))
        assert rel < 1e-8

    @pytest.mark.parametrize("seed", range(8))
    def test_random_pins_match_kkt_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        T = int(rng.integers(5, 60))
        d = int(rng.choice([2, 3]))
        tr = random_traj(rng, T, d)
        n_pins = int(rng.integers(1, 4))
        idx = rng.choice(T, size=n_pins, replace=False)
        pins = {int(i): tr.points[i] + rng.normal(scale=0.2, size=d) for i in idx}
        w = EnergyWeights(float(rng.uniform(0, 0.01)), float(rng.uniform(0, 0.01)))
        out = reproduce(pinned_problem(tr, pins, weights=w))
        expected = kkt_solve(tr.points, w.stretch, w.bend, pins)
        rel = np.linalg.norm(out.points - expected) / (1.0 + np.linalg.norm(expected))
        assert rel < 1e-8

    def test_underdetermined_without_pin(self):
        tr = straight(T=6)
        prob = ElasticProblem(demonstration=tr, constraints=(attract(3, [0.5, 0.1], 0.2),))
        with pytest.raises(UnderdeterminedError):
            reproduce(prob)

    def test_conflicting_pins_infeasible(self):
        tr = straight(T=6)
        c1 = attract(2, [0.0, 0.0], 0.0)
        c2 = attract(2, [1.0, 1.0], 0.1)
        prob = ElasticProblem(demonstration=tr, constraints=(attract(0, tr.points[0]), c1, c2))
        with pytest.raises(InfeasibleConstraintError) as exc:
            reproduce(prob)
        assert "waypoint 2" in str(exc.value)

    def test_active_ball_pins_to_boundary(self):
        tr = straight(T=7)
        ball_center = np.array([1.0, 0.6])
        prob = pinned_problem(tr, {0: tr.points[0]}, extra=[attract(6, ball_center, 0.1)])
        out = reproduce(prob)
        gap = np.abs(out.points[6] - ball_center).sum()
        assert gap <= 0.1 + 1e-9

    def test_inactive_ball_keeps_unconstrained_solution(self):
        tr = straight(T=7)
        prob0 = pinned_problem(tr, {0: tr.points[0]})
        prob1 = pinned_problem(
            tr, {0: tr.points[0]}, extra=[attract(6, tr.points[6], 5.0)]
        )
        assert np.abs(reproduce(prob1).points - reproduce(prob0).points).max() < 1e-12

    def test_stationarity_certificate(self):
        rng = np.random.default_rng(42)
        for seed in range(6):
            T = int(rng.integers(6, 40))
            d = int(rng.choice([2, 3]))
            tr = random_traj(rng, T, d)
            cons = [attract(0, tr.points[0], 0.0)]
            j = int(rng.integers(1, T))
            cons.append(attract(j, tr.points[j] + rng.normal(scale=0.3, size=d), 0.05))
            prob = ElasticProblem(demonstration=tr, constraints=tuple(cons))
            out, info = reproduce_with_info(prob)
            assert stationarity_residual(prob, out, info) < 1e-8

    def test_weight_scale_invariance(self):
        # scaling the whole objective (A, b) by a constant leaves the argmin alone
        tr = s_shape(T=10)
        prob = pinned_problem(tr, {0: tr.points[0], 9: tr.points[9] + 0.1})
        A, b = assemble_objective(prob)
        idx = np.array([0, 9])
        vals = np.vstack([tr.points[0], tr.points[9] + 0.1])
        y1 = _solve_equality(A, b, idx, vals, [])
        y2 = _solve_equality(50.0 * A, 50.0 * b, idx, vals, [])
        assert np.abs(y1 - y2).max() < 1e-9


class TestBallsAgainstQP:
    cvxpy = pytest.importorskip("cvxpy")

    def qp_solve(self, prob):
        cp = self.cvxpy
        A, b = assemble_objective(prob)
        T, d = prob.n_points, prob.dim
        y = cp.Variable((T, d))
        zeta = prob.demonstration.points
        obj = cp.sum([cp.quad_form(y[:, k], cp.psd_wrap(A)) - 2 * b[:, k] @ y[:, k] for k in range(d)])
        cons = []
        for c in prob.constraints:
            assert c.kind is ConstraintKind.ATTRACT
            cons.append(cp.norm1(y[c.index] - c.center) <= c.radius)
        p = cp.Problem(cp.Minimize(obj), cons)
        p.solve(solver=cp.CLARABEL)
        base = float(np.sum(zeta * (A @ zeta)) - 2.0 * np.sum(b * zeta))
        return np.asarray(y.value), p.value - base

    def objective(self, prob, pts):
        A, b = assemble_objective(prob)
        zeta = prob.demonstration.points
        val = float(np.sum(pts * (A @ pts)) - 2.0 * np.sum(b * pts))
        base = float(np.sum(zeta * (A @ zeta)) - 2.0 * np.sum(b * zeta))
        return val - base

    def test_single_ball_close_to_qp_optimum(self):
        rng = np.random.default_rng(77)
        for _ in range(4):
            tr = random_traj(rng, 12, 2)
            cons = (
                attract(0, tr.points[0], 0.0),
                attract(11, tr.points[11] + rng.normal(scale=0.4, size=2), 0.05),
            )
            prob = ElasticProblem(demonstration=tr, constraints=cons)
            ours = reproduce(prob)
            qp_pts, qp_obj = self.qp_solve(prob)
            for c in cons:
                assert np.abs(ours.points[c.index] - c.center).sum() <= c.radius + 1e-9
            # the projection heuristic is near-optimal for a single endpoint ball
            assert self.objective(prob, ours.points) <= qp_obj + 0.05 * abs(qp_obj) + 1e-9

    def test_monotone_tightening_of_true_optimum(self):
        rng = np.random.default_rng(88)
        tr = random_traj(rng, 10, 2)
        center = tr.points[9] + np.array([0.3, -0.2])
        prev = -np.inf
        for r in (0.4, 0.2, 0.1, 0.05, 0.0):
            cons = (attract(0, tr.points[0], 0.0), attract(9, center, r))
            prob = ElasticProblem(demonstration=tr, constraints=cons)
            if r == 0.0:
                pts = reproduce(prob).points
                obj = self.objective(prob, pts)
            else:
                _, obj = self.qp_solve(prob)
            assert obj >= prev - 1e-9
            prev = obj


class TestRepel:
    def test_keepout_satisfied(self):
        tr = straight(T=21)
        obstacle = np.array([0.5, 0.0])  # sits on the demonstrated path
        cons = (
            attract(0, tr.points[0], 0.0),
            attract(20, tr.points[20], 0.0),
            repel(10, obstacle, 0.15),
        )
        prob = ElasticProblem(demonstration=tr, constraints=cons)
        out = reproduce(prob)
        assert np.abs(out.points[10] - obstacle).sum() >= 0.15 - 1e-9
        assert np.array_equal(out.points[0], tr.points[0])
        assert np.array_equal(out.points[20], tr.points[20])

    def test_inactive_keepout_unchanged(self):
        tr = straight(T=9)
        cons0 = (attract(0, tr.points[0], 0.0), attract(8, tr.points[8], 0.0))
        cons1 = cons0 + (repel(4, np.array([5.0, 5.0]), 0.5),)
        a = reproduce(ElasticProblem(demonstration=tr, constraints=cons0))
        b = reproduce(ElasticProblem(demonstration=tr, constraints=cons1))
        assert np.abs(a.points - b.points).max() < 1e-12

    def test_pinned_inside_keepout_infeasible(self):
        tr = straight(T=9)
        cons = (
            attract(0, tr.points[0], 0.0),
            attract(4, [0.5, 0.0], 0.0),
            repel(4, [0.5, 0.0], 0.2),
        )
        with pytest.raises(InfeasibleConstraintError):
            reproduce(ElasticProblem(demonstration=tr, constraints=cons))


class TestAdaptSuffix:
    def make_prefix_problem(self, tr, t, extra=()):
        base = ElasticProblem(
            demonstration=tr,
            constraints=(attract(0, tr.points[0], 0.0),) + tuple(extra),
        )
        offline = reproduce(base)
        prob = ElasticProblem(
            demonstration=tr,
            constraints=base.constraints,
            fixed_prefix_len=t,
            prefix_values=offline.points[:t],
        )
        return offline, prob

    def test_inactive_endpoint_ball_reproduces_offline_suffix(self):
        tr = s_shape(T=12)
        offline, prob = self.make_prefix_problem(tr, 4)
        out = adapt_suffix(prob, offline.points[-1], 10.0)
        assert np.abs(out.points[4:] - offline.points[4:]).max() < 1e-9

    def test_prefix_bit_exact(self):
        tr = s_shape(T=12)
        offline, prob = self.make_prefix_problem(tr, 5)
        out = adapt_suffix(prob, offline.points[-1] + np.array([0.3, -0.2]), 0.0)
        assert np.array_equal(out.points[:5], offline.points[:5])

    def test_partitioned_oracle(self):
        tr = s_shape(T=6)
        offline, prob = self.make_prefix_problem(tr, 2)
        target = offline.points[-1] + np.array([0.2, -0.1])
        out = adapt_suffix(prob, target, 0.0)
        expected = partitioned_suffix_solve(
            tr.points, 0.001, 0.001, offline.points[:2], {5: target}
        )
        rel = np.linalg.norm(out.points - expected) / (1.0 + np.linalg.norm(expected))
        assert rel < 1e-8

    @pytest.mark.parametrize("seed", range(6))
    def test_random_partitions_match_oracle(self, seed):
        rng = np.random.default_rng(500 + seed)
        T = int(rng.integers(6, 80))
        d = int(rng.choice([2, 3]))
        tr = random_traj(rng, T, d)
        t = int(rng.integers(1, T - 1))
        prefix = rng.normal(scale=0.4, size=(t, d))
        target = tr.points[-1] + rng.normal(scale=0.2, size=d)
        prob = ElasticProblem(
            demonstration=tr, fixed_prefix_len=t, prefix_values=prefix
        )
        out = adapt_suffix(prob, target, 0.0)
        expected = partitioned_suffix_solve(tr.points, 0.001, 0.001, prefix, {T - 1: target})
        rel = np.linalg.norm(out.points - expected) / (1.0 + np.linalg.norm(expected))
        assert rel < 1e-8

    def test_online_offline_consistency(self):
        tr = s_shape(T=14)
        base = ElasticProblem(
            demonstration=tr,
            constraints=(
                attract(0, tr.points[0], 0.0),
                attract(13, tr.points[13] + 0.05, 0.0),
            ),
        )
        offline = reproduce(base)
        prob = ElasticProblem(
            demonstration=tr,
            constraints=base.constraints,
            fixed_prefix_len=1,
            prefix_values=offline.points[:1],
        )
        out = adapt_suffix(prob, tr.points[13] + 0.05, 0.0)
        assert np.abs(out.points[1:] - offline.points[1:]).max() < 1e-8

    def test_repeated_adaptations_keep_executed_prefix(self):
        tr = s_shape(T=16)
        offline, prob = self.make_prefix_problem(tr, 1)
        executed = [offline.points[0]]
        current = offline
        rng = np.random.default_rng(9)
        for t in range(1, 9):
            prob = ElasticProblem(
                demonstration=tr,
                constraints=(attract(0, tr.points[0], 0.0),),
                fixed_prefix_len=t,
                prefix_values=np.vstack(executed),
            )
            target = tr.points[-1] + rng.normal(scale=0.05, size=2)
            current = adapt_suffix(prob, target, 0.01)
            assert np.array_equal(current.points[:t], np.vstack(executed))
            executed.append(current.points[t])

    def test_suffix_constraints_stay_active(self):
        tr = s_shape(T=12)
        via = tr.points[8] + np.array([0.0, 0.15])
        offline, prob = self.make_prefix_problem(tr, 3, extra=[attract(8, via, 0.0)])
        out = adapt_suffix(prob, tr.points[-1], 0.05)
        assert np.abs(out.points[8] - via).max() < 1e-9

    def test_nothing_left_to_adapt(self):
        tr = s_shape(T=6)
        offline, _ = self.make_prefix_problem(tr, 1)
        prob = ElasticProblem(
            demonstration=tr,
            fixed_prefix_len=5,
            prefix_values=offline.points[:5],
        )
        with pytest.raises(ElasticError, match="othing left"):
            adapt_suffix(prob, tr.points[-1], 0.1)

    def test_missing_prefix_rejected(self):
        tr = s_shape(T=6)
        prob = ElasticProblem(demonstration=tr, constraints=(attract(0, tr.points[0]),))
        with pytest.raises(ElasticError):
            adapt_suffix(prob, tr.points[-1], 0.1)


class TestSchedule:
    def test_boundaries(self):
        assert shrink_radius_schedule(0.5, 0.01, 0.0) == 0.5
        assert shrink_radius_schedule(0.5, 0.01, 1.0) == 0.01

    def test_midpoint(self):
        assert shrink_radius_schedule(0.5, 0.01, 0.5) == pytest.approx(0.255)

    def test_monotone(self):
        rs = [shrink_radius_schedule(0.3, 0.02, p) for p in np.linspace(0, 1, 23)]
        assert all(a >= b for a, b in zip(rs, rs[1:]))

    def test_preconditions(self):
        with pytest.raises(ElasticError):
            shrink_radius_schedule(0.1, 0.5, 0.5)
        with pytest.raises(ElasticError):
            shrink_radius_schedule(0.5, 0.1, 1.5)


class TestProblemValidation:
    def test_constraint_index_out_of_range(self):
        tr = straight(T=5)
        with pytest.raises(ElasticError):
            ElasticProblem(demonstration=tr, constraints=(attract(5, [0, 0], 0.0),))

    def test_center_dim_mismatch(self):
        tr = straight(T=5)
        with pytest.raises(ElasticError):
            ElasticProblem(demonstration=tr, constraints=(attract(0, [0, 0, 0], 0.0),))

    def test_prefix_shape_mismatch(self):
        tr = straight(T=5)
        with pytest.raises(ElasticError):
            ElasticProblem(demonstration=tr, fixed_prefix_len=2, prefix_values=np.zeros((3, 2)))

    def test_negative_radius(self):
        with pytest.raises(ElasticError):
            PointConstraint(0, [0.0, 0.0], -0.5)
