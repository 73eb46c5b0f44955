import numpy as np
import pytest

from cbvfkit import qpfilter
from cbvfkit.dynamics.base import ControlSet
from cbvfkit.dynamics.corridor import kinematic_corridor_model


def brute_force_box_qp(u_d, a, b, bounds, resolution=1e-3):
    """Dense grid search over the box, the exactness oracle for solve_qp."""
    axes = [np.arange(-hw, hw + resolution * hw * 0.5, resolution * hw)
            for hw in bounds]
    grids = np.meshgrid(*axes, indexing="ij")
    U = np.stack([g.ravel() for g in grids], axis=-1)
    feasible = U @ a >= b
    if not np.any(feasible):
        return None
    U = U[feasible]
    return U[np.argmin(np.sum((U - u_d) ** 2, axis=-1))]


def make_problem(u_d, a, b, bounds):
    return qpfilter.FilterProblem(u_d=np.asarray(u_d, dtype=float),
                                  a=np.asarray(a, dtype=float), b=float(b),
                                  box=ControlSet.box(bounds))


class TestSolveQp:
    def test_passthrough_bit_exact(self):
        u_d = np.array([0.123456789, -0.3])
        res = qpfilter.solve_qp(make_problem(u_d, [1.0, 0.0], -5.0, [1.0, 1.0]))
        assert res.u_out[0] == u_d[0] and res.u_out[1] == u_d[1]
        assert not res.intervened
        assert res.kkt_residual <= 1e-9

    def test_single_halfspace_closed_form(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            u_d = rng.uniform(-0.5, 0.5, 2)
            a = rng.normal(size=2)
            if np.linalg.norm(a) < 0.3:
                continue
            b = float(a @ u_d) + rng.uniform(0.01, 0.3)
            expected = u_d + a * (b - a @ u_d) / (a @ a)
            if np.any(np.abs(expected) > 1.0):
                continue
            res = qpfilter.solve_qp(make_problem(u_d, a, b, [1.0, 1.0]))
            assert np.allclose(res.u_out, expected, atol=1e-12)
            assert res.intervened

    def test_infeasible_certificate(self):
        res = qpfilter.solve_qp(make_problem([0.0, 0.0], [0.0, 1.0], 2.0,
                                             [1.0, 1.0]))
        assert res.infeasible
        # best effort: the box point maximizing a.u
        assert res.u_out[1] == 1.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        bounds = np.array([0.8, 1.3])
        checked = 0
        for _ in range(300):
            u_d = rng.uniform(-2.0, 2.0, 2)
            a = rng.normal(size=2) * rng.choice([0.1, 1.0, 10.0])
            b = rng.uniform(-2.0, 2.0)
            res = qpfilter.solve_qp(make_problem(u_d, a, b, bounds))
            ref = brute_force_box_qp(u_d, a, b, bounds)
            if ref is None:
                # the feasible sliver may be thinner than the search grid;
                # accept a genuinely feasible exact solution there
                assert res.infeasible or a @ res.u_out >= b - 1e-9
                continue
            checked += 1
            obj_res = np.sum((res.u_out - u_d) ** 2)
            obj_ref = np.sum((ref - u_d) ** 2)
            assert obj_res <= obj_ref + 1e-12
            # position match, except along near-flat objective valleys where
            # the grid argmin wanders between equal-cost points
            dist_ok = np.all(np.abs(res.u_out - ref) <= 2e-3 * bounds + 1e-12)
            assert dist_ok or obj_ref - obj_res <= 1e-4 * (1.0 + obj_ref)
        assert checked > 150

    def test_scaling_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            u_d = rng.uniform(-1.5, 1.5, 2)
            a = rng.normal(size=2)
            b = rng.uniform(-1.0, 1.0)
            lam = rng.uniform(1e-3, 1e3)
            r1 = qpfilter.solve_qp(make_problem(u_d, a, b, [1.0, 1.0]))
            r2 = qpfilter.solve_qp(make_problem(u_d, lam * np.asarray(a),
                                                lam * b, [1.0, 1.0]))
            assert r1.infeasible == r2.infeasible
            assert np.allclose(r1.u_out, r2.u_out, atol=1e-9)

    def test_minimal_invasiveness(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            u_d = rng.uniform(-2.0, 2.0, 2)
            a = rng.normal(size=2)
            b = rng.uniform(-1.0, 0.5)
            res = qpfilter.solve_qp(make_problem(u_d, a, b, [1.0, 1.0]))
            if res.infeasible:
                continue
            probes = rng.uniform(-1.0, 1.0, (500, 2))
            probes = probes[probes @ a >= b]
            if probes.shape[0] == 0:
                continue
            best = np.min(np.sum((probes - u_d) ** 2, axis=-1))
            assert np.sum((res.u_out - u_d) ** 2) <= best + 1e-12

    def test_kkt_residual_small_when_feasible(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            res = qpfilter.solve_qp(make_problem(rng.uniform(-2, 2, 2),
                                                 rng.normal(size=2),
                                                 rng.uniform(-1, 1), [1.0, 1.0]))
            if not res.infeasible:
                assert res.kkt_residual <= 1e-9


class TestBuildProblem:
    def test_grid_backed_structure(self, corridor, oracle_grid):
        x = np.array([2.0, 0.4])
        u_d = np.array([0.0])
        p = qpfilter.build_problem(oracle_grid, corridor, x, 0.8, u_d, 0.0)
        V, gx, gtau = oracle_grid.value_and_gradients(x, 0.8)
        assert p.a[0] == pytest.approx(10.0 * gx[1], rel=1e-12)
        assert p.b == pytest.approx(gtau - gx @ corridor.f(x), rel=1e-9)

    def test_deep_interior_constraint_inactive(self, corridor):
        class Deep:
            def value_and_gradients(self, x, tau):
                return 100.0, np.zeros(2), 0.0

        p = qpfilter.build_problem(Deep(), corridor, np.zeros(2), 0.5,
                                   np.array([0.0]), 0.5)
        assert p.b < 0.0
        res = qpfilter.solve_qp(p)
        assert not res.intervened

    def test_frozen_mode_drops_time_term(self, corridor, oracle_grid):
        x = np.array([2.0, 0.4])
        p1 = qpfilter.build_problem(oracle_grid, corridor, x, 0.8,
                                    np.array([0.0]), 0.0,
                                    qpfilter.TIME_MODE_TAU_DECREASING)
        p2 = qpfilter.build_problem(oracle_grid, corridor, x, 0.8,
                                    np.array([0.0]), 0.0,
                                    qpfilter.TIME_MODE_FROZEN)
        _, _, gtau = oracle_grid.value_and_gradients(x, 0.8)
        assert p1.b - p2.b == pytest.approx(gtau, rel=1e-9)


class TestFilterStep:
    def test_centerline_cruise_not_modified(self, corridor, oracle_grid):
        res = qpfilter.filter_step(oracle_grid, corridor, np.zeros(2), 1.0,
                                   np.array([0.0]), 0.0)
        assert not res.intervened
        assert res.u_out[0] == 0.0

    def test_outward_push_near_edge_is_blocked(self, corridor, oracle_grid):
        x = np.array([2.9, 0.05])
        u_d = np.array([corridor.control_set.bounds[0]])   # steer further out
        p = qpfilter.build_problem(oracle_grid, corridor, x, 1.0, u_d, 0.0)
        res = qpfilter.solve_qp(p)
        assert res.intervened
        assert p.a @ res.u_out >= p.b - 1e-12
