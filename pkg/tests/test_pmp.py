import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hst

from cbvfkit import pmp
from cbvfkit.dynamics.base import ControlSet
from cbvfkit.errors import (ConfigError, InsufficientBoundaryPoints,
                            SingularDirection)

ANALYTIC_ROOT = np.array([3.0, 0.0])
ANALYTIC_COSTATE = np.array([-1.0, 0.0])


class TestClosedFormMaximizer:
    def test_box_componentwise_sign(self):
        u = pmp.closed_form_maximizer(np.array([2.0, -3.0]), ControlSet.box([1.0, 1.0]))
        assert np.array_equal(u, [1.0, -1.0])

    def test_ball_radial_projection(self):
        u = pmp.closed_form_maximizer(np.array([3.0, 4.0]), ControlSet.ball(2.0, 2))
        assert np.allclose(u, [1.2, 1.6])

    def test_box_tie_maps_to_center(self):
        cset = ControlSet.box([1.0, 1.0])
        u = pmp.closed_form_maximizer(np.array([0.0, 5.0]), cset)
        assert np.array_equal(u, [0.0, 1.0])
        # the tie choice is objective-indifferent
        v = np.array([0.0, 5.0])
        for alt in ([1.0, 1.0], [-1.0, 1.0]):
            assert v @ u == v @ np.asarray(alt)

    def test_ball_singular_direction(self):
        with pytest.raises(SingularDirection):
            pmp.closed_form_maximizer(np.zeros(2), ControlSet.ball(1.0, 2))

    @settings(max_examples=100, deadline=None)
    @given(hst.lists(hst.floats(-10, 10), min_size=2, max_size=2),
           hst.floats(1e-3, 1e3))
    def test_scaling_invariance(self, v, lam):
        v = np.asarray(v)
        cset = ControlSet.box([0.7, 2.0])
        assert np.array_equal(pmp.closed_form_maximizer(lam * v, cset),
                              pmp.closed_form_maximizer(v, cset))

    def test_support_value_matches_maximizer(self):
        rng = np.random.default_rng(0)
        for cset in (ControlSet.box([0.5, 3.0], center=[0.1, -0.2]),
                     ControlSet.ball(1.5, 2, center=[0.3, 0.0])):
            for _ in range(50):
                v = rng.normal(size=2)
                u = pmp.closed_form_maximizer(v, cset)
                assert pmp.support_value(cset, v) == pytest.approx(v @ u, rel=1e-12)


class TestTerminalSolve:
    def test_analytic_root_is_fixed_point(self, corridor):
        rep = pmp.solve_terminal_conditions(corridor, ANALYTIC_ROOT)
        assert rep.converged
        assert rep.iterations == 0
        assert np.array_equal(rep.x_T, ANALYTIC_ROOT)
        assert np.array_equal(rep.p_T, ANALYTIC_COSTATE)

    def test_converges_from_nearby(self, corridor):
        rep = pmp.solve_terminal_conditions(corridor, np.array([2.9, 0.1]))
        assert rep.converged
        assert rep.iterations <= 500
        assert abs(rep.residuals[0]) <= 1e-8
        assert abs(rep.residuals[2]) <= 1e-8
        assert np.allclose(rep.x_T, ANALYTIC_ROOT, atol=1e-6)

    def test_iteration_cap_reports_failure(self, corridor):
        opts = pmp.TerminalSolveOptions(max_iterations=1)
        rep = pmp.solve_terminal_conditions(corridor, np.array([0.5, 0.7]), opts)
        assert not rep.converged

    def test_batch_roots_land_on_manifold(self, corridor):
        rng = np.random.default_rng(1)
        inits = corridor.default_region.sample(64, rng)
        reports = pmp.solve_terminal_batch(corridor, inits)
        converged = [r for r in reports if r.converged]
        assert len(converged) >= 60
        for r in converged:
            assert abs(corridor.h(r.x_T)) <= 1e-8
            assert abs(abs(r.x_T[0]) - 3.0) <= 1e-8


class TestBackwardIntegration:
    def test_hamiltonian_stays_zero(self, corridor):
        ext = pmp.integrate_extremal_backward(corridor, ANALYTIC_ROOT,
                                              ANALYTIC_COSTATE, 1.0, 1e-3)
        assert np.max(np.abs(ext.hamiltonian)) <= 1e-8
        assert ext.p0 == 0.0

    def test_first_backward_step_enters_interior(self, corridor):
        ext = pmp.integrate_extremal_backward(corridor, ANALYTIC_ROOT,
                                              ANALYTIC_COSTATE, 1.0, 1e-3)
        # chronological nodes: the last is the terminal touch point
        assert corridor.h(ext.states[-1]) == pytest.approx(0.0, abs=1e-12)
        assert corridor.h(ext.states[-2]) > 0.0

    def test_zero_horizon_single_node(self, corridor):
        ext = pmp.integrate_extremal_backward(corridor, ANALYTIC_ROOT,
                                              ANALYTIC_COSTATE, 0.0, 1e-3)
        assert len(ext) == 1
        assert np.array_equal(ext.states[0], ANALYTIC_ROOT)

    def test_controls_are_maximizers(self, corridor):
        ext = pmp.integrate_extremal_backward(corridor, ANALYTIC_ROOT,
                                              ANALYTIC_COSTATE, 1.0, 1e-3)
        assert ext.max_control_defect(corridor) <= 1e-12

    def test_times_descend(self, corridor):
        ext = pmp.integrate_extremal_backward(corridor, ANALYTIC_ROOT,
                                              ANALYTIC_COSTATE, 0.5, 1e-3)
        assert np.all(np.diff(ext.times) < 0)
        assert ext.times[-1] == 0.0

    def test_costate_refinement_order(self, corridor):
        # halving dt changes nodes at the level expected of a 4th-order
        # method; the frozen bound was measured at dt=2e-3 and includes
        # fifty-fold slack
        ext_a = pmp.integrate_extremal_backward(corridor, ANALYTIC_ROOT,
                                                ANALYTIC_COSTATE, 1.0, 2e-3)
        ext_b = pmp.integrate_extremal_backward(corridor, ANALYTIC_ROOT,
                                                ANALYTIC_COSTATE, 1.0, 1e-3)
        diff = np.max(np.abs(ext_a.costates - ext_b.costates[::2]))
        assert diff < 5e-11

    def test_region_truncation(self, corridor):
        taus, xs, ps, us, hs, lengths = pmp.integrate_extremals_backward(
            corridor, ANALYTIC_ROOT[None, :], ANALYTIC_COSTATE[None, :],
            5.0, 1e-3, corridor.default_region)
        assert lengths[0] < taus.size     # leaves the region before 5 s

    def test_bad_arguments(self, corridor):
        with pytest.raises(ConfigError):
            pmp.integrate_extremal_backward(corridor, ANALYTIC_ROOT,
                                            ANALYTIC_COSTATE, -1.0, 1e-3)


class TestDatasetGeneration:
    def test_mix_counts_exact(self, corridor):
        cfg = pmp.DatasetConfig(n_samples=1000, seed=3)
        batch = pmp.generate_dataset(corridor, cfg)
        assert len(batch) == 1000
        assert int(np.sum(batch.sources == pmp.SOURCE_INTERIOR)) == 400
        assert batch.counts["pmp_origin"] == 600

    def test_interior_samples_are_safe(self, corridor):
        cfg = pmp.DatasetConfig(n_samples=500, seed=4)
        batch = pmp.generate_dataset(corridor, cfg)
        interior = batch.states[batch.sources == pmp.SOURCE_INTERIOR]
        assert np.all(corridor.h(interior) >= 0.0)

    def test_deterministic_per_seed(self, corridor):
        cfg = pmp.DatasetConfig(n_samples=400, seed=5)
        a = pmp.generate_dataset(corridor, cfg)
        b = pmp.generate_dataset(corridor, cfg)
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.times, b.times)
        assert np.array_equal(a.sources, b.sources)

    def test_perturbed_boundary_straddles(self, corridor):
        cfg = pmp.DatasetConfig(n_samples=1500, seed=6)
        batch = pmp.generate_dataset(corridor, cfg)
        perturbed = batch.states[batch.sources == pmp.SOURCE_BOUNDARY_PERTURBED]
        frac_unsafe = np.mean(corridor.h(perturbed) < 0.0)
        assert 0.0 < frac_unsafe < 1.0

    def test_unperturbed_keeps_origin_tags(self, corridor):
        cfg = pmp.DatasetConfig(n_samples=300, seed=7, noise_half_width=0.0,
                                pmp_fraction=0.3, uniform_fraction=0.3,
                                interior_fraction=0.4)
        batch = pmp.generate_dataset(corridor, cfg)
        assert np.sum(batch.sources == pmp.SOURCE_PMP_BOUNDARY) == 90
        assert np.sum(batch.sources == pmp.SOURCE_UNIFORM_BOUNDARY) == 90
        on_boundary = batch.states[batch.sources == pmp.SOURCE_UNIFORM_BOUNDARY]
        assert np.all(np.abs(np.abs(on_boundary[:, 0]) - 3.0) < 1e-12)

    def test_invalid_fractions(self, corridor):
        cfg = pmp.DatasetConfig(n_samples=10, interior_fraction=0.9)
        with pytest.raises(ConfigError):
            pmp.generate_dataset(corridor, cfg)

    def test_starved_boundary_collection(self, corridor):
        cfg = pmp.DatasetConfig(n_samples=4000, pmp_fraction=1.0,
                                interior_fraction=0.0, horizon=1e-3,
                                n_extremals=2, max_rounds=1, seed=8)
        with pytest.raises(InsufficientBoundaryPoints):
            pmp.generate_dataset(corridor, cfg)


class TestAbnormalityInvariant:
    def test_emitted_extremals_have_zero_hamiltonian(self, corridor):
        rng = np.random.default_rng(9)
        inits = corridor.default_region.sample(40, rng)
        reports = [r for r in pmp.solve_terminal_batch(corridor, inits)
                   if r.converged]
        XT = np.stack([r.x_T for r in reports])
        PT = np.stack([r.p_T for r in reports])
        taus, xs, ps, us, hs, lengths = pmp.integrate_extremals_backward(
            corridor, XT, PT, 1.0, 1e-3, corridor.default_region)
        for i, rep in enumerate(reports):
            tol = pmp.default_hamiltonian_tol(corridor, rep.x_T, rep.p_T)
            assert np.max(np.abs(hs[i, :lengths[i]])) <= tol
