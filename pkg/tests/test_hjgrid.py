import numpy as np
import pytest

from cbvfkit import hjgrid, pmp
from cbvfkit.dynamics.corridor import kinematic_corridor_model
from cbvfkit.errors import ConfigError, ExtrapolationError, VersionError

from .conftest import corridor_grid_spec
from .oracles import boundary_band, corridor_sequence_search


@pytest.fixture(scope="module")
def small_grid(corridor):
    return hjgrid.solve_cbvf(corridor, corridor_grid_spec((81, 81)), gamma=0.0,
                             horizon=0.6)


class TestSolveInvariants:
    def test_initial_slice_equals_margin(self, small_grid, corridor):
        mesh = small_grid.spec.mesh()
        assert np.array_equal(small_grid.values[0], corridor.h(mesh))

    def test_value_bounded_by_margin(self, small_grid, corridor):
        l_grid = corridor.h(small_grid.spec.mesh())
        assert np.all(small_grid.values <= l_grid + 1e-12)

    def test_undiscounted_monotone_in_tau(self, small_grid):
        assert np.all(np.diff(small_grid.values, axis=0) <= 1e-12)

    def test_discounted_zero_set_matches_undiscounted_within_cell(self, corridor):
        spec = corridor_grid_spec((81, 81))
        v0 = hjgrid.solve_cbvf(corridor, spec, gamma=0.0, horizon=0.5)
        v1 = hjgrid.solve_cbvf(corridor, spec, gamma=0.5, horizon=0.5)
        a = v0.values_at(0.5) >= 0
        b = v1.values_at(0.5) >= 0
        # discounting never shrinks the recoverable set; containment holds up
        # to one cell of numerical smearing
        grown = b.copy()
        for ax in (0, 1):
            for off in (1, -1):
                grown |= np.roll(b, off, axis=ax)
        assert np.all(grown[a])

    def test_grid_must_see_boundary(self, corridor):
        spec = hjgrid.GridSpec(lo=(-2.0, -np.pi), hi=(2.0, np.pi),
                               counts=(41, 41), periodic=(False, True))
        with pytest.raises(ConfigError):
            hjgrid.solve_cbvf(corridor, spec, gamma=0.0, horizon=0.1)

    def test_cfl_validation(self, corridor):
        with pytest.raises(ConfigError):
            hjgrid.solve_cbvf(corridor, corridor_grid_spec((41, 41)), gamma=0.0,
                              horizon=0.1, cfl=1.5)

    def test_dimension_guard(self, corridor):
        spec = hjgrid.GridSpec(lo=(-1.0,), hi=(1.0,), counts=(11,))
        with pytest.raises(ConfigError):
            hjgrid.solve_cbvf(corridor, spec, gamma=0.0, horizon=0.1)


class TestEvaluation:
    def test_node_interpolation_identity(self, small_grid):
        ax0 = small_grid.spec.axis(0)
        ax1 = small_grid.spec.axis(1)
        pts = np.array([[ax0[10], ax1[17]], [ax0[40], ax1[3]]])
        got = small_grid.value(pts, 0.0)
        want = small_grid.values[0][[10, 40], [17, 3]]
        assert np.allclose(got, want, atol=1e-12)

    def test_margin_gradient_at_smooth_point(self, small_grid):
        _, grad, _ = small_grid.value_and_gradients(np.array([1.3, 0.2]), 0.0)
        assert np.allclose(grad, [-1.0, 0.0], atol=1e-6)

    def test_linear_field_exact_gradient(self, small_grid):
        vf = hjgrid.GridValueFunction(
            spec=small_grid.spec, taus=np.array([0.0, 0.1]),
            values=np.stack([2.0 * small_grid.spec.mesh()[..., 0] + 1.0] * 2),
            gamma=0.0, dt=0.1, system_id="linear")
        _, grad, dvdt = vf.value_and_gradients(np.array([0.37, 0.91]), 0.05)
        assert grad[0] == pytest.approx(2.0, abs=1e-12)
        assert grad[1] == pytest.approx(0.0, abs=1e-12)
        assert dvdt == pytest.approx(0.0, abs=1e-12)

    def test_out_of_bounds_raises(self, small_grid):
        with pytest.raises(ExtrapolationError):
            small_grid.value_and_gradients(np.array([4.5, 0.0]), 0.1)
        with pytest.raises(ExtrapolationError):
            small_grid.value_and_gradients(np.array([0.0, 0.0]), 99.0)

    def test_periodic_axis_wraps(self, small_grid):
        a = small_grid.value(np.array([[0.5, np.pi - 0.01]]), 0.3)
        b = small_grid.value(np.array([[0.5, -np.pi - 0.01]]), 0.3)
        assert a[0] == pytest.approx(b[0], abs=1e-12)


class TestZeroLevelSet:
    def test_initial_contour_at_track_edges(self, small_grid):
        comps = hjgrid.zero_level_set(small_grid, 0.0)
        assert len(comps) >= 2
        for comp in comps:
            assert np.all(np.abs(np.abs(comp[:, 0]) - 3.0) < small_grid.spec.spacings[0])

    def test_constant_positive_field_empty(self, small_grid):
        vf = hjgrid.GridValueFunction(
            spec=small_grid.spec, taus=np.array([0.0]),
            values=np.ones((1,) + small_grid.spec.counts), gamma=0.0, dt=1.0,
            system_id="const")
        assert hjgrid.zero_level_set(vf, 0.0) == []

    def test_contour_tracks_oracle_sign_change(self, corridor, small_grid):
        W = corridor_sequence_search(10.0, 1 / 12, 3.0, small_grid.spec.axis(0),
                                     small_grid.spec.axis(1), 0.6)
        comps = hjgrid.zero_level_set(small_grid, 0.6)
        band = boundary_band(W >= 0, cells=1)
        ax0, ax1 = small_grid.spec.axis(0), small_grid.spec.axis(1)
        on_band = 0
        total = 0
        for comp in comps:
            for pt in comp:
                i = int(np.clip(np.searchsorted(ax0, pt[0]), 0, ax0.size - 1))
                j = int(np.clip(np.searchsorted(ax1, pt[1]), 0, ax1.size - 1))
                on_band += bool(band[i, j])
                total += 1
        assert on_band / total >= 0.95

    def test_refinement_cauchy(self, corridor):
        coarse = hjgrid.solve_cbvf(corridor, corridor_grid_spec((81, 81)),
                                   gamma=0.0, horizon=0.4)
        fine = hjgrid.solve_cbvf(corridor, corridor_grid_spec((161, 161)),
                                 gamma=0.0, horizon=0.4)
        pts_c = np.concatenate(hjgrid.zero_level_set(coarse, 0.4))
        pts_f = np.concatenate(hjgrid.zero_level_set(fine, 0.4))
        # every coarse contour point has a fine contour point within the
        # coarse spacing
        scale = coarse.spec.spacings
        d = np.min(np.linalg.norm((pts_c[:, None, :] - pts_f[None, :, :]) / scale,
                                  axis=-1), axis=1)
        assert np.max(d) * np.max(scale) < np.max(scale)


class TestContainerIO:
    def test_roundtrip_bitexact(self, small_grid, tmp_path):
        path = tmp_path / "vf.cbvf"
        hjgrid.save_grid(small_grid, path)
        loaded = hjgrid.load_grid(path)
        assert np.array_equal(loaded.values, small_grid.values)
        assert np.array_equal(loaded.taus, small_grid.taus)
        assert loaded.spec == small_grid.spec
        assert loaded.gamma == small_grid.gamma

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.cbvf"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(VersionError):
            hjgrid.load_grid(path)

    def test_level_set_csv(self, small_grid, tmp_path):
        path = tmp_path / "ls.csv"
        hjgrid.export_level_set_csv(small_grid, 0.3, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "component,point,x0,x1"
        assert len(lines) > 10


class TestPmpCrossValidation:
    def test_extremal_nodes_on_zero_level(self, corridor, small_grid):
        ext = pmp.integrate_extremal_backward(corridor, np.array([3.0, 0.0]),
                                              np.array([-1.0, 0.0]), 0.6, 1e-3)
        dx = np.max(small_grid.spec.spacings)
        for k in range(0, len(ext), 10):
            v, grad, _ = small_grid.value_and_gradients(ext.states[k], ext.times[k])
            band = 2.0 * dx * max(np.linalg.norm(grad), 0.25)
            assert abs(v) <= band
