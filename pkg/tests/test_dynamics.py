import json

import numpy as np
import pytest

from cbvfkit.dynamics import singletrack as st
from cbvfkit.dynamics.base import ControlSet, SamplingRegion
from cbvfkit.dynamics.corridor import kinematic_corridor_model
from cbvfkit.dynamics.singletrack import (TireModel, VehicleParams,
                                          extend_with_implicit_box, load_params,
                                          racing_model, save_params,
                                          single_track_model)
from cbvfkit.dynamics.track import (TrackGeometry, frenet_to_global,
                                    global_to_frenet, load_track, save_track)
from cbvfkit.errors import ConfigError, DomainError, VersionError
from cbvfkit.numeric import central_diff_jacobian, rk4_step


@pytest.fixture(scope="module")
def vehicle():
    return single_track_model(curvature="track")


def random_vehicle_states(n, rng):
    lo = np.array([1.0, -2.5, -0.4, 5.0, -0.8, -0.2, -0.5, -2500.0, 0.0])
    hi = np.array([60.0, 2.5, 0.4, 14.0, 0.8, 0.2, 0.5, 2500.0, 1.0])
    return lo + rng.random((n, 9)) * (hi - lo)


class TestCorridor:
    def test_centerline_equilibrium(self, corridor):
        assert np.allclose(corridor.xdot(np.zeros(2), np.zeros(1)), 0.0)

    def test_perpendicular_heading_rate(self, corridor):
        xdot = corridor.f(np.array([0.0, np.pi / 2]))
        assert xdot[0] == pytest.approx(10.0)

    def test_jacobian_matches_finite_differences(self, corridor):
        J = corridor.jac_f(np.array([0.5, 0.2]))
        Jfd = central_diff_jacobian(corridor.f, np.array([0.5, 0.2]))
        assert np.max(np.abs(J - Jfd) / (1.0 + np.abs(Jfd))) < 1e-5

    def test_turn_singularity_raises(self):
        turn = kinematic_corridor_model(8.0, 0.1, kappa_ref=1.0 / 12.0)
        with pytest.raises(DomainError):
            turn.f(np.array([12.5, 0.0]))

    def test_bad_configs_rejected(self):
        with pytest.raises(ConfigError):
            kinematic_corridor_model(-1.0, 0.1)
        with pytest.raises(ConfigError):
            kinematic_corridor_model(10.0, 0.0)


class TestControlAffinity:
    @pytest.mark.parametrize("which", ["corridor", "vehicle"])
    def test_affine_in_input(self, which, corridor, vehicle):
        rng = np.random.default_rng(7)
        if which == "corridor":
            system = corridor
            states = system.default_region.sample(50, rng)
        else:
            system = vehicle
            states = random_vehicle_states(50, rng)
        m = system.control_dim
        u1 = rng.uniform(-1.0, 1.0, (50, m))
        u2 = rng.uniform(-1.0, 1.0, (50, m))
        lhs = system.xdot(states, u1) + system.xdot(states, u2)
        rhs = 2.0 * system.xdot(states, 0.5 * (u1 + u2))
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_deterministic_evaluation(self, vehicle):
        x = random_vehicle_states(1, np.random.default_rng(0))[0]
        assert np.array_equal(vehicle.f(x), vehicle.f(x))
        assert np.array_equal(vehicle.g(x), vehicle.g(x))


class TestSingleTrack:
    def test_jacobian_matches_finite_differences(self, vehicle):
        rng = np.random.default_rng(3)
        states = random_vehicle_states(100, rng)
        J = vehicle.jac_f(states)
        worst = 0.0
        for i in range(states.shape[0]):
            Jfd = central_diff_jacobian(vehicle.f, states[i], 1e-6)
            worst = max(worst, np.max(np.abs(J[i] - Jfd) / (1.0 + np.abs(Jfd))))
        assert worst < 1e-5

    def test_grad_h_matches_finite_differences(self, vehicle):
        rng = np.random.default_rng(4)
        states = random_vehicle_states(100, rng)
        states = states[np.abs(states[:, st.E]) > 0.05]
        G = vehicle.grad_h(states)
        for i in range(states.shape[0]):
            gfd = central_diff_jacobian(lambda x: np.asarray(vehicle.h(x)),
                                        states[i], 1e-7)
            assert np.max(np.abs(G[i] - gfd)) < 1e-6

    def test_input_matrix_is_rate_selector(self, vehicle):
        rng = np.random.default_rng(5)
        x = random_vehicle_states(1, rng)[0]
        u = np.array([0.3, -700.0])
        gu = vehicle.g(x) @ u
        expected = np.zeros(9)
        expected[st.DELTA], expected[st.TAU] = u
        assert np.array_equal(gu, expected)

    def test_straight_cruise_equilibrium(self):
        system = single_track_model(curvature=0.0)
        x = np.zeros(9)
        x[st.SPEED] = 9.0
        xdot = system.f(x)
        assert xdot[st.E] == pytest.approx(0.0, abs=1e-12)
        assert xdot[st.DPHI] == pytest.approx(0.0, abs=1e-12)
        assert xdot[st.SPEED] == pytest.approx(0.0, abs=1e-12)

    def test_zero_tire_forces_keep_speed(self):
        # negligible stiffness and zero torque: no force path into Vdot
        tire = TireModel(cornering_stiffness=1e-9)
        system = single_track_model(tire=tire, curvature=0.0)
        x = np.array([3.0, 0.5, 0.1, 8.0, 0.3, 0.05, 0.2, 0.0, 0.0])
        assert abs(system.f(x)[st.SPEED]) < 1e-10

    def test_speed_floor_guard(self, vehicle):
        x = np.zeros(9)
        x[st.SPEED] = 0.5
        with pytest.raises(DomainError):
            vehicle.f(x)

    def test_friction_circle_guard(self, vehicle):
        x = np.zeros(9)
        x[st.SPEED] = 8.0
        x[st.TAU] = 1e7
        with pytest.raises(DomainError):
            vehicle.f(x)


class TestTireModel:
    def test_odd_in_slip_angle(self):
        tire = TireModel()
        alphas = np.linspace(-0.3, 0.3, 41)
        fy = tire.lateral_force(alphas, 500.0, "front")
        assert np.allclose(fy, -tire.lateral_force(-alphas, 500.0, "front"))

    def test_saturation_cap(self):
        tire = TireModel()
        fy = tire.lateral_force(np.linspace(-1.2, 1.2, 201), 800.0, "rear")
        cap = tire.max_lateral_force(800.0, "rear")
        assert np.all(np.abs(fy) <= cap + 1e-9)

    def test_monotone_before_saturation(self):
        tire = TireModel()
        cap = tire.max_lateral_force(0.0, "front")
        a_slide = np.arctan(3 * cap / tire.cornering_stiffness)
        alphas = np.linspace(-a_slide * 0.98, a_slide * 0.98, 101)
        fy = tire.lateral_force(alphas, 0.0, "front")
        assert np.all(np.diff(fy) < 0.0)

    def test_friction_circle_violation(self):
        tire = TireModel()
        with pytest.raises(DomainError):
            tire.max_lateral_force(1e6, "front")


class TestImplicitBox:
    def test_interior_passthrough(self):
        system = racing_model(curvature=0.0)
        params = system.extras["params"]
        x = np.zeros(9)
        x[st.SPEED] = 8.0
        g = system.g(x)
        assert g[st.DELTA, 0] == pytest.approx(1.0, abs=1e-9)
        assert abs(system.f(x)[st.DELTA]) < 1e-9 * params.steer_rate_max

    def test_exact_limit_cancels_saturating_command(self):
        system = racing_model(curvature=0.0)
        params = system.extras["params"]
        x = np.zeros(9)
        x[st.SPEED] = 8.0
        x[st.DELTA] = params.steer_max
        u = np.array([params.steer_rate_max, 0.0])
        # at the bound the drift is -rate/2 and the gain 1/2: commands at the
        # rate limit produce exactly zero motion
        assert system.xdot(x, u)[st.DELTA] == pytest.approx(0.0, abs=1e-12)

    def test_jacobians_match_finite_differences(self):
        system = racing_model(curvature=0.0)
        rng = np.random.default_rng(11)
        states = random_vehicle_states(20, rng)
        params = system.extras["params"]
        states[:, st.DELTA] = rng.uniform(-1.2, 1.2, 20) * params.steer_max
        J = system.jac_f(states)
        for i in range(states.shape[0]):
            Jfd = central_diff_jacobian(system.f, states[i], 1e-6)
            assert np.max(np.abs(J[i] - Jfd) / (1.0 + np.abs(Jfd))) < 1e-5

    def test_saturating_rollout_respects_boxes(self):
        # short version of the acceptance check (which runs the full 100 s)
        system = racing_model(curvature=0.0)
        params = system.extras["params"]
        x = np.zeros(9)
        x[st.SPEED] = 6.0
        u = np.array([params.steer_rate_max, params.torque_rate_max])
        dt = 5e-3
        max_delta = 0.0
        max_tau = 0.0

        def rhs(y):
            out = np.zeros_like(y)
            out[st.DELTA:st.TAU + 1] = system.xdot(y, u)[st.DELTA:st.TAU + 1]
            return out

        for _ in range(int(10.0 / dt)):
            x = rk4_step(rhs, x, dt)
            max_delta = max(max_delta, abs(x[st.DELTA]))
            max_tau = max(max_tau, abs(x[st.TAU]))
        assert abs(x[st.DELTA]) > 0.95 * params.steer_max   # actually saturated
        assert max_delta <= params.steer_max + 1e-3
        assert max_tau <= params.torque_max * (1.0 + 1e-3)

    def test_config_validation(self):
        base = single_track_model(curvature=0.0)
        with pytest.raises(ConfigError):
            extend_with_implicit_box(base, (st.DELTA,), (1.0,), (0.5,))
        with pytest.raises(ConfigError):
            extend_with_implicit_box(base, (st.DELTA, st.TAU), (1.0, -1.0),
                                     (0.5, 100.0))


class TestTrack:
    def test_total_length(self):
        track = TrackGeometry(20.0, 12.0, 3.0)
        assert track.total_length == pytest.approx(40.0 + 2 * np.pi * 12.0)

    def test_curvature_profile(self):
        track = TrackGeometry(20.0, 12.0, 3.0)
        assert track.kappa_ref(10.0) == 0.0
        assert track.kappa_ref(20.0 + 1.0) == pytest.approx(1.0 / 12.0)
        assert track.kappa_ref(10.0 + track.total_length) == 0.0

    def test_frenet_origin_poses(self):
        track = TrackGeometry()
        X, Y, psi = frenet_to_global(track, 0.0, 0.0, 0.0)
        assert (X, Y, psi) == (0.0, 0.0, 0.0)
        X, Y, _ = frenet_to_global(track, 0.0, 3.0, 0.0)
        assert (X, Y) == (0.0, 3.0)

    def test_roundtrip(self):
        track = TrackGeometry()
        rng = np.random.default_rng(123)
        s = rng.uniform(0, track.total_length, 1000)
        e = rng.uniform(-3, 3, 1000)
        dpsi = rng.uniform(-1, 1, 1000)
        X, Y, psi = frenet_to_global(track, s, e, dpsi)
        s2, e2, dpsi2 = global_to_frenet(track, X, Y, psi)
        X2, Y2, psi2 = frenet_to_global(track, s2, e2, dpsi2)
        assert np.max(np.hypot(X - X2, Y - Y2)) < 1e-9

    def test_smooth_curvature_derivative(self):
        track = TrackGeometry()
        s = np.linspace(0, track.total_length, 500)
        h = 1e-6
        fd = (track.kappa_smooth(s + h) - track.kappa_smooth(s - h)) / (2 * h)
        assert np.max(np.abs(track.dkappa_smooth_ds(s) - fd)) < 1e-6


class TestParameterFiles:
    def test_roundtrip(self, tmp_path):
        p = tmp_path / "veh.json"
        save_params(VehicleParams(mass=1500.0), TireModel(mu=0.85), p)
        params, tire = load_params(p)
        assert params.mass == 1500.0
        assert tire.mu == 0.85

    def test_version_check(self, tmp_path):
        p = tmp_path / "veh.json"
        save_params(VehicleParams(), TireModel(), p)
        payload = json.loads(p.read_text())
        payload["schema_version"] = 99
        p.write_text(json.dumps(payload))
        with pytest.raises(VersionError):
            load_params(p)

    def test_track_roundtrip(self, tmp_path):
        p = tmp_path / "track.json"
        save_track(TrackGeometry(25.0, 10.0, 2.5), p)
        track = load_track(p)
        assert track.turn_radius == 10.0


class TestControlSetAndRegion:
    def test_control_set_validation(self):
        with pytest.raises(ConfigError):
            ControlSet.box([0.0])
        with pytest.raises(ConfigError):
            ControlSet("diamond", np.array([1.0]), np.zeros(1))

    def test_region_sampling_inside(self):
        region = SamplingRegion(lo=np.array([-1.0, 0.0]), hi=np.array([2.0, 5.0]))
        pts = region.sample(200, np.random.default_rng(0))
        assert np.all(region.contains(pts))
