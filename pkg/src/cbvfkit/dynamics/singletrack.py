"""Single-track racing model in track coordinates with derated brush tires.

State layout (9 entries):

    [s, e, dphi, V, r, beta, delta, tau, gk]

path progress, lateral error, course error, speed, yaw rate, sideslip,
roadwheel angle, total drive torque, and a virtual class-K parameter with
zero dynamics. Inputs are the roadwheel-angle rate and torque rate, entering
through a constant selector matrix; box limits on (delta, tau) themselves
are folded into the dynamics by :func:`extend_with_implicit_box`.

The analytic Jacobians are derived symbolically once per parameter set and
lambdified to plain numpy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from functools import lru_cache
from pathlib import Path

import numpy as np
import sympy as sp

from ..errors import ConfigError, DomainError, VersionError
from .base import ControlSet, SamplingRegion, SystemModel
from .track import TrackGeometry

PARAMS_SCHEMA_VERSION = 1

# State index constants.
S, E, DPHI, SPEED, YAW_RATE, BETA, DELTA, TAU, GK = range(9)
STATE_NAMES = ("s", "e", "dphi", "V", "r", "beta", "delta", "tau", "gk")


@dataclass(frozen=True)
class TireModel:
    """Brush tire with friction saturation derated by longitudinal force."""

    mu: float = 0.9
    cornering_stiffness: float = 160000.0   # N/rad, per axle
    zeta: float = 0.99
    normal_load_front: float = 10464.0      # N
    normal_load_rear: float = 9156.0        # N

    def max_lateral_force(self, fx, axle: str):
        fz = self.normal_load_front if axle == "front" else self.normal_load_rear
        cap = (self.mu * fz) ** 2 - self.zeta * np.asarray(fx, dtype=float) ** 2
        if np.any(cap <= 0.0):
            raise DomainError("longitudinal force exceeds the friction circle")
        return np.sqrt(cap)

    def lateral_force(self, alpha, fx, axle: str):
        """Saturating lateral force from slip angle; odd in alpha."""
        fmax = self.max_lateral_force(fx, axle)
        c = self.cornering_stiffness
        t = np.tan(np.asarray(alpha, dtype=float))
        tsl = 3.0 * fmax / c
        poly = -c * t + c ** 2 * np.abs(t) * t / (3.0 * fmax) - c ** 3 * t ** 3 / (27.0 * fmax ** 2)
        return np.where(t >= tsl, -fmax, np.where(t <= -tsl, fmax, poly))


@dataclass(frozen=True)
class VehicleParams:
    """Inertial/geometric parameters. Defaults describe a generic ~2 t test
    vehicle and are illustrative only, not measurements of any platform."""

    mass: float = 2000.0
    inertia_z: float = 3200.0
    dist_front: float = 1.4        # CoM to front axle (m)
    dist_rear: float = 1.6         # CoM to rear axle (m)
    wheel_radius: float = 0.32
    steer_max: float = 0.71        # rad
    steer_rate_max: float = 0.8    # rad/s
    torque_max: float = 4000.0     # Nm
    torque_rate_max: float = 8000.0  # Nm/s
    torque_split_front: float = 0.5
    v_min: float = 1.0

    def __post_init__(self):
        if min(self.mass, self.inertia_z, self.dist_front, self.dist_rear) <= 0:
            raise ConfigError("mass, inertia and axle distances must be positive")


def _brush_expr(alpha, c, fmax):
    t = sp.tan(alpha)
    tsl = 3 * fmax / c
    poly = -c * t + c ** 2 * sp.Abs(t) * t / (3 * fmax) - c ** 3 * t ** 3 / (27 * fmax ** 2)
    return sp.Piecewise((-fmax, t >= tsl), (fmax, t <= -tsl), (poly, True))


@lru_cache(maxsize=8)
def _compiled_dynamics(params: VehicleParams, tire: TireModel):
    """Lambdified f(x, kappa), df/dx and df/dkappa for the 9-state model."""
    x_syms = sp.symbols("s e dphi V r beta delta tau gk", real=True)
    kappa = sp.Symbol("kappa", real=True)
    s, e, dphi, V, r, beta, delta, tau, gk = x_syms

    m, iz = params.mass, params.inertia_z
    a, b, rw = params.dist_front, params.dist_rear, params.wheel_radius
    split = params.torque_split_front
    c = tire.cornering_stiffness
    mu, zeta = tire.mu, tire.zeta
    fzf, fzr = tire.normal_load_front, tire.normal_load_rear

    fx_total = tau / rw
    fxf, fxr = split * fx_total, (1 - split) * fx_total
    fmax_f = sp.sqrt((mu * fzf) ** 2 - zeta * fxf ** 2)
    fmax_r = sp.sqrt((mu * fzr) ** 2 - zeta * fxr ** 2)
    fyf = _brush_expr(sp.atan(beta + a * r / V) - delta, c, fmax_f)
    fyr = _brush_expr(sp.atan(beta - b * r / V), c, fmax_r)

    one_m_ke = 1 - kappa * e
    sdot = V * sp.cos(dphi) / one_m_ke
    edot = V * sp.sin(dphi)
    betadot = (fxf * sp.sin(delta - beta) + fyf * sp.cos(delta - beta)
               - fxr * sp.sin(beta) + fyr * sp.cos(beta)) / (m * V) - r
    # The course-error row contains betadot; substitute its closed form so f
    # is explicit in the state.
    dphidot = betadot + r - kappa * V * sp.cos(dphi) / one_m_ke
    vdot = (fxf * sp.cos(delta - beta) - fyf * sp.sin(delta - beta)
            + fxr * sp.cos(beta) + fyr * sp.sin(beta)) / m
    rdot = (a * (fxf * sp.sin(delta) + fyf * sp.cos(delta)) - b * fyr) / iz

    rows = [sdot, edot, dphidot, vdot, rdot, betadot,
            sp.Integer(0), sp.Integer(0), sp.Integer(0)]
    args = list(x_syms) + [kappa]

    def compile_entries(exprs):
        out = []
        for idx, expr in exprs:
            out.append((idx, sp.lambdify(args, expr, modules="numpy")))
        return out

    f_entries = compile_entries([((i,), rows[i]) for i in range(9) if rows[i] != 0])
    jac_entries = []
    for i in range(9):
        if rows[i] == 0:
            continue
        for j in range(9):
            d = sp.diff(rows[i], x_syms[j])
            if d != 0:
                jac_entries.append(((i, j), d))
    jac_entries = compile_entries(jac_entries)
    dkappa_entries = compile_entries(
        [((i,), sp.diff(rows[i], kappa)) for i in range(9)
         if sp.diff(rows[i], kappa) != 0])
    return f_entries, jac_entries, dkappa_entries


def _fill(entries, args, shape_tail, batch_shape):
    out = np.zeros(batch_shape + shape_tail)
    for idx, fn in entries:
        out[(Ellipsis,) + idx] = fn(*args)
    return out


def single_track_model(params: VehicleParams | None = None,
                       tire: TireModel | None = None,
                       track: TrackGeometry | None = None,
                       curvature: str | float = "track",
                       curvature_blend: float = 2.0) -> SystemModel:
    """Build the 9-state single-track system.

    ``curvature`` selects the reference-curvature source: "track" uses the
    smoothed track profile kappa(s), a float uses that constant value
    everywhere (0.0 for a straight).
    """
    params = params or VehicleParams()
    tire = tire or TireModel()
    track = track or TrackGeometry()
    f_entries, jac_entries, dk_entries = _compiled_dynamics(params, tire)
    hw = track.half_width

    if curvature == "track":
        kappa_fn = lambda s: track.kappa_smooth(s, curvature_blend)
        dkappa_fn = lambda s: track.dkappa_smooth_ds(s, curvature_blend)
    else:
        kap_const = float(curvature)
        kappa_fn = lambda s: np.broadcast_to(kap_const, np.shape(s)).astype(float)
        dkappa_fn = lambda s: np.zeros_like(np.asarray(s, dtype=float))

    def _args(x):
        x = np.asarray(x, dtype=float)
        if np.any(x[..., SPEED] <= params.v_min):
            raise DomainError(f"speed at or below v_min={params.v_min}")
        kap = kappa_fn(x[..., S])
        if np.any(1.0 - kap * x[..., E] <= 0.0):
            raise DomainError("lateral error reaches the turn-center singularity")
        fx = x[..., TAU] / params.wheel_radius
        tire.max_lateral_force(params.torque_split_front * fx, "front")
        tire.max_lateral_force((1 - params.torque_split_front) * fx, "rear")
        return x, [x[..., i] for i in range(9)] + [kap]

    def f(x):
        x, args = _args(x)
        return _fill(f_entries, args, (9,), x.shape[:-1])

    def g(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (9, 2))
        out[..., DELTA, 0] = 1.0
        out[..., TAU, 1] = 1.0
        return out

    def jac_f(x):
        x, args = _args(x)
        J = _fill(jac_entries, args, (9, 9), x.shape[:-1])
        # kappa varies along the track: chain df/dkappa * dkappa/ds into the
        # s column.
        dk = _fill(dk_entries, args, (9,), x.shape[:-1])
        J[..., S] += dk * dkappa_fn(x[..., S])[..., None]
        return J

    def jac_g(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (9, 2, 9))

    def h(x):
        x = np.asarray(x, dtype=float)
        return hw - np.abs(x[..., E])

    def grad_h(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., E] = -np.sign(x[..., E])
        return out

    region = SamplingRegion(
        lo=np.array([0.0, -hw - 1.0, -0.6, max(params.v_min + 0.5, 4.0), -1.5, -0.4,
                     -params.steer_max, -params.torque_max, 0.0]),
        hi=np.array([track.total_length, hw + 1.0, 0.6, 16.0, 1.5, 0.4,
                     params.steer_max, params.torque_max, 1.0]),
        periodic=(True,) + (False,) * 8,
    )
    return SystemModel(
        name="single_track",
        state_dim=9,
        control_dim=2,
        f=f,
        g=g,
        jac_f=jac_f,
        jac_g=jac_g,
        control_set=ControlSet.box([params.steer_rate_max, params.torque_rate_max]),
        h=h,
        grad_h=grad_h,
        state_names=STATE_NAMES,
        constraint_index=E,
        gamma_state_index=GK,
        default_region=region,
        extras={"params": params, "tire": tire, "track": track,
                "half_width": hw, "curvature": curvature},
    )


def extend_with_implicit_box(system: SystemModel,
                             which_states,
                             rate_bounds,
                             pos_bounds,
                             smoothing=None) -> SystemModel:
    """Fold box limits on extended-input states into the dynamics.

    Each listed state i (paired, in order, with control column j) gets

        x_i' = f_u(x_i) + g_u(x_i) * u_j

    where f_u blends {0, +rate/2, -rate/2} and g_u blends {1, 1/2} across the
    position bounds with a tanh of width ``smoothing`` (default 0.02 * bound),
    so the state can never leave its box while keeping f, g smooth. The
    extension owns those rows: the base system must treat them as pure
    integrators (zero drift, unit input gain).
    """
    which_states = tuple(int(i) for i in which_states)
    rates = np.asarray(rate_bounds, dtype=float)
    bounds = np.asarray(pos_bounds, dtype=float)
    if len(which_states) != system.control_dim:
        raise ConfigError("need one extended state per control column")
    if rates.shape != (len(which_states),) or bounds.shape != (len(which_states),):
        raise ConfigError("rate/pos bounds must match which_states")
    if np.any(rates <= 0) or np.any(bounds <= 0):
        raise ConfigError("bounds must be positive")
    width = np.asarray(smoothing if smoothing is not None else 0.02 * bounds, dtype=float)
    width = np.broadcast_to(width, bounds.shape).astype(float)
    if np.any(width <= 0):
        raise ConfigError("smoothing width must be positive")

    def _blend(xi, k):
        up = 0.5 * (1.0 + np.tanh((xi - bounds[k]) / width[k]))
        dn = 0.5 * (1.0 + np.tanh((-xi - bounds[k]) / width[k]))
        return up, dn

    def _blend_deriv(xi, k):
        dup = 0.5 / (width[k] * np.cosh((xi - bounds[k]) / width[k]) ** 2)
        ddn = -0.5 / (width[k] * np.cosh((-xi - bounds[k]) / width[k]) ** 2)
        return dup, ddn

    base_f, base_g = system.f, system.g
    base_jf, base_jg = system.jac_f, system.jac_g

    def f(x):
        x = np.asarray(x, dtype=float)
        out = np.array(base_f(x))
        for k, i in enumerate(which_states):
            up, dn = _blend(x[..., i], k)
            out[..., i] = rates[k] * (dn - up)
        return out

    def g(x):
        x = np.asarray(x, dtype=float)
        out = np.array(base_g(x))
        for k, i in enumerate(which_states):
            up, dn = _blend(x[..., i], k)
            out[..., i, :] = 0.0
            out[..., i, k] = 1.0 - up - dn
        return out

    def jac_f(x):
        x = np.asarray(x, dtype=float)
        out = np.array(base_jf(x))
        for k, i in enumerate(which_states):
            dup, ddn = _blend_deriv(x[..., i], k)
            out[..., i, :] = 0.0
            out[..., i, i] = rates[k] * (ddn - dup)
        return out

    def jac_g(x):
        x = np.asarray(x, dtype=float)
        out = np.array(base_jg(x))
        for k, i in enumerate(which_states):
            dup, ddn = _blend_deriv(x[..., i], k)
            out[..., i, :, :] = 0.0
            out[..., i, k, i] = -(dup + ddn)
        return out

    return SystemModel(
        name=system.name + "+ibox",
        state_dim=system.state_dim,
        control_dim=system.control_dim,
        f=f,
        g=g,
        jac_f=jac_f,
        jac_g=jac_g,
        control_set=ControlSet.box(rates),
        h=system.h,
        grad_h=system.grad_h,
        state_names=system.state_names,
        constraint_index=system.constraint_index,
        gamma_state_index=system.gamma_state_index,
        default_region=system.default_region,
        extras={**system.extras, "implicit_box": {
            "states": which_states,
            "rate_bounds": rates.tolist(),
            "pos_bounds": bounds.tolist(),
            "smoothing": width.tolist(),
        }},
    )


def racing_model(params: VehicleParams | None = None,
                 tire: TireModel | None = None,
                 track: TrackGeometry | None = None,
                 curvature: str | float = "track") -> SystemModel:
    """Single-track model with steering/torque boxes folded in: the system
    actually driven by the sampler, filter and simulator."""
    params = params or VehicleParams()
    base = single_track_model(params, tire, track, curvature)
    return extend_with_implicit_box(
        base,
        which_states=(DELTA, TAU),
        rate_bounds=(params.steer_rate_max, params.torque_rate_max),
        pos_bounds=(params.steer_max, params.torque_max),
    )


def save_params(params: VehicleParams, tire: TireModel, path) -> None:
    payload = {
        "schema_version": PARAMS_SCHEMA_VERSION,
        "note": "illustrative desk-scale defaults, not measurements of any vehicle",
        "vehicle": asdict(params),
        "tire": asdict(tire),
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_params(path) -> tuple[VehicleParams, TireModel]:
    payload = json.loads(Path(path).read_text())
    version = payload.get("schema_version")
    if version != PARAMS_SCHEMA_VERSION:
        raise VersionError(f"params schema {version} != {PARAMS_SCHEMA_VERSION}")
    return VehicleParams(**payload["vehicle"]), TireModel(**payload["tire"])
