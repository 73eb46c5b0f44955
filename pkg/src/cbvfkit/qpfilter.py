"""Minimally invasive safety filter: a tiny exact QP over box-bounded inputs.

Given a value source (grid or net), the constraint

    dVdt_term + L_f V + L_g V . u  >=  -gamma V

becomes a single halfspace a.u >= b; the filter returns the box-feasible
input closest to the request. The solve is closed-form: either the clipped
request already satisfies the halfspace, or the optimum lies exactly on it
and reduces to a clipped 1-D projection (m <= 2 inputs).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics.base import ControlSet, SystemModel
from .errors import ConfigError

Array = np.ndarray

TIME_MODE_TAU_DECREASING = "tau_decreasing"   # include -dV/dtau (finite horizon)
TIME_MODE_FROZEN = "frozen"                   # stationary slice, drop the term


@dataclass
class FilterProblem:
    u_d: Array
    a: Array                   # constraint normal (L_g V)^T
    b: float                   # constraint offset: a.u >= b
    box: ControlSet
    info: dict = field(default_factory=dict)


@dataclass
class FilterResult:
    u_out: Array
    intervened: bool
    kkt_residual: float
    active_set: str
    wall_time: float
    infeasible: bool = False
    value: Optional[float] = None

INTERVENTION_TOL = 1e-9


def build_problem(value_source, system: SystemModel, x: Array, tau: float,
                  u_d: Array, gamma: float,
                  time_mode: str = TIME_MODE_TAU_DECREASING) -> FilterProblem:
    """Assemble the halfspace from the value source at (x, tau).

    In the time-to-go convention the forward-time slope is -dV/dtau;
    ``frozen`` drops the term for stationary deployment of a converged slice.
    """
    if time_mode not in (TIME_MODE_TAU_DECREASING, TIME_MODE_FROZEN):
        raise ConfigError(f"unknown time_mode {time_mode!r}")
    x = np.asarray(x, dtype=float)
    u_d = np.asarray(u_d, dtype=float)
    V, gx, gtau = value_source.value_and_gradients(x, tau)
    f = system.f(x)
    g = system.g(x)
    a = g.T @ gx
    dvdt = -float(gtau) if time_mode == TIME_MODE_TAU_DECREASING else 0.0
    b = -gamma * float(V) - dvdt - float(gx @ f)
    box = system.control_set
    if box.kind != "box":
        raise ConfigError("filter requires a box input set")
    return FilterProblem(u_d=u_d, a=a, b=b, box=box,
                         info={"V": float(V), "tau": float(tau), "dvdt": dvdt})


def _kkt_residual(p: FilterProblem, u: Array, tol: float = 1e-9) -> float:
    """Stationarity residual of 0.5||u - u_d||^2 with least-squares
    nonnegative multipliers on the active constraints."""
    grad = u - p.u_d
    cols = []
    if abs(p.a @ u - p.b) <= tol * (1.0 + abs(p.b)):
        cols.append(p.a)
    lo = p.box.center - p.box.bounds
    hi = p.box.center + p.box.bounds
    for j in range(u.size):
        if u[j] >= hi[j] - tol:
            e = np.zeros(u.size)
            e[j] = -1.0
            cols.append(e)
        elif u[j] <= lo[j] + tol:
            e = np.zeros(u.size)
            e[j] = 1.0
            cols.append(e)
    if not cols:
        return float(np.linalg.norm(grad))
    A = np.stack(cols, axis=1)
    lam, *_ = np.linalg.lstsq(A, grad, rcond=None)
    lam = np.maximum(lam, 0.0)
    return float(np.linalg.norm(grad - A @ lam))


def solve_qp(p: FilterProblem) -> FilterResult:
    """Exact minimizer of ||u - u_d||^2 s.t. a.u >= b and u in box.

    If the box-clipped request is feasible it is optimal (and returned
    bit-exactly when already inside). Otherwise the halfspace is active and
    the optimum is the projection onto {a.u = b} clipped to the box segment.
    Infeasible problems return the box point maximizing a.u, flagged.
    """
    t0 = time.perf_counter()
    lo = p.box.center - p.box.bounds
    hi = p.box.center + p.box.bounds
    u_best = np.where(p.a >= 0.0, hi, lo)   # maximizer of a.u over the box
    if float(p.a @ u_best) < p.b:
        u = u_best
        res = FilterResult(u_out=u, intervened=True, kkt_residual=np.nan,
                           active_set="infeasible", wall_time=0.0, infeasible=True)
        res.wall_time = time.perf_counter() - t0
        return res

    u0 = np.clip(p.u_d, lo, hi)
    if float(p.a @ u0) >= p.b:
        u = p.u_d.copy() if np.array_equal(u0, p.u_d) else u0
        active = "none" if np.array_equal(u0, p.u_d) else "box"
        res = FilterResult(u_out=u, intervened=bool(np.linalg.norm(u - p.u_d) > INTERVENTION_TOL),
                           kkt_residual=_kkt_residual(p, u), active_set=active,
                           wall_time=0.0)
        res.wall_time = time.perf_counter() - t0
        return res

    # halfspace active: minimize over the segment {a.u = b} intersect box
    a2 = float(p.a @ p.a)
    if a2 == 0.0:
        # a == 0 with b > 0 was caught as infeasible above; b <= 0 is a
        # vacuous constraint handled by the clip branch
        raise ConfigError("degenerate constraint slipped past feasibility check")
    u_proj = p.u_d + p.a * (p.b - float(p.a @ p.u_d)) / a2
    if np.all(u_proj >= lo - 1e-12) and np.all(u_proj <= hi + 1e-12):
        u = np.clip(u_proj, lo, hi)
        active = "halfspace"
    else:
        # parametrize the line u = u_proj + t * d with d orthogonal to a
        # (m == 2), intersect with the box, project the request on it
        if p.a.size == 1:
            u = np.clip(np.array([p.b / p.a[0]]), lo, hi)
            active = "halfspace+box"
        else:
            d = np.array([-p.a[1], p.a[0]])
            d /= np.linalg.norm(d)
            t_lo, t_hi = -np.inf, np.inf
            for j in range(2):
                if abs(d[j]) < 1e-15:
                    continue
                c1 = (lo[j] - u_proj[j]) / d[j]
                c2 = (hi[j] - u_proj[j]) / d[j]
                t_lo = max(t_lo, min(c1, c2))
                t_hi = min(t_hi, max(c1, c2))
            t_star = float(np.clip((p.u_d - u_proj) @ d, t_lo, t_hi))
            u = np.clip(u_proj + t_star * d, lo, hi)
            active = "halfspace+box"
    res = FilterResult(u_out=u, intervened=bool(np.linalg.norm(u - p.u_d) > INTERVENTION_TOL),
                       kkt_residual=_kkt_residual(p, u), active_set=active,
                       wall_time=0.0)
    res.wall_time = time.perf_counter() - t0
    return res


def filter_step(value_source, system: SystemModel, x: Array, tau: float,
                u_d: Array, gamma: float,
                time_mode: str = TIME_MODE_TAU_DECREASING) -> FilterResult:
    """build_problem followed by solve_qp; wall time covers both."""
    t0 = time.perf_counter()
    problem = build_problem(value_source, system, x, tau, u_d, gamma, time_mode)
    result = solve_qp(problem)
    result.wall_time = time.perf_counter() - t0
    result.value = problem.info["V"]
    return result
