"""Boundary-trajectory generation from first-order optimality conditions.

A trajectory that barely stays inside S = {h >= 0} touches the boundary
tangentially. Such trajectories solve a state-costate system

    dx/dt = f + g u,   dp/dt = -(Df + Dg u)^T p,   u = argmax_{v in U} p^T g v

with terminal conditions h(x_T) = 0, p_T = grad h(x_T) and zero terminal
Hamiltonian. This module finds terminal points by gradient descent, then
integrates the coupled system backward in time-to-go, and packages the node
states as boundary-focused training samples.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics.base import ControlSet, SamplingRegion, SystemModel
from .errors import (ConfigError, InsufficientBoundaryPoints, IntegrationDrift,
                     SingularDirection)

Array = np.ndarray

SOURCE_INTERIOR = 0
SOURCE_PMP_BOUNDARY = 1
SOURCE_UNIFORM_BOUNDARY = 2
SOURCE_BOUNDARY_PERTURBED = 3
SOURCE_NAMES = ("interior", "pmp_boundary", "uniform_boundary", "boundary_perturbed")


def closed_form_maximizer(v: Array, control_set: ControlSet,
                          singular_tol: float = 1e-12) -> Array:
    """argmax_{u in U} v^T u. Componentwise sign for boxes (ties map to the
    center coordinate), radial projection for balls.

    Accepts (m,) or (B, m); raises SingularDirection for a ball direction
    with norm <= singular_tol (the maximizer is not unique there).
    """
    v = np.asarray(v, dtype=float)
    if control_set.kind == "box":
        return control_set.center + control_set.bounds * np.sign(v)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= singular_tol):
        raise SingularDirection("direction norm below singular_tol for ball set")
    return control_set.center + control_set.radius * v / norms


def support_value(control_set: ControlSet, v: Array) -> Array:
    """sup_{u in U} v^T u, evaluated without forming the maximizer."""
    v = np.asarray(v, dtype=float)
    base = np.einsum("...m,m->...", v, control_set.center)
    if control_set.kind == "box":
        return base + np.einsum("...m,m->...", np.abs(v), control_set.bounds)
    return base + control_set.radius * np.linalg.norm(v, axis=-1)


def hamiltonian(system: SystemModel, x: Array, p: Array) -> Array:
    """H(x, p) = p^T f + sup_u p^T g u."""
    w = np.einsum("...nm,...n->...m", system.g(x), p)
    return np.einsum("...n,...n->...", p, system.f(x)) + support_value(system.control_set, w)


@dataclass(frozen=True)
class TerminalSolveOptions:
    max_iterations: int = 500
    h_tol: float = 1e-8
    tangency_tol: float = 1e-8
    fd_step: float = 1e-7          # in region-normalized coordinates
    initial_step: float = 1.0
    armijo: float = 1e-4
    max_backtracks: int = 40
    line_search: bool = True
    precondition: bool = True      # per-axis curvature scaling of the step
    scales: Optional[Array] = None  # per-axis normalization, default region widths


@dataclass
class TerminalSolveReport:
    converged: bool
    iterations: int
    residuals: tuple[float, float, float]  # (h_res, p_res, tangency_res)
    x_T: Array
    p_T: Array


@dataclass
class Extremal:
    """State-costate trajectory ending tangentially on the safe-set boundary.

    Nodes are chronological in forward time, i.e. ``times`` (time-to-go)
    descends to 0 at the terminal touch point.
    """

    times: Array           # (K,) descending
    states: Array          # (K, n)
    costates: Array        # (K, n)
    controls: Array        # (K, m)
    hamiltonian: Array     # (K,)
    p0: float = 0.0        # abnormality scalar: 0 for every emitted trajectory

    def __len__(self) -> int:
        return self.times.size

    def max_control_defect(self, system: SystemModel) -> float:
        """Optimality defect sup_u w^T u - w^T u_k at every node (w = g^T p).

        Compares objective values rather than controls so tied maximizers
        (w component exactly zero) do not register as defects.
        """
        if not len(self):
            return 0.0
        w = np.einsum("knm,kn->km", system.g(self.states), self.costates)
        best = support_value(system.control_set, w)
        got = np.einsum("km,km->k", w, self.controls)
        return float(np.max(best - got))


def _terminal_residuals(system: SystemModel, x: Array):
    hval = np.asarray(system.h(x), dtype=float)
    gh = system.grad_h(x)
    tang = np.einsum("...n,...n->...", gh, system.f(x))
    w = np.einsum("...nm,...n->...m", system.g(x), gh)
    tang = tang + support_value(system.control_set, w)
    return hval, tang


def solve_terminal_batch(system: SystemModel, x_init: Array,
                         opts: TerminalSolveOptions = TerminalSolveOptions(),
                         region: SamplingRegion | None = None) -> list[TerminalSolveReport]:
    """Vectorized gradient descent on h^2 + tangency^2 from many starts.

    The costate is eliminated by the substitution p_T = grad h(x_T), so the
    p-residual is zero by construction and the decision variable is x_T only.
    """
    region = region or system.default_region
    X = np.atleast_2d(np.asarray(x_init, dtype=float)).copy()
    B, n = X.shape
    if opts.scales is not None:
        scales = np.asarray(opts.scales, dtype=float)
    elif region is not None:
        scales = region.widths
    else:
        scales = np.ones(n)

    def project(Xq):
        if region is None:
            return Xq
        for i in range(n):
            if region.periodic[i]:
                Xq[:, i] = region.lo[i] + np.mod(Xq[:, i] - region.lo[i],
                                                 region.widths[i])
            else:
                Xq[:, i] = np.clip(Xq[:, i], region.lo[i], region.hi[i])
        return Xq

    def objective(Xq):
        hval, tang = _terminal_residuals(system, Xq)
        return hval ** 2 + tang ** 2

    def gradient_and_curvature(Xq, Fq):
        # one central-difference sweep yields both the gradient and the
        # per-axis second difference used to precondition the step
        G = np.zeros_like(Xq)
        C = np.zeros_like(Xq)
        for i in range(n):
            d = np.zeros(n)
            d[i] = opts.fd_step * scales[i]
            Fp, Fm = objective(Xq + d), objective(Xq - d)
            G[:, i] = (Fp - Fm) / (2.0 * d[i])
            C[:, i] = (Fp - 2.0 * Fq + Fm) / d[i] ** 2
        return G, C

    X = project(X)
    F = objective(X)
    iters = np.zeros(B, dtype=int)
    hval, tang = _terminal_residuals(system, X)
    done = (np.abs(hval) <= opts.h_tol) & (np.abs(tang) <= opts.tangency_tol)

    for _ in range(opts.max_iterations):
        if np.all(done):
            break
        act = ~done
        G = np.zeros_like(X)
        C = np.zeros_like(X)
        G[act], C[act] = gradient_and_curvature(X[act], F[act])
        if opts.precondition:
            # keep steps bounded by a few region widths when curvature is
            # flat or negative
            floor = 0.1 * np.maximum(F, 1e-12)[:, None] / scales ** 2
            step_dir = -G / np.maximum(C, floor)
        else:
            step_dir = -G * scales ** 2
        alpha = np.full(B, opts.initial_step)
        moved = np.zeros(B, dtype=bool)
        if opts.line_search:
            gdot = np.einsum("bi,bi->b", G, step_dir)  # negative by construction
            for _ in range(opts.max_backtracks):
                trial = np.where(act & ~moved)[0]
                if trial.size == 0:
                    break
                Xt = project(X[trial] + alpha[trial, None] * step_dir[trial])
                Ft = objective(Xt)
                ok = Ft <= F[trial] + opts.armijo * alpha[trial] * gdot[trial]
                accept = trial[ok]
                X[accept] = Xt[ok]
                F[accept] = Ft[ok]
                moved[accept] = True
                alpha[trial[~ok]] *= 0.5
        else:
            sel = np.where(act)[0]
            X[sel] = project(X[sel] + opts.initial_step * step_dir[sel])
            F[sel] = objective(X[sel])
            moved[sel] = True
        iters[act] += 1
        hval, tang = _terminal_residuals(system, X)
        done = (np.abs(hval) <= opts.h_tol) & (np.abs(tang) <= opts.tangency_tol)

    reports = []
    gh = system.grad_h(X)
    for k in range(B):
        reports.append(TerminalSolveReport(
            converged=bool(done[k]),
            iterations=int(iters[k]),
            residuals=(float(hval[k]), 0.0, float(tang[k])),
            x_T=X[k].copy(),
            p_T=gh[k].copy(),
        ))
    return reports


def solve_terminal_conditions(system: SystemModel, x_init: Array,
                              opts: TerminalSolveOptions = TerminalSolveOptions(),
                              region: SamplingRegion | None = None) -> TerminalSolveReport:
    return solve_terminal_batch(system, np.asarray(x_init)[None, :], opts, region)[0]


def default_hamiltonian_tol(system: SystemModel, x_T: Array, p_T: Array) -> float:
    fT = np.linalg.norm(np.asarray(system.f(x_T), dtype=float), axis=-1)
    return 1e-6 * float(1.0 + np.linalg.norm(p_T, axis=-1) * fT)


def _costate_matrix(system: SystemModel, x: Array, u: Array) -> Array:
    A = system.jac_f(x) + np.einsum("...ijk,...j->...ik", system.jac_g(x), u)
    return A


def _backward_rhs(system: SystemModel, x: Array, p: Array):
    gx = system.g(x)
    w = np.einsum("...nm,...n->...m", gx, p)
    u = closed_form_maximizer(w, system.control_set)
    if system.control_set.kind == "box":
        # On the terminal manifold g^T p vanishes exactly and the maximizer
        # ties; resolve by the sign of d(g^T p)/dtau so the integrated control
        # matches the one-sided limit instead of the tie-break value.
        tie = np.abs(w) <= 1e-12 * (1.0 + np.abs(w).max(axis=-1, keepdims=True))
        if np.any(tie):
            pdot0 = np.einsum("...ik,...i->...k", _costate_matrix(system, x, u), p)
            xdot0 = -(system.f(x) + np.einsum("...nm,...m->...n", gx, u))
            dg = np.einsum("...ijk,...k->...ij", system.jac_g(x), xdot0)
            wdot = (np.einsum("...nm,...n->...m", gx, pdot0)
                    + np.einsum("...nm,...n->...m", dg, p))
            u_tie = system.control_set.center + system.control_set.bounds * np.sign(wdot)
            u = np.where(tie, u_tie, u)
    xdot = system.f(x) + np.einsum("...nm,...m->...n", gx, u)
    pdot = np.einsum("...ik,...i->...k", _costate_matrix(system, x, u), p)
    # time-to-go runs opposite to forward time
    return -xdot, pdot, u


def integrate_extremals_backward(system: SystemModel, x_T: Array, p_T: Array,
                                 horizon: float, dt: float,
                                 region: SamplingRegion | None = None):
    """Batched fixed-step RK4 integration of the state-costate system in
    time-to-go, recomputing the maximizer at every stage.

    Returns (times (K+1,), states (B, K+1, n), costates, controls, ham,
    lengths (B,)) with nodes ascending in time-to-go; ``lengths`` counts valid
    nodes before the trajectory left ``region``.
    """
    if horizon < 0 or dt <= 0:
        raise ConfigError("horizon must be >= 0 and dt > 0")
    region = region or system.default_region
    X = np.atleast_2d(np.asarray(x_T, dtype=float)).copy()
    P = np.atleast_2d(np.asarray(p_T, dtype=float)).copy()
    B, n = X.shape
    steps = int(round(horizon / dt)) if horizon > 0 else 0
    taus = np.arange(steps + 1) * dt

    states = np.empty((B, steps + 1, n))
    costates = np.empty((B, steps + 1, n))
    controls = np.empty((B, steps + 1, system.control_dim))
    ham = np.empty((B, steps + 1))
    alive = np.ones(B, dtype=bool)
    lengths = np.ones(B, dtype=int)

    def record(k, Xk, Pk):
        _, _, u = _backward_rhs(system, Xk, Pk)
        states[:, k] = Xk
        costates[:, k] = Pk
        controls[:, k] = u
        xd = system.f(Xk) + np.einsum("...nm,...m->...n", system.g(Xk), u)
        ham[:, k] = np.einsum("...n,...n->...", Pk, xd)

    record(0, X, P)
    for k in range(1, steps + 1):
        dx1, dp1, _ = _backward_rhs(system, X, P)
        dx2, dp2, _ = _backward_rhs(system, X + 0.5 * dt * dx1, P + 0.5 * dt * dp1)
        dx3, dp3, _ = _backward_rhs(system, X + 0.5 * dt * dx2, P + 0.5 * dt * dp2)
        dx4, dp4, _ = _backward_rhs(system, X + dt * dx3, P + dt * dp3)
        Xn = X + (dt / 6.0) * (dx1 + 2 * dx2 + 2 * dx3 + dx4)
        Pn = P + (dt / 6.0) * (dp1 + 2 * dp2 + 2 * dp3 + dp4)
        if region is not None:
            inside = region.contains(Xn)
            alive &= inside
        X = np.where(alive[:, None], Xn, X)
        P = np.where(alive[:, None], Pn, P)
        record(k, X, P)
        lengths[alive] = k + 1
    return taus, states, costates, controls, ham, lengths


def integrate_extremal_backward(system: SystemModel, x_T: Array, p_T: Array,
                                horizon: float, dt: float,
                                region: SamplingRegion | None = None,
                                ham_tol: float | None = None) -> Extremal:
    """Integrate one extremal backward and return chronological nodes.

    Raises IntegrationDrift when the Hamiltonian trace exceeds ``ham_tol``
    (default scales with the terminal data), which usually means dt is too
    large for the system.
    """
    taus, Xs, Ps, Us, Hs, lengths = integrate_extremals_backward(
        system, x_T, p_T, horizon, dt, region)
    k = int(lengths[0])
    tol = ham_tol if ham_tol is not None else default_hamiltonian_tol(system, x_T, p_T)
    H = Hs[0, :k]
    if np.max(np.abs(H), initial=0.0) > tol:
        raise IntegrationDrift(
            f"|H| reached {np.max(np.abs(H)):.3e} > {tol:.3e}; reduce dt")
    sl = slice(k - 1, None, -1)
    return Extremal(times=taus[:k][::-1].copy(), states=Xs[0, :k][::-1].copy(),
                    costates=Ps[0, :k][::-1].copy(), controls=Us[0, :k][::-1].copy(),
                    hamiltonian=H[::-1].copy())


@dataclass
class SampleBatch:
    """Training tuples (state, time-to-go, source tag)."""

    states: Array          # (N, n)
    times: Array           # (N,)
    sources: Array         # (N,) int8, SOURCE_* constants
    seed: int
    counts: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class DatasetConfig:
    n_samples: int = 1000
    interior_fraction: float = 0.4
    pmp_fraction: float = 0.6
    uniform_fraction: float = 0.0
    noise_half_width: float = 0.10   # boundary lateral-position noise (m)
    horizon: float = 1.0
    dt: float = 1e-3
    seed: int = 0
    time_window: Optional[tuple[float, float]] = None
    n_extremals: int = 32            # terminal solves attempted per round
    max_rounds: int = 4
    dedupe_tol: float = 0.0          # 0 disables root deduplication
    clamp_times: bool = True
    terminal_opts: TerminalSolveOptions = TerminalSolveOptions()

    def fractions_valid(self) -> bool:
        total = self.interior_fraction + self.pmp_fraction + self.uniform_fraction
        return abs(total - 1.0) < 1e-9


def _sample_interior(system: SystemModel, region: SamplingRegion, count: int,
                     rng: np.random.Generator) -> Array:
    out = []
    have = 0
    for _ in range(200):
        if have >= count:
            break
        cand = region.sample(max(2 * (count - have), 16), rng)
        keep = cand[np.asarray(system.h(cand)) >= 0.0]
        out.append(keep)
        have += keep.shape[0]
    got = np.concatenate(out, axis=0) if out else np.empty((0, region.dim))
    if got.shape[0] < count:
        raise InsufficientBoundaryPoints("interior rejection sampling starved")
    return got[:count]


def collect_boundary_nodes(system: SystemModel, config: DatasetConfig,
                           region: SamplingRegion, rng: np.random.Generator,
                           need: int):
    """Gather (state, time-to-go) nodes from integrated boundary trajectories."""
    xs, ts = [], []
    have = 0
    for _ in range(config.max_rounds):
        if have >= need:
            break
        inits = region.sample(config.n_extremals, rng)
        reports = solve_terminal_batch(system, inits, config.terminal_opts, region)
        roots = [r for r in reports if r.converged]
        if config.dedupe_tol > 0 and roots:
            kept = []
            for r in roots:
                if all(np.linalg.norm((r.x_T - q.x_T) / region.widths) >= config.dedupe_tol
                       for q in kept):
                    kept.append(r)
            roots = kept
        if not roots:
            continue
        XT = np.stack([r.x_T for r in roots])
        PT = np.stack([r.p_T for r in roots])
        taus, Xs, _, _, Hs, lengths = integrate_extremals_backward(
            system, XT, PT, config.horizon, config.dt, region)
        for i, rep in enumerate(roots):
            k = int(lengths[i])
            tol = default_hamiltonian_tol(system, rep.x_T, rep.p_T)
            if np.max(np.abs(Hs[i, :k]), initial=0.0) > tol:
                continue
            xs.append(Xs[i, :k])
            ts.append(taus[:k])
            have += k
    if have < need:
        raise InsufficientBoundaryPoints(
            f"collected {have} boundary nodes, needed {need}")
    X = np.concatenate(xs, axis=0)
    T = np.concatenate(ts, axis=0)
    pick = rng.choice(X.shape[0], size=need, replace=False)
    return X[pick], T[pick]


def _uniform_boundary(system: SystemModel, region: SamplingRegion, count: int,
                      rng: np.random.Generator, window: tuple[float, float]):
    idx = system.constraint_index
    hw = system.extras.get("half_width")
    if idx is None or hw is None:
        raise ConfigError("system lacks a lateral boundary description")
    X = region.sample(count, rng)
    X[:, idx] = hw * np.where(rng.random(count) < 0.5, -1.0, 1.0)
    T = rng.uniform(window[0], window[1], size=count)
    return X, T


def generate_dataset(system: SystemModel, config: DatasetConfig,
                     region: SamplingRegion | None = None) -> SampleBatch:
    """Draw a deterministic training batch with the configured source mix.

    Boundary counts are floored so rounding slack lands on interior samples.
    Each boundary sample's constrained coordinate is perturbed uniformly by
    +-noise_half_width, which straddles the boundary and produces both safe
    and unsafe states.
    """
    if not config.fractions_valid():
        raise ConfigError("sample fractions must sum to 1")
    if config.n_samples <= 0:
        raise ConfigError("n_samples must be positive")
    region = region or system.default_region
    if region is None:
        raise ConfigError("no sampling region available")
    rng = np.random.default_rng(config.seed)
    window = config.time_window or (0.0, config.horizon)

    n_pmp = int(np.floor(config.pmp_fraction * config.n_samples))
    n_uni = int(np.floor(config.uniform_fraction * config.n_samples))
    n_int = config.n_samples - n_pmp - n_uni

    parts, times, tags = [], [], []
    if n_int:
        Xi = _sample_interior(system, region, n_int, rng)
        parts.append(Xi)
        times.append(rng.uniform(window[0], window[1], size=n_int))
        tags.append(np.full(n_int, SOURCE_INTERIOR, dtype=np.int8))
    if n_pmp:
        Xp, Tp = collect_boundary_nodes(system, config, region, rng, n_pmp)
        if config.clamp_times:
            Tp = np.clip(Tp, window[0], window[1])
        parts.append(Xp)
        times.append(Tp)
        tags.append(np.full(n_pmp, SOURCE_PMP_BOUNDARY, dtype=np.int8))
    if n_uni:
        Xu, Tu = _uniform_boundary(system, region, n_uni, rng, window)
        parts.append(Xu)
        times.append(Tu)
        tags.append(np.full(n_uni, SOURCE_UNIFORM_BOUNDARY, dtype=np.int8))

    X = np.concatenate(parts, axis=0)
    T = np.concatenate(times, axis=0)
    S = np.concatenate(tags, axis=0)
    if config.noise_half_width > 0 and system.constraint_index is not None:
        on_boundary = S != SOURCE_INTERIOR
        noise = rng.uniform(-config.noise_half_width, config.noise_half_width,
                            size=int(on_boundary.sum()))
        X[on_boundary, system.constraint_index] += noise
        S[on_boundary] = SOURCE_BOUNDARY_PERTURBED
    counts = {SOURCE_NAMES[SOURCE_INTERIOR]: n_int, "pmp_origin": n_pmp,
              "uniform_origin": n_uni}
    return SampleBatch(states=X, times=T, sources=S, seed=config.seed, counts=counts)
