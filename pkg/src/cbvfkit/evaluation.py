"""Metrics for learned safety filters: closed-loop failure rate, safe-set
IOU against the grid oracle, wall-time statistics, and the multi-seed
strategy comparison table."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dynamics.base import SamplingRegion, SystemModel
from .errors import DegenerateSafeSet, EmptyUnionError, TrainingDiverged
from .hjgrid import GridValueFunction
from .numeric import rk4_step
from . import qpfilter, valuenet

Array = np.ndarray


def make_corridor_racer(system: SystemModel, seed: int,
                        target_amplitude: float = 3.5,
                        target_period: float = 2.5,
                        heading_gain: float = 0.8,
                        steer_gain: float = 3.0) -> Callable:
    """Aggressive nominal policy for the corridor: chases a sinusoidal target
    line whose amplitude exceeds the track half-width, so it drives through
    the boundary unless filtered."""
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    speed = system.extras["speed"]
    ubar = system.control_set.bounds[0]

    def policy(x: Array, t: float) -> Array:
        e, dphi = x[0], x[1]
        e_target = sign * target_amplitude * np.sin(2 * np.pi * t / target_period + phase)
        dphi_des = np.clip(heading_gain * (e_target - e), -1.0, 1.0)
        u = steer_gain * (dphi_des - dphi) / speed
        return np.array([np.clip(u, -ubar, ubar)])

    return policy


def simulate_filtered(system: SystemModel, value_source, x0: Array,
                      policy: Callable, horizon: float, gamma: float,
                      tick_rate: float = 100.0, rk4_substeps: int = 4,
                      filter_enabled: bool = True,
                      time_mode: str = qpfilter.TIME_MODE_TAU_DECREASING,
                      tau_policy: str = "decreasing"):
    """Fixed-tick closed-loop rollout; the filter runs once per tick and the
    dynamics advance with RK4 substeps under the held input.

    ``tau_policy`` "decreasing" evaluates the value at the remaining
    time-to-go (finite-horizon guarantee); "frozen" always queries the last
    trained slice.
    """
    dt = 1.0 / tick_rate
    n_ticks = int(round(horizon * tick_rate))
    x = np.asarray(x0, dtype=float).copy()
    rows = {"t": [], "x": [], "u_d": [], "u_out": [], "h": [], "value": [],
            "intervened": []}
    for k in range(n_ticks):
        t = k * dt
        tau = max(horizon - t, 0.0) if tau_policy == "decreasing" else horizon
        u_d = np.asarray(policy(x, t), dtype=float)
        if filter_enabled:
            res = qpfilter.filter_step(value_source, system, x, tau, u_d, gamma,
                                       time_mode)
            u = res.u_out
            value = res.value
            intervened = res.intervened
        else:
            u = np.clip(u_d, system.control_set.center - system.control_set.bounds,
                        system.control_set.center + system.control_set.bounds)
            value = np.nan
            intervened = False
        sub = dt / rk4_substeps
        for _ in range(rk4_substeps):
            x = rk4_step(lambda y: system.xdot(y, u), x, sub)
        rows["t"].append(t + dt)
        rows["x"].append(x.copy())
        rows["u_d"].append(u_d)
        rows["u_out"].append(u)
        rows["h"].append(float(system.h(x)))
        rows["value"].append(value)
        rows["intervened"].append(intervened)
    return {k: np.asarray(v) for k, v in rows.items()}


def sample_learned_safe_states(value_source, system: SystemModel,
                               region: SamplingRegion, n: int, tau: float,
                               rng: np.random.Generator,
                               margin: float = 0.0,
                               max_tries: int = 200) -> Array:
    """Uniform states from {V(x, tau) >= margin} inside the region and S."""
    out = []
    have = 0
    for _ in range(max_tries):
        if have >= n:
            break
        cand = region.sample(max(4 * (n - have), 32), rng)
        keep = cand[np.asarray(system.h(cand)) >= 0.0]
        if keep.shape[0] == 0:
            continue
        vals = _batch_values(value_source, keep, tau)
        keep = keep[vals >= margin]
        if keep.shape[0]:
            out.append(keep)
            have += keep.shape[0]
    if have < n:
        raise DegenerateSafeSet(
            f"found {have}/{n} states with V >= {margin} after {max_tries} rounds")
    return np.concatenate(out, axis=0)[:n]


def _batch_values(value_source, X: Array, tau: float) -> Array:
    if isinstance(value_source, GridValueFunction):
        return value_source.value(X, tau)
    return value_source.value(X, tau)


def failure_rate(value_source, system: SystemModel, nominal_policy_factory,
                 n_rollouts: int, horizon: float, seed: int,
                 gamma: float, region: SamplingRegion | None = None,
                 tick_rate: float = 100.0, margin: float = 0.0,
                 time_mode: str = qpfilter.TIME_MODE_TAU_DECREASING,
                 filter_enabled: bool = True) -> float:
    """Fraction of filtered rollouts from learned-safe starts that violate
    h >= 0 at any tick within the horizon. Deterministic per seed."""
    if n_rollouts < 1:
        raise DegenerateSafeSet("need at least one rollout")
    region = region or system.default_region
    rng = np.random.default_rng(seed)
    starts = sample_learned_safe_states(value_source, system, region,
                                        n_rollouts, horizon, rng, margin)
    failures = 0
    for i in range(n_rollouts):
        policy = nominal_policy_factory(system, seed * 100003 + i)
        traj = simulate_filtered(system, value_source, starts[i], policy,
                                 horizon, gamma, tick_rate,
                                 filter_enabled=filter_enabled,
                                 time_mode=time_mode)
        if np.any(traj["h"] < 0.0):
            failures += 1
    return failures / n_rollouts


def iou(value_source, oracle: GridValueFunction, tau: float) -> float:
    """Intersection-over-union of {V_learned >= 0} and {V_oracle >= 0} over
    the oracle grid nodes."""
    if isinstance(value_source, GridValueFunction) and value_source.spec == oracle.spec:
        # same grid: compare nodal values directly so exact zeros on the
        # boundary cannot flip sign through interpolation dust
        learned = value_source.values_at(tau).ravel() >= 0.0
    else:
        X = oracle.spec.mesh().reshape(-1, oracle.spec.ndim)
        learned = _batch_values(value_source, X, tau) >= 0.0
    truth = oracle.values_at(tau).ravel() >= 0.0
    union = np.sum(learned | truth)
    if union == 0:
        raise EmptyUnionError("both safe sets are empty at this tau")
    return float(np.sum(learned & truth) / union)


@dataclass
class EvalCell:
    strategy: str
    budget: int
    seed: int
    failure_rate: float
    iou: float
    wall_time: float
    diverged: bool = False


@dataclass
class EvalReport:
    cells: list[EvalCell] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        """Mean +- SD (unbiased over seeds) per (strategy, budget)."""
        table = {}
        keys = sorted({(c.strategy, c.budget) for c in self.cells})
        for strategy, budget in keys:
            sel = [c for c in self.cells
                   if c.strategy == strategy and c.budget == budget and not c.diverged]
            fr = np.array([c.failure_rate for c in sel])
            io = np.array([c.iou for c in sel])
            table[(strategy, budget)] = {
                "n_seeds": len(sel),
                "failure_mean": float(fr.mean()) if len(sel) else np.nan,
                "failure_sd": float(fr.std(ddof=1)) if len(sel) > 1 else np.nan,
                "iou_mean": float(io.mean()) if len(sel) else np.nan,
                "iou_sd": float(io.std(ddof=1)) if len(sel) > 1 else np.nan,
                "diverged": sum(1 for c in self.cells
                                if c.strategy == strategy and c.budget == budget
                                and c.diverged),
            }
        return table

    def to_json(self, path=None) -> str:
        payload = {
            "meta": self.meta,
            "cells": [vars(c) for c in self.cells],
            "aggregate": {f"{k[0]}@{k[1]}": v for k, v in self.aggregate().items()},
        }
        text = json.dumps(payload, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path=None) -> str:
        lines = ["strategy,budget,seed,failure_rate,iou,wall_time,diverged"]
        for c in self.cells:
            lines.append(f"{c.strategy},{c.budget},{c.seed},{c.failure_rate},"
                         f"{c.iou},{c.wall_time},{int(c.diverged)}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def _eval_one_cell(args) -> EvalCell:
    (system, base_config, strategy, budget, seed, oracle, n_rollouts,
     horizon, gamma, margin) = args
    from dataclasses import replace

    pre = max(int(0.1 * budget), 1)
    fine = max(int(0.15 * budget), 1)
    cfg = replace(base_config, strategy=strategy, seed=seed,
                  epochs_pretrain=pre, epochs_finetune=fine,
                  epochs_curriculum=max(budget - pre - fine, 1))
    t0 = time.perf_counter()
    try:
        net, _ = valuenet.train(system, cfg)
    except TrainingDiverged:
        return EvalCell(strategy, budget, seed, np.nan, np.nan,
                        time.perf_counter() - t0, diverged=True)
    fr = failure_rate(net, system, make_corridor_racer, n_rollouts, horizon,
                      seed, gamma, margin=margin)
    io = iou(net, oracle, horizon)
    return EvalCell(strategy, budget, seed, fr, io, time.perf_counter() - t0)


def compare_strategies(system: SystemModel, base_config: valuenet.TrainConfig,
                       budgets: list[int], seeds: list[int],
                       oracle: GridValueFunction,
                       strategies=("pmp", "uniform"),
                       n_rollouts: int = 100, margin: float = 0.0,
                       workers: int = 1) -> EvalReport:
    """Train per (strategy x budget x seed), evaluate both metrics, and
    aggregate mean +- SD. Cells that diverge are flagged and excluded from
    the means. Deterministic regardless of worker count (keyed reduction)."""
    if len(seeds) < 2:
        raise DegenerateSafeSet("need >= 2 seeds for an SD")
    jobs = [(system, base_config, strategy, budget, seed, oracle, n_rollouts,
             base_config.horizon, base_config.gamma, margin)
            for strategy in strategies for budget in budgets for seed in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_eval_one_cell, jobs))
    else:
        cells = [_eval_one_cell(j) for j in jobs]
    order = {(c.strategy, c.budget, c.seed): c for c in cells}
    cells = [order[k] for k in sorted(order)]
    report = EvalReport(cells=cells, meta={
        "budgets": budgets, "seeds": seeds, "strategies": list(strategies),
        "n_rollouts": n_rollouts, "gamma": base_config.gamma,
        "horizon": base_config.horizon})
    return report
