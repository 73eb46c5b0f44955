"""Command-line entry points for the toolkit.

Subcommands: solve-grid, train, filter-demo, eval-failure, eval-iou, sweep,
serve. Each one is a thin wrapper over the library API; see README for
worked examples.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, hjgrid, qpfilter, valuenet
from .dynamics.corridor import kinematic_corridor_model
from .dynamics.singletrack import VehicleParams, TireModel, racing_model, load_params
from .dynamics.track import TrackGeometry, load_track


def _corridor_from_args(args) -> tuple:
    track = load_track(args.track) if getattr(args, "track", None) else TrackGeometry()
    system = kinematic_corridor_model(args.speed, args.curvature_bound, track)
    return system, track


def _grid_spec(system, resolution: int) -> hjgrid.GridSpec:
    region = system.default_region
    return hjgrid.GridSpec(lo=tuple(region.lo), hi=tuple(region.hi),
                           counts=(resolution, resolution),
                           periodic=tuple(region.periodic))


def cmd_solve_grid(args) -> int:
    system, _ = _corridor_from_args(args)
    spec = _grid_spec(system, args.resolution)
    vf = hjgrid.solve_cbvf(system, spec, gamma=args.gamma, horizon=args.horizon,
                           cfl=args.cfl, progress=not args.quiet)
    hjgrid.save_grid(vf, args.out)
    print(f"wrote {args.out} ({vf.taus.size} slices, gamma={args.gamma})")
    if args.levelset_csv:
        hjgrid.export_level_set_csv(vf, args.horizon, args.levelset_csv)
        print(f"wrote {args.levelset_csv}")
    return 0


def _train_config(args) -> valuenet.TrainConfig:
    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
    overrides.setdefault("strategy", args.strategy)
    known = {f.name for f in dataclasses.fields(valuenet.TrainConfig)}
    bad = set(overrides) - known
    if bad:
        raise SystemExit(f"unknown config keys: {sorted(bad)}")
    if "hidden" in overrides:
        overrides["hidden"] = tuple(overrides["hidden"])
    return valuenet.TrainConfig(**overrides)


def cmd_train(args) -> int:
    system, _ = _corridor_from_args(args)
    base = _train_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for seed in args.seeds:
        cfg = dataclasses.replace(base, seed=seed)
        net, report = valuenet.train(system, cfg)
        path = out_dir / f"model_{cfg.strategy}_seed{seed}.json"
        valuenet.save_model(net, path)
        r = report.residuals
        print(f"seed {seed}: residual {r[0]:.4f} -> {r[-min(len(r),100):].mean():.4f} "
              f"({report.wall_time:.1f}s) -> {path}")
    return 0


def _load_value_source(path: str):
    if path.endswith(".json"):
        return valuenet.load_model(path)
    return hjgrid.load_grid(path)


def cmd_filter_demo(args) -> int:
    system, _ = _corridor_from_args(args)
    source = _load_value_source(args.model)
    rng = np.random.default_rng(args.seed)
    policy = evaluation.make_corridor_racer(system, args.seed)
    starts = evaluation.sample_learned_safe_states(
        source, system, system.default_region, 1, args.horizon, rng,
        margin=args.margin)
    traj = evaluation.simulate_filtered(system, source, starts[0], policy,
                                        args.horizon, args.gamma)
    lines = ["t,e,dphi,u_d,u_out,value,intervened,h"]
    for k in range(traj["t"].size):
        lines.append(f"{traj['t'][k]:.4f},{traj['x'][k][0]:.6f},{traj['x'][k][1]:.6f},"
                     f"{traj['u_d'][k][0]:.6f},{traj['u_out'][k][0]:.6f},"
                     f"{traj['value'][k]:.6f},{int(traj['intervened'][k])},"
                     f"{traj['h'][k]:.6f}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    n_int = int(np.sum(traj["intervened"]))
    print(f"wrote {args.out}: {traj['t'].size} ticks, {n_int} interventions, "
          f"min h = {traj['h'].min():.3f}")
    return 0


def cmd_eval_failure(args) -> int:
    system, _ = _corridor_from_args(args)
    source = _load_value_source(args.model)
    rate = evaluation.failure_rate(source, system, evaluation.make_corridor_racer,
                                   args.rollouts, args.horizon, args.seed,
                                   args.gamma, margin=args.margin)
    print(json.dumps({"failure_rate": rate, "rollouts": args.rollouts,
                      "seed": args.seed}))
    return 0


def cmd_eval_iou(args) -> int:
    system, _ = _corridor_from_args(args)
    source = _load_value_source(args.model)
    oracle = hjgrid.load_grid(args.grid)
    value = evaluation.iou(source, oracle, args.tau)
    print(json.dumps({"iou": value, "tau": args.tau}))
    return 0


def cmd_sweep(args) -> int:
    system, _ = _corridor_from_args(args)
    oracle = hjgrid.load_grid(args.grid)
    base = _train_config(args)
    report = evaluation.compare_strategies(
        system, base, budgets=args.budgets, seeds=args.seeds, oracle=oracle,
        n_rollouts=args.rollouts, workers=args.workers)
    report.to_csv(args.out_csv)
    report.to_json(args.out_json)
    for key, row in report.aggregate().items():
        print(key, {k: round(v, 4) if isinstance(v, float) else v
                    for k, v in row.items()})
    print(f"wrote {args.out_csv} and {args.out_json}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from . import service

    source = _load_value_source(args.model)
    if args.params:
        params, tire = load_params(args.params)
    else:
        params, tire = VehicleParams(), TireModel()
    track = load_track(args.track) if args.track else TrackGeometry()
    cfg = service.ServiceConfig(tick_rate=args.tick_rate, gamma=args.gamma)
    session = service.default_session(source, params, tire, track, cfg)
    app = service.build_app(session, static_dir=args.static)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbvfkit")
    sub = p.add_subparsers(dest="command", required=True)

    def corridor_args(sp):
        sp.add_argument("--speed", type=float, default=10.0)
        sp.add_argument("--curvature-bound", type=float, default=1 / 12)
        sp.add_argument("--track", type=str, default=None,
                        help="track JSON (defaults to the stock oval)")

    sp = sub.add_parser("solve-grid", help="solve the grid value function")
    corridor_args(sp)
    sp.add_argument("--gamma", type=float, default=0.1)
    sp.add_argument("--horizon", type=float, default=1.0)
    sp.add_argument("--resolution", type=int, default=201)
    sp.add_argument("--cfl", type=float, default=0.5)
    sp.add_argument("--out", type=str, required=True)
    sp.add_argument("--levelset-csv", type=str, default=None)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_solve_grid)

    sp = sub.add_parser("train", help="train value networks")
    corridor_args(sp)
    sp.add_argument("--strategy", choices=["uniform", "pmp"], default="pmp")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0])
    sp.add_argument("--config", type=str, default=None,
                    help="JSON with TrainConfig overrides")
    sp.add_argument("--out-dir", type=str, default="models")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("filter-demo", help="run a scripted request trace "
                        "through the filter, emit CSV")
    corridor_args(sp)
    sp.add_argument("--model", type=str, required=True,
                    help="model .json or grid container")
    sp.add_argument("--gamma", type=float, default=0.1)
    sp.add_argument("--horizon", type=float, default=1.0)
    sp.add_argument("--margin", type=float, default=0.2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=str, default="filter_demo.csv")
    sp.set_defaults(func=cmd_filter_demo)

    sp = sub.add_parser("eval-failure", help="closed-loop failure rate")
    corridor_args(sp)
    sp.add_argument("--model", type=str, required=True)
    sp.add_argument("--rollouts", type=int, default=200)
    sp.add_argument("--horizon", type=float, default=1.0)
    sp.add_argument("--gamma", type=float, default=0.1)
    sp.add_argument("--margin", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval_failure)

    sp = sub.add_parser("eval-iou", help="safe-set IOU against a grid oracle")
    corridor_args(sp)
    sp.add_argument("--model", type=str, required=True)
    sp.add_argument("--grid", type=str, required=True)
    sp.add_argument("--tau", type=float, default=1.0)
    sp.set_defaults(func=cmd_eval_iou)

    sp = sub.add_parser("sweep", help="strategy comparison table")
    corridor_args(sp)
    sp.add_argument("--grid", type=str, required=True)
    sp.add_argument("--strategy", choices=["uniform", "pmp"], default="pmp")
    sp.add_argument("--config", type=str, default=None)
    sp.add_argument("--budgets", type=int, nargs="+", default=[1500, 3000])
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    sp.add_argument("--rollouts", type=int, default=100)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out-csv", type=str, default="sweep.csv")
    sp.add_argument("--out-json", type=str, default="sweep.json")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("serve", help="realtime shared-control service")
    sp.add_argument("--model", type=str, required=True)
    sp.add_argument("--track", type=str, default=None)
    sp.add_argument("--params", type=str, default=None,
                    help="vehicle/tire parameter JSON")
    sp.add_argument("--port", type=int, default=8700)
    sp.add_argument("--host", type=str, default="127.0.0.1")
    sp.add_argument("--tick-rate", type=float, default=50.0)
    sp.add_argument("--gamma", type=float, default=0.3)
    sp.add_argument("--static", type=str, default=None,
                    help="directory of cockpit assets to serve at /")
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
