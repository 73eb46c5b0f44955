"""Fixed-tick shared-control simulation service with JSON telemetry.

One session advances the racing model at a fixed tick, maps the latest
driver request (roadwheel angle, total torque) to rate demands, passes them
through the safety filter, and broadcasts a state message per tick.
Transport is WebSocket (plus an optional line-delimited TCP fallback); the
wire format is one JSON object per message.

Client -> server:  {"type": "command", "steer": rad, "torque": Nm, "seq": n}
                   {"type": "reset"} | {"type": "toggle_filter", "enabled": b}
Server -> client:  {"type": "state", ...} | {"type": "violation", ...}
"""

from __future__ import annotations

import asyncio
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import singletrack as st
from .dynamics.base import SystemModel
from .dynamics.track import TrackGeometry, frenet_to_global
from .errors import VersionError
from .numeric import rk4_step
from . import qpfilter

LOG_SCHEMA_VERSION = 1


@dataclass
class ServiceConfig:
    tick_rate: float = 50.0
    gamma: float = 0.3
    steer_gain: float = 8.0       # request-position -> rate demand (1/s)
    torque_gain: float = 6.0
    horizon_tau: float = 1.0      # time-to-go slice queried by the filter
    time_mode: str = qpfilter.TIME_MODE_FROZEN
    rk4_substeps: int = 4
    queue_size: int = 64
    idle_policy: str = "hold"     # "hold" | "zero" the command after idle_ticks
    idle_ticks: int = 50

    def __post_init__(self):
        if not (0 < self.tick_rate <= 200):
            raise ValueError("tick_rate must be in (0, 200]")


@dataclass
class Session:
    """State of one simulation loop; exactly one loop may drive it."""

    system: SystemModel
    value_source: object
    track: TrackGeometry
    config: ServiceConfig
    session_id: str = "session-0"
    filter_enabled: bool = True
    state: np.ndarray = field(default=None)
    command: tuple[float, float, int] = (0.0, 0.0, -1)   # steer, torque, seq
    last_command_tick: int = 0
    tick: int = 0
    missed_ticks: int = 0
    safe_stop: bool = False
    log: list = field(default_factory=list)
    subscribers: list = field(default_factory=list)
    stop_requested: bool = False

    def __post_init__(self):
        if self.state is None:
            self.state = self.initial_state()

    def initial_state(self) -> np.ndarray:
        params: st.VehicleParams = self.system.extras["params"]
        x = np.zeros(self.system.state_dim)
        x[st.SPEED] = max(6.0, params.v_min + 2.0)
        x[st.GK] = self.config.gamma
        return x

    def reset(self) -> None:
        self.state = self.initial_state()
        self.safe_stop = False


def default_session(value_source, params: st.VehicleParams | None = None,
                    tire: st.TireModel | None = None,
                    track: TrackGeometry | None = None,
                    config: ServiceConfig | None = None) -> Session:
    params = params or st.VehicleParams()
    track = track or TrackGeometry()
    system = st.racing_model(params, tire, track)
    return Session(system=system, value_source=value_source, track=track,
                   config=config or ServiceConfig())


def _advance(system: SystemModel, x: np.ndarray, u: np.ndarray, dt: float,
             substeps: int, track: TrackGeometry) -> np.ndarray:
    params: st.VehicleParams = system.extras["params"]
    sub = dt / substeps
    for _ in range(substeps):
        x = rk4_step(lambda y: system.xdot(y, u), x, sub)
    # desk-scale guards: wrap path progress, keep speed above the model's
    # singular floor
    x[st.S] = np.mod(x[st.S], track.total_length)
    x[st.SPEED] = max(x[st.SPEED], params.v_min * 1.05)
    return x


def rate_demand(session: Session, steer_req: float, torque_req: float) -> np.ndarray:
    """Map positional driver requests to rate demands for the extended model."""
    params: st.VehicleParams = session.system.extras["params"]
    cfg = session.config
    steer_req = float(np.clip(steer_req, -params.steer_max, params.steer_max))
    torque_req = float(np.clip(torque_req, -params.torque_max, params.torque_max))
    u = np.array([
        cfg.steer_gain * (steer_req - session.state[st.DELTA]),
        cfg.torque_gain * (torque_req - session.state[st.TAU]),
    ])
    return np.clip(u, -session.system.control_set.bounds,
                   session.system.control_set.bounds)


def _value_domain_ok(session: Session) -> bool:
    vs = session.value_source
    lo = getattr(vs, "state_lo", None)
    if lo is not None:
        hi = vs.state_hi
        return bool(np.all(session.state >= lo) and np.all(session.state <= hi))
    try:
        vs.value_and_gradients(session.state, session.config.horizon_tau)
        return True
    except Exception:
        return False


def step_session(session: Session) -> dict:
    """One simulation tick: filter the latest command, integrate, and return
    the state message. Pure with respect to wall time (usable offline)."""
    cfg = session.config
    dt = 1.0 / cfg.tick_rate
    steer_req, torque_req, seq = session.command
    idle = session.tick - session.last_command_tick > cfg.idle_ticks
    if session.safe_stop or (idle and cfg.idle_policy == "zero"):
        steer_req, torque_req = 0.0, 0.0
    u_d = rate_demand(session, steer_req, torque_req)

    intervened = False
    value = float("nan")
    u = u_d
    if session.filter_enabled:
        if not _value_domain_ok(session):
            session.safe_stop = True
            u = rate_demand(session, 0.0, 0.0)
        else:
            gamma = float(session.state[st.GK])
            res = qpfilter.filter_step(session.value_source, session.system,
                                       session.state, cfg.horizon_tau, u_d, gamma,
                                       cfg.time_mode)
            u = res.u_out
            intervened = res.intervened
            value = res.value if res.value is not None else float("nan")

    session.state = _advance(session.system, session.state, u, dt,
                             cfg.rk4_substeps, session.track)
    session.tick += 1
    x = session.state
    gx, gy, psi = frenet_to_global(session.track, x[st.S], x[st.E], x[st.DPHI])
    msg = {
        "type": "state",
        "t": session.tick * dt,
        "s": float(x[st.S]), "e": float(x[st.E]), "dphi": float(x[st.DPHI]),
        "V_speed": float(x[st.SPEED]), "r": float(x[st.YAW_RATE]),
        "beta": float(x[st.BETA]), "delta": float(x[st.DELTA]),
        "tau": float(x[st.TAU]),
        "X": float(gx), "Y": float(gy), "psi": float(psi),
        "value": value,
        "u_d": [float(v) for v in u_d], "u_out": [float(v) for v in u],
        "intervened": bool(intervened),
        "missed_ticks": session.missed_ticks,
        "applied_seq": seq,
        "filter_enabled": session.filter_enabled,
        "safe_stop": session.safe_stop,
    }
    session.log.append({
        "type": "tick", "t": msg["t"], "seq": seq,
        "cmd": [steer_req, torque_req],
        "x": [float(v) for v in x],
        "u_d": msg["u_d"], "u_out": msg["u_out"],
        "intervened": msg["intervened"], "value": value,
        "filter_enabled": session.filter_enabled,
    })
    return msg


def violation_message(session: Session) -> Optional[dict]:
    hval = float(session.system.h(session.state))
    if hval < 0.0:
        return {"type": "violation", "t": session.tick / session.config.tick_rate,
                "e": float(session.state[st.E]), "h": hval}
    return None


async def run_session(session: Session) -> None:
    """Realtime loop: one tick per period, latest-command-wins mailbox,
    bounded fan-out queues (drop-oldest on backpressure). Runs until
    ``session.stop_requested``; deadline misses are counted, never hidden."""
    period = 1.0 / session.config.tick_rate
    loop = asyncio.get_running_loop()
    next_deadline = loop.time() + period
    while not session.stop_requested:
        msg = step_session(session)
        viol = violation_message(session)
        for q in list(session.subscribers):
            for payload in ([msg, viol] if viol else [msg]):
                if q.full():
                    try:
                        q.get_nowait()
                    except asyncio.QueueEmpty:
                        pass
                q.put_nowait(payload)
        now = loop.time()
        if now > next_deadline + period:
            session.missed_ticks += int((now - next_deadline) / period)
            next_deadline = now + period
        else:
            await asyncio.sleep(max(next_deadline - now, 0.0))
            next_deadline += period


def handle_client_message(session: Session, raw: str) -> None:
    msg = json.loads(raw)
    kind = msg.get("type")
    if kind == "command":
        seq = int(msg.get("seq", -1))
        if seq >= session.command[2]:
            session.command = (float(msg.get("steer", 0.0)),
                               float(msg.get("torque", 0.0)), seq)
            session.last_command_tick = session.tick
    elif kind == "reset":
        session.reset()
    elif kind == "toggle_filter":
        session.filter_enabled = bool(msg.get("enabled", True))


def save_log(session: Session, path) -> None:
    lines = [json.dumps({"type": "meta", "schema_version": LOG_SCHEMA_VERSION,
                         "tick_rate": session.config.tick_rate,
                         "gamma": session.config.gamma,
                         "session_id": session.session_id})]
    lines += [json.dumps(entry) for entry in session.log]
    Path(path).write_text("\n".join(lines) + "\n")


def replay_log(path, system: SystemModel | None = None,
               track: TrackGeometry | None = None) -> dict:
    """Re-run recorded driver commands through the model with the filter
    disabled: the counterfactual trajectory had the inputs been applied
    directly. Deterministic."""
    lines = [json.loads(s) for s in Path(path).read_text().splitlines() if s.strip()]
    if not lines or lines[0].get("type") != "meta":
        raise VersionError("log missing meta header")
    meta = lines[0]
    if meta.get("schema_version") != LOG_SCHEMA_VERSION:
        raise VersionError(f"log schema {meta.get('schema_version')} "
                           f"!= {LOG_SCHEMA_VERSION}")
    ticks = [e for e in lines[1:] if e.get("type") == "tick"]
    track = track or TrackGeometry()
    system = system or st.racing_model(track=track)
    cfg = ServiceConfig(tick_rate=meta["tick_rate"], gamma=meta.get("gamma", 0.3))
    session = Session(system=system, value_source=None, track=track, config=cfg,
                      filter_enabled=False)
    if not ticks:
        return {"t": np.empty(0), "x": np.empty((0, system.state_dim)),
                "h": np.empty(0)}
    out_t, out_x, out_h = [], [], []
    for entry in ticks:
        session.command = (entry["cmd"][0], entry["cmd"][1], entry.get("seq", -1))
        msg = step_session(session)
        out_t.append(msg["t"])
        out_x.append(session.state.copy())
        out_h.append(float(system.h(session.state)))
    return {"t": np.asarray(out_t), "x": np.stack(out_x), "h": np.asarray(out_h)}


def build_app(session: Session, static_dir: Optional[str] = None):
    """FastAPI app exposing /ws plus optional static cockpit assets."""
    from fastapi import FastAPI, WebSocket, WebSocketDisconnect
    from fastapi.staticfiles import StaticFiles

    app = FastAPI(title="shared-control simulation service")
    app.state.session = session
    loop_task: dict = {}

    @app.on_event("startup")
    async def _start():
        loop_task["run"] = asyncio.create_task(run_session(session))

    @app.on_event("shutdown")
    async def _stop():
        session.stop_requested = True
        task = loop_task.get("run")
        if task:
            task.cancel()

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        queue: asyncio.Queue = asyncio.Queue(maxsize=session.config.queue_size)
        session.subscribers.append(queue)

        async def pump_out():
            while True:
                payload = await queue.get()
                await ws.send_text(json.dumps(payload))

        sender = asyncio.create_task(pump_out())
        try:
            while True:
                raw = await ws.receive_text()
                handle_client_message(session, raw)
        except WebSocketDisconnect:
            pass
        finally:
            sender.cancel()
            if queue in session.subscribers:
                session.subscribers.remove(queue)

    if static_dir:
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app


async def serve_tcp(session: Session, host: str, port: int):
    """Line-delimited JSON fallback transport for non-browser clients."""

    async def handler(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        queue: asyncio.Queue = asyncio.Queue(maxsize=session.config.queue_size)
        session.subscribers.append(queue)

        async def pump_out():
            while True:
                payload = await queue.get()
                writer.write((json.dumps(payload) + "\n").encode())
                await writer.drain()

        sender = asyncio.create_task(pump_out())
        try:
            while True:
                raw = await reader.readline()
                if not raw:
                    break
                handle_client_message(session, raw.decode())
        finally:
            sender.cancel()
            if queue in session.subscribers:
                session.subscribers.remove(queue)
            writer.close()

    server = await asyncio.start_server(handler, host, port)
    async with server:
        await asyncio.gather(server.serve_forever(), run_session(session))
