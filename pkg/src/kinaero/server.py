"""Realtime websocket service around the interaction session.

Three cooperating pieces share one asyncio loop: the control task (timing
master, one tick per 100 ms), a broadcast task fanning the latest state to
clients at 20 Hz, and per-client receivers that feed single-slot input
mailboxes (force, grab, release, set_w), sampled once per control tick.

Inference runs in a single worker thread. If a tick's inference has not
finished by the next deadline, the plant still advances using the previous
prediction and the lag counter increments; a late result is picked up at
the next tick boundary. Slow clients get frames dropped, never a stalled
loop.

Wire protocol (JSON):
  server -> client {"type": "state", "t", "theta", "theta_pred", "e_tilde",
                    "pred_err", "kld", "w_i", "pattern"}
  client -> server {"type": "force", "joint": 0-3, "value": N m}
                   {"type": "grab", "joint": 0-3, "angle": rad}
                   {"type": "release", "joint": 0-3}
                   {"type": "set_w", "value": float}
"""

from __future__ import annotations

import asyncio
import json
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import websockets

from .datagen import CYCLE_STEPS, normalized_to_rad
from .experiments import classify_pattern
from .inference import infer_step
from .session import InteractionSession

MAX_CLIENT_MSGS_PER_S = 100


class ServerState:
    def __init__(self, session: InteractionSession):
        self.session = session
        self.clients: set = set()
        self.pattern = "?"
        self.stopping = asyncio.Event()
        self.port: int | None = None

    def state_message(self) -> dict:
        s = self.session
        tel = s.telemetry[-1] if s.telemetry else None
        return {
            "type": "state",
            "t": s.tick_index,
            "theta": [float(v) for v in s.plant.theta],
            "theta_pred": [float(v) for v in normalized_to_rad(s._theta_pred_n)],
            "e_tilde": [float(v) for v in s.e_tilde],
            "pred_err": tel["e_window"] if tel else 0.0,
            "kld": [tel["r_l1"], tel["r_l2"]] if tel else [0.0, 0.0],
            "w_i": s.icfg.w,
            "pattern": self.pattern,
        }


def _classify_recent(session: InteractionSession) -> str:
    rows = [r["theta_obs"] for r in session.telemetry[-CYCLE_STEPS:]
            if "theta_obs" in r]
    if len(rows) < CYCLE_STEPS:
        return "?"
    label, conf = classify_pattern(np.array(rows))
    return label if conf > 0.1 else "?"


async def control_loop(state: ServerState, n_ticks: int | None = None) -> None:
    """Timing master: one plant tick per 100 ms, inference in a worker."""
    loop = asyncio.get_running_loop()
    session = state.session
    pool = ThreadPoolExecutor(max_workers=1)
    pending: asyncio.Future | None = None
    pending_t0 = 0.0
    deadline = loop.time()
    done_ticks = 0
    try:
        while not state.stopping.is_set():
            if n_ticks is not None and done_ticks >= n_ticks:
                state.stopping.set()
                break
            obs = session.observe()
            infer_s = 0.0
            if pending is None:
                pending_t0 = time.perf_counter()
                pending = loop.run_in_executor(pool, infer_step,
                                               session.window, obs)
            elif pending.done():
                session.apply_diagnostics(pending.result())
                infer_s = time.perf_counter() - pending_t0
                pending_t0 = time.perf_counter()
                pending = loop.run_in_executor(pool, infer_step,
                                               session.window, obs)
            else:
                session.lag += 1
            session.plant_tick(obs, infer_s=infer_s)
            done_ticks += 1
            deadline += 0.1
            delay = deadline - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            else:
                deadline = loop.time()  # fell behind: reset the schedule
                await asyncio.sleep(0)
    finally:
        if pending is not None:
            pending.cancel()
        pool.shutdown(wait=False, cancel_futures=True)
        state.stopping.set()


async def broadcast_loop(state: ServerState) -> None:
    """Fan the latest state out at 20 Hz; slow sockets drop frames."""
    while not state.stopping.is_set():
        state.pattern = _classify_recent(state.session)
        if state.clients:
            message = json.dumps(state.state_message())
            for ws in list(state.clients):
                try:
                    await asyncio.wait_for(ws.send(message), timeout=0.04)
                except (asyncio.TimeoutError, websockets.ConnectionClosed):
                    pass
        await asyncio.sleep(0.05)


def apply_client_message(state: ServerState, msg: dict) -> dict | None:
    """Apply one control input; returns an error reply for bad input."""
    session = state.session
    kind = msg.get("type")
    if kind == "force":
        session.set_force(int(msg["joint"]), float(msg["value"]))
    elif kind == "grab":
        session.set_grab(int(msg["joint"]), float(msg["angle"]))
    elif kind == "release":
        session.release(int(msg["joint"]))
    elif kind == "set_w":
        session.set_w(float(msg["value"]))
    else:
        return {"type": "error", "message": f"unknown message type {kind!r}"}
    return None


async def client_handler(state: ServerState, ws) -> None:
    state.clients.add(ws)
    allowance = float(MAX_CLIENT_MSGS_PER_S)
    last = time.monotonic()
    try:
        async for raw in ws:
            now = time.monotonic()
            allowance = min(MAX_CLIENT_MSGS_PER_S,
                            allowance + (now - last) * MAX_CLIENT_MSGS_PER_S)
            last = now
            if allowance < 1.0:
                continue  # flooding: drop silently
            allowance -= 1.0
            try:
                msg = json.loads(raw)
                if not isinstance(msg, dict):
                    raise ValueError("message must be an object")
            except (json.JSONDecodeError, ValueError) as exc:
                await ws.send(json.dumps({"type": "error",
                                          "message": f"bad message: {exc}"}))
                continue
            try:
                reply = apply_client_message(state, msg)
            except (KeyError, TypeError, ValueError, IndexError) as exc:
                reply = {"type": "error", "message": f"bad field: {exc}"}
            if reply is not None:
                await ws.send(json.dumps(reply))
    except websockets.ConnectionClosed:
        pass
    finally:
        state.clients.discard(ws)


async def serve(session: InteractionSession, host: str = "127.0.0.1",
                port: int = 8765, n_ticks: int | None = None) -> ServerState:
    """Run the service until the control loop finishes (n_ticks) or forever."""
    state = ServerState(session)

    async def handler(ws):
        await client_handler(state, ws)

    async with websockets.serve(handler, host, port) as server:
        state.port = server.sockets[0].getsockname()[1] if server.sockets else port
        control = asyncio.create_task(control_loop(state, n_ticks))
        broadcast = asyncio.create_task(broadcast_loop(state))
        await control
        state.stopping.set()
        await broadcast
    return state


def run_server(session: InteractionSession, host: str = "127.0.0.1",
               port: int = 8765, n_ticks: int | None = None) -> ServerState:
    return asyncio.run(serve(session, host, port, n_ticks))
