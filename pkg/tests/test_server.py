"""Websocket service: state broadcast, client inputs, protocol errors."""

import asyncio
import json

import numpy as np
import pytest
import websockets

from kinaero.inference import InferenceConfig
from kinaero.model import LayerConfig, NetworkConfig, NetworkParams
from kinaero.server import serve
from kinaero.session import InteractionSession, SessionConfig


def make_session(epochs=2) -> InteractionSession:
    cfg = NetworkConfig(layers=(LayerConfig(10, 2, 2.0), LayerConfig(6, 1, 4.0)),
                        output_dim=4, n_soft=10, w_train=0.01)
    params = NetworkParams(cfg, np.random.default_rng(3))
    return InteractionSession(params,
                              InferenceConfig(w=0.01, epochs=epochs, window=8,
                                              seed=1),
                              session_cfg=SessionConfig(seed=1))


async def wait_for_state(ws, predicate, max_messages=100):
    for _ in range(max_messages):
        msg = json.loads(await asyncio.wait_for(ws.recv(), timeout=5.0))
        if msg.get("type") == "state" and predicate(msg):
            return msg
    raise AssertionError("no state message satisfied the predicate")


def run(coro):
    return asyncio.run(coro)


def test_state_broadcast_and_inputs():
    async def scenario():
        session = make_session()
        got = {}

        async def service():
            got["state"] = await serve(session, host="127.0.0.1", port=18731,
                                       n_ticks=80)

        task = asyncio.create_task(service())
        await asyncio.sleep(0.8)
        async with websockets.connect("ws://127.0.0.1:18731") as ws:
            first = await wait_for_state(ws, lambda m: True)
            assert set(first) >= {"type", "t", "theta", "theta_pred", "e_tilde",
                                  "pred_err", "kld", "w_i", "pattern"}
            # force on joint 2 must show up in the excess estimate
            await ws.send(json.dumps({"type": "force", "joint": 2, "value": 0.6}))
            hit = await wait_for_state(ws, lambda m: m["e_tilde"][2] > 0.2)
            assert hit["e_tilde"][2] > 0.2
            await ws.send(json.dumps({"type": "force", "joint": 2, "value": 0.0}))
            # set_w reflected in subsequent states
            await ws.send(json.dumps({"type": "set_w", "value": 0.1}))
            hit = await wait_for_state(ws, lambda m: m["w_i"] == 0.1)
            assert hit["w_i"] == 0.1
            # malformed JSON gets an error reply and the connection survives
            await ws.send("this is not json")
            reply = json.loads(await asyncio.wait_for(ws.recv(), timeout=5.0))
            while reply.get("type") == "state":
                reply = json.loads(await asyncio.wait_for(ws.recv(), timeout=5.0))
            assert reply["type"] == "error"
            # unknown type likewise
            await ws.send(json.dumps({"type": "frobnicate"}))
            reply = json.loads(await asyncio.wait_for(ws.recv(), timeout=5.0))
            while reply.get("type") == "state":
                reply = json.loads(await asyncio.wait_for(ws.recv(), timeout=5.0))
            assert reply["type"] == "error"
            assert "frobnicate" in reply["message"]
            # still receiving states afterwards
            await wait_for_state(ws, lambda m: True)
        await task
        assert session.tick_index >= 80

    run(scenario())


def test_loop_runs_without_clients():
    async def scenario():
        session = make_session()
        state = await serve(session, host="127.0.0.1", port=18732, n_ticks=12)
        assert session.tick_index >= 12
        assert len(session.telemetry) >= 12
        assert state.port == 18732

    run(scenario())


def test_grab_and_release_roundtrip():
    async def scenario():
        session = make_session()

        async def service():
            await serve(session, host="127.0.0.1", port=18733, n_ticks=60)

        task = asyncio.create_task(service())
        await asyncio.sleep(0.8)
        async with websockets.connect("ws://127.0.0.1:18733") as ws:
            await ws.send(json.dumps({"type": "grab", "joint": 1, "angle": 0.5}))
            hit = await wait_for_state(ws, lambda m: abs(m["e_tilde"][1]) > 0.05)
            assert abs(hit["e_tilde"][1]) > 0.05
            await ws.send(json.dumps({"type": "release", "joint": 1}))
            await asyncio.sleep(0.3)
            assert 1 not in session.grabs
        await task

    run(scenario())
