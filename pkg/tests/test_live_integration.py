"""Wall-clock integration: real uvicorn server, the edge client pipeline,
and a consumer over actual WebSockets."""

import asyncio
import socket
import threading
import time

import pytest
import uvicorn

from skywatch.consumer import run_consumer
from skywatch.edge_client import run_edge
from skywatch.hub import ServerHub
from skywatch.objectstore import MemoryObjectStore
from skywatch.providers import MockProvider
from skywatch.scenario import parse_scenario
from skywatch.store import TelemetryStore
from skywatch.webserver import create_app, seed_demo_data


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture
def live_server():
    store = TelemetryStore(":memory:")
    seed_demo_data(store)
    hub = ServerHub(store, MemoryObjectStore(), MockProvider(latency_ms=100.0))
    app = create_app(hub)
    port = free_port()
    config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("uvicorn did not start")
        time.sleep(0.02)
    yield f"ws://127.0.0.1:{port}", hub
    server.should_exit = True
    thread.join(timeout=5)


def fast_scenario():
    return parse_scenario({
        "schema": 1,
        "duration_ms": 60_000,
        "mission": {"mission_id": "m-demo"},
        "drone": {
            "drone_id": "drone-1", "token": "drone-secret",
            "objects": [{"t_ms": 0, "class": "person", "x": 0.5, "y": 0.5,
                         "w": 0.1, "h": 0.2, "duration_ms": 60_000}],
        },
        "source": {"frame_period_ms": 100},
        "detector": {"latency_range_ms": [5, 10], "precision": 1.0,
                     "recall": 1.0, "tp_confidence": [0.9, 0.9]},
        "edge": {"refresh_upload_interval_ms": 1_000},
    })


def test_edge_to_consumer_over_real_sockets(live_server):
    url, hub = live_server
    scenario = fast_scenario()

    async def drive():
        consumer_task = asyncio.create_task(run_consumer(
            url, "operator-token", consumer_id="vr-live",
            exit_on_stream_stop=False,
        ))
        edge_task = asyncio.create_task(run_edge(
            url, scenario, "drone-1", "drone-secret", seed=3,
        ))
        try:
            deadline = asyncio.get_running_loop().time() + 25
            while asyncio.get_running_loop().time() < deadline:
                await asyncio.sleep(0.2)
                done = [t for t in (consumer_task, edge_task) if t.done()]
                for t in done:  # surface crashes early
                    t.result()
                status = hub.status()
                if (status["counters"]["frames_relayed"] >= 1
                        and status["counters"]["alerts_created"] >= 1):
                    break
            else:
                raise AssertionError(f"pipeline never streamed: {hub.status()}")
        finally:
            consumer_task.cancel()
            edge_task.cancel()
            await asyncio.gather(consumer_task, edge_task, return_exceptions=True)

    asyncio.run(drive())
    status = hub.status()
    assert status["counters"]["uploads"] >= 1
    assert status["counters"]["alerts_created"] >= 1
    assert status["counters"]["frames_relayed"] >= 1
    # detections persisted with clean references
    assert hub.store.integrity_sweep().clean
    # analysis text landed on at least one alert
    assert any(a.analysis_text for a in hub.store.list_alerts())


def test_edge_auth_rejection_is_fatal(live_server):
    url, hub = live_server
    scenario = fast_scenario()

    async def drive():
        with pytest.raises(PermissionError):
            await asyncio.wait_for(
                run_edge(url, scenario, "drone-1", "wrong-token", seed=1),
                timeout=10,
            )

    asyncio.run(drive())
