"""Live server: WebSocket endpoints /edge, /consume, /dashboard and
GET /status, all backed by the same hub logic the simulation uses.

Configuration comes from the environment (see docs/ops.md): listen address,
store path, provider selection, and provider latency override.
"""

from __future__ import annotations

import asyncio
import logging
import time
from contextlib import asynccontextmanager
from pathlib import Path

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse

from .domain import Drone, Mission, MissionStatus, Rule, Severity, User
from .hub import AnalysisJob, ServerHub, token_hash
from .objectstore import LocalDirObjectStore, MemoryObjectStore
from .protocol import DecodeError, decode_envelope, encode_envelope
from .providers import MockProvider, provider_from_env
from .store import TelemetryStore

logger = logging.getLogger(__name__)


def now_ms() -> float:
    return time.time() * 1000.0


def seed_demo_data(store: TelemetryStore) -> None:
    """Known demo entities for local runs: one mission, drone, operator, and
    a person rule."""
    if store.get_mission("m-demo") is not None:
        return
    store.create_mission(Mission(mission_id="m-demo", name="Demo mission",
                                 status=MissionStatus.ACTIVE))
    store.create_user(User(user_id="operator", display_name="Operator",
                           auth_token_hash=token_hash("operator-token"),
                           mission_ids=("m-demo",)))
    store.create_drone(Drone(drone_id="drone-1", secret_token="drone-secret",
                             label="demo drone", mission_id="m-demo"))
    store.upsert_rule(Rule(
        rule_id="r-person", mission_id="m-demo",
        target_classes=frozenset({"person"}), min_confidence=0.5,
        severity=Severity.CRITICAL,
        prompt_template="Describe the {class} (confidence {confidence}) and assess risk.",
    ))


class HubRuntime:
    """Owns the hub plus the asyncio plumbing: per-connection wake events and
    in-flight analysis tasks."""

    def __init__(self, hub: ServerHub):
        self.hub = hub
        self.wakes: dict[str, asyncio.Event] = {}
        self.analysis_tasks: set[asyncio.Task] = set()
        self._conn_counter = 0

    def new_conn_id(self, kind: str) -> str:
        self._conn_counter += 1
        return f"{kind}-{self._conn_counter}"

    def wake(self, conn_ids) -> None:
        for conn_id in conn_ids:
            event = self.wakes.get(conn_id)
            if event is not None:
                event.set()

    def apply_result(self, result) -> None:
        for job in result.jobs:
            task = asyncio.get_running_loop().create_task(self._run_analysis(job))
            self.analysis_tasks.add(task)
            task.add_done_callback(self.analysis_tasks.discard)
        self.wake(result.woken)

    async def _run_analysis(self, job: AnalysisJob) -> None:
        provider = self.hub.provider
        try:
            if isinstance(provider, MockProvider):
                await asyncio.sleep(job.latency_ms / 1000.0)
                analysis = provider.request(job.image_ref, job.prompt)
            else:
                analysis = await asyncio.get_running_loop().run_in_executor(
                    None, provider.request, job.image_ref, job.prompt
                )
        except Exception:
            logger.exception("analysis provider failed for %s", job.job_id)
            return
        result = self.hub.apply_analysis(job, analysis, now_ms())
        self.wake(result.woken)

    async def drain_analysis(self, timeout_s: float = 10.0) -> None:
        if self.analysis_tasks:
            await asyncio.wait(self.analysis_tasks, timeout=timeout_s)


def create_app(hub: ServerHub) -> FastAPI:
    runtime = HubRuntime(hub)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        # Graceful shutdown: finish analysis, stop streams, flush, close.
        await runtime.drain_analysis()
        result = hub.shutdown(now_ms())
        runtime.wake(result.woken)
        await asyncio.sleep(0.1)

    app = FastAPI(title="skywatch server", lifespan=lifespan)
    app.state.runtime = runtime

    @app.get("/status")
    async def status() -> JSONResponse:
        return JSONResponse(hub.status())

    async def _sender(ws: WebSocket, conn_id: str, wake: asyncio.Event) -> None:
        while True:
            await wake.wait()
            wake.clear()
            while True:
                env = hub.next_outbound(conn_id)
                if env is None:
                    break
                await ws.send_text(encode_envelope(env).decode())
            conn = hub.conns.get(conn_id)
            if conn is None:
                return
            if conn.close_after_flush and conn.outbox_size == 0:
                try:
                    await ws.close()
                finally:
                    return

    async def _serve_socket(ws: WebSocket, kind: str) -> None:
        await ws.accept()
        conn_id = runtime.new_conn_id(kind)
        hub.register(conn_id)
        wake = asyncio.Event()
        runtime.wakes[conn_id] = wake
        sender = asyncio.get_running_loop().create_task(_sender(ws, conn_id, wake))
        try:
            while True:
                message = await ws.receive()
                if message["type"] == "websocket.disconnect":
                    break
                data = message.get("text")
                if data is None:
                    data = message.get("bytes")
                if data is None:
                    continue
                try:
                    env = decode_envelope(data)
                except DecodeError as exc:
                    logger.warning("undecodable message on %s: %s", conn_id, exc)
                    continue
                result = hub.handle(conn_id, env, now_ms())
                runtime.apply_result(result)
        except WebSocketDisconnect:
            pass
        finally:
            result = hub.disconnect(conn_id, now_ms())
            runtime.wakes.pop(conn_id, None)
            runtime.wake(result.woken)
            wake.set()  # let the sender observe the missing connection and exit
            sender.cancel()
            try:
                await sender
            except (asyncio.CancelledError, Exception):
                pass

    @app.websocket("/edge")
    async def edge_socket(ws: WebSocket) -> None:
        await _serve_socket(ws, "edge")

    @app.websocket("/consume")
    async def consume_socket(ws: WebSocket) -> None:
        await _serve_socket(ws, "consume")

    @app.websocket("/dashboard")
    async def dashboard_socket(ws: WebSocket) -> None:
        await _serve_socket(ws, "dashboard")

    return app


def build_hub(store_path: str = ":memory:", blob_dir: str | None = None,
              provider=None, demo_seed: bool = False) -> ServerHub:
    store = TelemetryStore(store_path)
    if demo_seed:
        seed_demo_data(store)
    if blob_dir:
        object_store = LocalDirObjectStore(Path(blob_dir))
    else:
        object_store = MemoryObjectStore()
    hub = ServerHub(
        store=store,
        object_store=object_store,
        provider=provider if provider is not None else provider_from_env(),
    )
    return hub


def serve(host: str = "127.0.0.1", port: int = 8787, store_path: str = ":memory:",
          blob_dir: str | None = None, demo_seed: bool = False) -> None:
    import uvicorn

    hub = build_hub(store_path=store_path, blob_dir=blob_dir, demo_seed=demo_seed)
    app = create_app(hub)
    uvicorn.run(app, host=host, port=port, log_level="info")
