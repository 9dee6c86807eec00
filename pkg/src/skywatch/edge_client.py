"""Live edge process: scenario-driven frames over real WebSockets.

Pipeline stages (capture -> detect -> gate/encode -> send) run as separate
tasks joined by small bounded queues with drop-oldest overflow; the gate is
touched only by the coordinator task. Control and video travel on separate
connections, mirroring the simulated topology. On transport loss the client
reconnects with exponential backoff and the gate resets to Idle.
"""

from __future__ import annotations

import asyncio
import logging
import time

from .edge import (
    DetectorModel,
    EdgeConfig,
    EdgeNode,
    Emit,
    EncodeJob,
    EncoderModel,
    FrameSource,
)
from .protocol import MsgType, decode_envelope, encode_envelope
from .scenario import Scenario

logger = logging.getLogger(__name__)

QUEUE_CAP = 4
MAX_BACKOFF_S = 30.0


class DropOldestQueue(asyncio.Queue):
    def put_drop_oldest(self, item) -> None:
        while True:
            try:
                self.put_nowait(item)
                return
            except asyncio.QueueFull:
                try:
                    self.get_nowait()
                except asyncio.QueueEmpty:
                    pass


def _now_ms() -> float:
    return time.time() * 1000.0


class EdgeClient:
    def __init__(self, server_url: str, scenario: Scenario, drone_id: str,
                 token: str, preset: str, seed: int, realtime: bool = False):
        spec = None
        for espec in scenario.edges:
            if espec.drone_id == drone_id:
                spec = espec
                break
        if spec is None:
            spec = scenario.edges[0]
        self.server_url = server_url.rstrip("/")
        self.spec = spec
        self.realtime = realtime
        self.node = EdgeNode(
            config=EdgeConfig(
                drone_id=drone_id,
                token=token,
                preset=preset,
                seed=seed,
                stream_timeout_ms=spec.stream_timeout_ms,
                refresh_upload_interval_ms=spec.refresh_upload_interval_ms,
                upload_image_bytes=spec.upload_image_bytes,
            ),
            detector=DetectorModel(
                latency_range_ms=spec.detector.latency_range_ms,
                precision=spec.detector.precision,
                recall=spec.detector.recall,
                rng_seed=seed,
                tp_confidence=spec.detector.tp_confidence,
                fp_confidence=spec.detector.fp_confidence,
            ),
            encoder=EncoderModel(preset=preset),
        )
        self.source = FrameSource(
            objects=spec.objects,
            frame_period_ms=spec.source.frame_period_ms,
            resolution_profile=spec.source.resolution_profile,
            pipeline_delay_ms=spec.source.pipeline_delay_ms,
        )
        self._start_ms = 0.0

    async def run(self) -> None:
        """Service loop: handshake, pipeline, reconnect on loss."""
        backoff = 0.5
        while True:
            try:
                await self._run_session()
                backoff = 0.5
            except PermissionError:
                raise  # auth rejection is fatal
            except (OSError, asyncio.TimeoutError) as exc:
                logger.warning("transport error: %s; reconnecting in %.1fs", exc, backoff)
            except _ConnectionLost as exc:
                logger.warning("connection lost: %s; reconnecting in %.1fs", exc, backoff)
            self.node.on_disconnect(_now_ms())
            await asyncio.sleep(backoff)
            backoff = min(backoff * 2, MAX_BACKOFF_S)

    async def _run_session(self) -> None:
        import websockets

        url = self.server_url + "/edge"
        async with websockets.connect(url, max_size=16 * 1024 * 1024) as ctrl_ws, \
                websockets.connect(url, max_size=16 * 1024 * 1024) as video_ws:
            self._start_ms = _now_ms()
            events: DropOldestQueue = DropOldestQueue(maxsize=64)
            detect_q: DropOldestQueue = DropOldestQueue(maxsize=QUEUE_CAP)
            encode_q: DropOldestQueue = DropOldestQueue(maxsize=QUEUE_CAP)
            out_ctrl: asyncio.Queue = asyncio.Queue()
            out_video: DropOldestQueue = DropOldestQueue(maxsize=QUEUE_CAP)

            await ctrl_ws.send(encode_envelope(
                self.node.hello(_now_ms(), "control").env).decode())
            await video_ws.send(encode_envelope(
                self.node.hello(_now_ms(), "video").env).decode())

            async def capture_task() -> None:
                period_s = self.source.frame_period_ms / 1000.0
                while True:
                    elapsed = _now_ms() - self._start_ms
                    frame = self.source.frame_at(int(elapsed))
                    detect_q.put_drop_oldest(frame)
                    await asyncio.sleep(period_s)

            async def detect_task() -> None:
                while True:
                    frame = await detect_q.get()
                    detections, latency = self.node.detector.detect(frame)
                    if self.realtime:
                        await asyncio.sleep(latency / 1000.0)
                    events.put_drop_oldest(("frame", frame, detections))

            async def encode_task() -> None:
                while True:
                    job: EncodeJob = await encode_q.get()
                    if self.realtime:
                        await asyncio.sleep(job.encoded.encode_time_ms / 1000.0)
                    events.put_drop_oldest(("encode_done", job.encoded))

            async def tick_task() -> None:
                while True:
                    await asyncio.sleep(0.1)
                    events.put_drop_oldest(("tick",))

            async def recv_task(ws, channel: str) -> None:
                while True:
                    try:
                        data = await ws.recv()
                    except websockets.ConnectionClosed as exc:
                        events.put_drop_oldest(("lost", channel, str(exc)))
                        return
                    try:
                        env = decode_envelope(data if isinstance(data, bytes)
                                              else data.encode())
                    except Exception as exc:
                        logger.warning("undecodable server message: %s", exc)
                        continue
                    events.put_drop_oldest(("message", env, channel))

            async def send_task(ws, queue: asyncio.Queue) -> None:
                while True:
                    env = await queue.get()
                    try:
                        await ws.send(encode_envelope(env).decode())
                    except websockets.ConnectionClosed as exc:
                        events.put_drop_oldest(("lost", "send", str(exc)))
                        return

            def dispatch(effects) -> None:
                for eff in effects:
                    if isinstance(eff, Emit):
                        if eff.channel == "video":
                            out_video.put_drop_oldest(eff.env)
                        else:
                            out_ctrl.put_nowait(eff.env)
                    elif isinstance(eff, EncodeJob):
                        encode_q.put_drop_oldest(eff)

            workers = [
                asyncio.create_task(t) for t in (
                    capture_task(), detect_task(), encode_task(), tick_task(),
                    recv_task(ctrl_ws, "control"), recv_task(video_ws, "video"),
                    send_task(ctrl_ws, out_ctrl), send_task(video_ws, out_video),
                )
            ]
            try:
                # Coordinator: the only task that touches the gate.
                while True:
                    item = await events.get()
                    now = _now_ms()
                    kind = item[0]
                    if kind == "frame":
                        _, frame, detections = item
                        if self.node.authenticated:
                            dispatch(self.node.on_frame(frame, detections, now))
                    elif kind == "encode_done":
                        emit = self.node.on_encode_done(item[1], now)
                        if emit is not None:
                            out_video.put_drop_oldest(emit.env)
                    elif kind == "message":
                        _, env, channel = item
                        dispatch(self.node.on_message(env, now, channel))
                        if env.msg_type is MsgType.ANALYSIS:
                            logger.info("analysis: %s",
                                        str(env.payload.get("text", ""))[:100])
                    elif kind == "tick":
                        dispatch(self.node.on_tick(now))
                    elif kind == "lost":
                        raise _ConnectionLost(item[2])
            finally:
                for worker in workers:
                    worker.cancel()
                await asyncio.gather(*workers, return_exceptions=True)


class _ConnectionLost(Exception):
    pass


async def run_edge(server_url: str, scenario: Scenario, drone_id: str, token: str,
                   preset: str = "ultrafast", seed: int = 0,
                   realtime: bool = False) -> None:
    client = EdgeClient(server_url, scenario, drone_id, token, preset, seed, realtime)
    await client.run()
