"""Headless stream consumer: the stand-in for the VR headset.

Subscribes to streams and alerts, validates frame ordering, and records a
display log from which glass-to-glass latency is measured. The sans-IO
``ConsumerState`` is shared by the simulation and the live CLI client.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import signal
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from .protocol import Envelope, MsgType, SeqTracker, b64decode_field, decode_envelope

logger = logging.getLogger(__name__)


@dataclass
class FrameRecord:
    stream_id: str
    frame_seq: int
    encode_ts_ms: int
    capture_ts_ms: int
    receive_ts_ms: float
    display_ts_ms: float
    decoded_size: int
    sha256: str

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "frame",
            "stream_id": self.stream_id,
            "frame_seq": self.frame_seq,
            "encode_ts_ms": self.encode_ts_ms,
            "capture_ts_ms": self.capture_ts_ms,
            "receive_ts_ms": round(self.receive_ts_ms, 3),
            "display_ts_ms": round(self.display_ts_ms, 3),
            "decoded_size": self.decoded_size,
            "sha256": self.sha256,
        }


@dataclass
class ConsumerState:
    consumer_id: str
    display_delay_ms: float = 0.0
    stream_filter: set[str] | None = None
    on_record: Callable[[dict], None] | None = None

    inbound: SeqTracker = field(default_factory=SeqTracker)
    last_seq: dict[str, int] = field(default_factory=dict)
    active_streams: set[str] = field(default_factory=set)
    frames: list[FrameRecord] = field(default_factory=list)
    alerts: list[dict] = field(default_factory=list)
    discarded: int = 0
    decode_failures: int = 0

    def _log(self, doc: dict) -> None:
        if self.on_record is not None:
            self.on_record(doc)

    def wants(self, stream_id: str) -> bool:
        return self.stream_filter is None or stream_id in self.stream_filter

    def on_envelope(self, env: Envelope, now_ms: float) -> None:
        if not self.inbound.accept(env):
            self.discarded += 1
            return
        if env.msg_type is MsgType.VIDEO_FRAME:
            self._on_frame(env.payload, now_ms)
        elif env.msg_type is MsgType.STREAM_START:
            sid = env.payload["stream_id"]
            if self.wants(sid):
                self.active_streams.add(sid)
                self._log({"kind": "stream_start", "stream_id": sid, "t": now_ms})
        elif env.msg_type is MsgType.STREAM_STOP:
            sid = env.payload["stream_id"]
            self.active_streams.discard(sid)
            self._log({"kind": "stream_stop", "stream_id": sid, "t": now_ms})
        elif env.msg_type is MsgType.ALERT_EVENT:
            alert = env.payload.get("alert", {})
            self.alerts.append(alert)
            self._log({"kind": "alert", "t": now_ms,
                       "alert_id": alert.get("alert_id"),
                       "severity": alert.get("severity"),
                       "status": alert.get("status")})
        elif env.msg_type is MsgType.ANALYSIS:
            self._log({"kind": "analysis", "t": now_ms,
                       "detection_id": env.payload.get("detection_id")})

    def _on_frame(self, payload: dict, now_ms: float) -> None:
        stream_id = payload["stream_id"]
        seq = payload["frame_seq"]
        if not self.wants(stream_id):
            return
        last = self.last_seq.get(stream_id, 0)
        if seq <= last:
            self.discarded += 1
            logger.warning("out-of-order frame %s/%d after %d discarded",
                           stream_id, seq, last)
            self._log({"kind": "frame_discarded", "stream_id": stream_id,
                       "frame_seq": seq, "t": now_ms})
            return
        try:
            raw = b64decode_field(payload["frame_data"], "frame_data")
        except Exception as exc:
            self.decode_failures += 1
            logger.warning("frame decode failure on %s/%d: %s", stream_id, seq, exc)
            return
        self.last_seq[stream_id] = seq
        rec = FrameRecord(
            stream_id=stream_id,
            frame_seq=seq,
            encode_ts_ms=payload["encode_ts_ms"],
            capture_ts_ms=payload["capture_ts_ms"],
            receive_ts_ms=now_ms,
            display_ts_ms=now_ms + self.display_delay_ms,
            decoded_size=len(raw),
            sha256=hashlib.sha256(raw).hexdigest(),
        )
        self.frames.append(rec)
        self._log(rec.to_doc())

    def glass_to_glass_ms(self) -> list[float]:
        return [f.receive_ts_ms - f.capture_ts_ms for f in self.frames]


async def run_consumer(server_url: str, token: str, log_path: str | None = None,
                       display_delay_ms: float = 0.0,
                       streams: list[str] | None = None,
                       consumer_id: str = "consumer-1",
                       exit_on_stream_stop: bool = True) -> ConsumerState:
    """Live client: connect, subscribe, log frames until STREAM_STOP or
    a signal."""
    import websockets

    log_fh = open(log_path, "w") if log_path else None

    def write_record(doc: dict) -> None:
        if log_fh is not None:
            log_fh.write(json.dumps(doc, sort_keys=True) + "\n")
            log_fh.flush()

    state = ConsumerState(
        consumer_id=consumer_id,
        display_delay_ms=display_delay_ms,
        stream_filter=set(streams) if streams else None,
        on_record=write_record,
    )
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass

    url = server_url.rstrip("/") + "/consume"
    seq = 0
    saw_stream = False
    try:
        async with websockets.connect(url, max_size=16 * 1024 * 1024) as ws:
            seq += 1
            hello = Envelope(
                msg_type=MsgType.HELLO, sender_id=consumer_id, seq=seq,
                timestamp_ms=int(time.time() * 1000),
                payload={"role": "consumer", "token": token,
                         **({"streams": streams} if streams else {})},
            )
            from .protocol import encode_envelope
            await ws.send(encode_envelope(hello).decode())
            while not stop.is_set():
                recv = asyncio.create_task(ws.recv())
                stopped = asyncio.create_task(stop.wait())
                done, pending = await asyncio.wait(
                    {recv, stopped}, return_when=asyncio.FIRST_COMPLETED
                )
                for task in pending:
                    task.cancel()
                if stopped in done and recv not in done:
                    break
                try:
                    data = recv.result()
                except websockets.ConnectionClosed:
                    break
                now_ms = time.time() * 1000
                try:
                    env = decode_envelope(data if isinstance(data, bytes) else data.encode())
                except Exception as exc:
                    state.decode_failures += 1
                    logger.warning("undecodable message: %s", exc)
                    continue
                if env.msg_type is MsgType.HELLO_ACK and not env.payload.get("ok", False):
                    raise PermissionError(f"server rejected: {env.payload.get('error')}")
                if env.msg_type is MsgType.STREAM_START:
                    saw_stream = True
                state.on_envelope(env, now_ms)
                if (exit_on_stream_stop and saw_stream and not state.active_streams
                        and env.msg_type is MsgType.STREAM_STOP):
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    return state
