"""Drone-side pipeline: scripted frame source, synthetic detector, software
encoder cost model, and the conditional-streaming gate.

All components are deterministic under a fixed seed and take time as an
argument, so the same code runs under the simulated clock and in wall-clock
demos.
"""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass, field, replace
from enum import Enum

from .protocol import (
    DetectionMsg,
    Envelope,
    MsgType,
    b64encode_bytes,
    detection_to_payload,
)

logger = logging.getLogger(__name__)

#: preset -> (achievable_fps, output_bitrate_bps or None, cpu_fraction)
ENCODER_PRESETS: dict[str, tuple[float, float | None, float]] = {
    "ultrafast": (0.5, 5_000_000.0, 0.99),
    "medium": (0.05, None, 0.99),
    "slow": (0.05, None, 0.99),
}

# 4K-frame reference size; equals ultrafast's bitrate/(8*fps) so the
# sustained ultrafast output is exactly 5 Mbps.
REFERENCE_FRAME_BYTES = 1_250_000

DEFAULT_STREAM_TIMEOUT_MS = 10_000
DEFAULT_UPLOAD_IMAGE_BYTES = 500_000


def derive_rng(master_seed: int, label: str) -> random.Random:
    """Independent child generator; stable across runs and platforms."""
    digest = hashlib.sha256(f"{master_seed}/{label}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def synthetic_bytes(label: str, size: int) -> bytes:
    """Deterministic filler: a seeded 64-byte block tiled to size, prefixed
    with a short text header so consumers can identify what they decoded."""
    header = f"skywatch:{label}\n".encode()
    if size <= len(header):
        return header[:size]
    block = derive_rng(0x5EED, label).randbytes(64)
    body_len = size - len(header)
    body = (block * (body_len // 64 + 1))[:body_len]
    return header + body


@dataclass(frozen=True)
class GroundTruthObject:
    class_label: str
    x: float
    y: float
    w: float
    h: float
    orientation_deg: float
    t_ms: int
    duration_ms: int = 0  # 0 = visible on a single frame

    def visible_at(self, t_ms: float) -> bool:
        return self.t_ms <= t_ms <= self.t_ms + self.duration_ms


@dataclass(frozen=True)
class Frame:
    frame_id: int
    capture_ts_ms: int
    objects: tuple[GroundTruthObject, ...]


@dataclass
class FrameSource:
    """Scripted stand-in for the 360 camera: emits frames on a fixed period
    carrying whatever ground-truth objects the scenario makes visible."""

    objects: list[GroundTruthObject]
    frame_period_ms: int = 200  # 5 FPS
    resolution_profile: str = "4k360"
    pipeline_delay_ms: int = 0  # camera-internal buffering before a frame is usable
    _next_id: int = field(default=0, repr=False)

    def __post_init__(self) -> None:
        if self.frame_period_ms <= 0:
            raise ValueError("frame_period_ms must be positive")

    def frame_at(self, capture_ts_ms: int) -> Frame:
        frame = Frame(
            frame_id=self._next_id,
            capture_ts_ms=capture_ts_ms,
            objects=tuple(o for o in self.objects if o.visible_at(capture_ts_ms)),
        )
        self._next_id += 1
        return frame


@dataclass
class DetectorModel:
    """Synthetic detector with configurable precision/recall statistics.

    Each ground-truth object is reported with probability ``recall`` (as an
    exact copy, confidence drawn from ``tp_confidence``); false positives are
    added so the long-run fraction of true reports converges to
    ``precision``.
    """

    latency_range_ms: tuple[float, float] = (200.0, 400.0)
    precision: float = 1.0
    recall: float = 1.0
    rng_seed: int = 0
    tp_confidence: tuple[float, float] = (0.6, 0.95)
    fp_confidence: tuple[float, float] = (0.3, 0.9)
    fp_classes: tuple[str, ...] = ("person", "vehicle", "animal")

    def __post_init__(self) -> None:
        lo, hi = self.latency_range_ms
        if lo > hi or lo < 0:
            raise ValueError(f"bad latency range [{lo}, {hi}]")
        if not (0.0 <= self.precision <= 1.0 and 0.0 <= self.recall <= 1.0):
            raise ValueError("precision and recall must lie in [0,1]")
        self._rng = derive_rng(self.rng_seed, "detector")

    def detect(self, frame: Frame) -> tuple[list[DetectionMsg], float]:
        rng = self._rng
        out: list[DetectionMsg] = []
        for obj in frame.objects:
            if rng.random() < self.recall:
                out.append(
                    DetectionMsg(
                        class_label=obj.class_label,
                        confidence=round(rng.uniform(*self.tp_confidence), 4),
                        x=obj.x, y=obj.y, w=obj.w, h=obj.h,
                        orientation_deg=obj.orientation_deg,
                    )
                )
                # E[false positives per true report] = (1-p)/p keeps the
                # pooled precision at p without ever emitting fractions.
                if self.precision < 1.0:
                    expected_fp = (1.0 - self.precision) / self.precision
                    n_fp = int(expected_fp)
                    if rng.random() < expected_fp - n_fp:
                        n_fp += 1
                    for _ in range(n_fp):
                        out.append(self._false_positive(rng))
        latency = rng.uniform(*self.latency_range_ms)
        return out, latency

    def _false_positive(self, rng: random.Random) -> DetectionMsg:
        w = rng.uniform(0.02, 0.3)
        h = rng.uniform(0.02, 0.3)
        return DetectionMsg(
            class_label=rng.choice(self.fp_classes),
            confidence=round(rng.uniform(*self.fp_confidence), 4),
            x=rng.uniform(w / 2, 1 - w / 2),
            y=rng.uniform(h / 2, 1 - h / 2),
            w=w, h=h,
            orientation_deg=rng.uniform(0, 359.99),
        )


@dataclass
class EncodedFrame:
    stream_id: str
    frame_seq: int
    capture_ts_ms: int
    encode_done_ms: float
    encode_time_ms: float
    payload: bytes


@dataclass
class EncoderModel:
    """Software H.264 encoder operating point (fps / bitrate / CPU).

    Admission is drop-newest: a frame offered while the previous admission
    window is still open is skipped outright.
    """

    preset: str = "ultrafast"

    def __post_init__(self) -> None:
        if self.preset not in ENCODER_PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        self.achievable_fps, self.output_bitrate_bps, self.cpu_fraction = ENCODER_PRESETS[self.preset]
        self._last_admit_ms: float | None = None
        self.frames_admitted = 0
        self.frames_skipped = 0

    @property
    def frame_payload_bytes(self) -> int:
        if self.output_bitrate_bps is not None:
            return int(self.output_bitrate_bps / (8 * self.achievable_fps))
        return REFERENCE_FRAME_BYTES

    @property
    def encode_time_ms(self) -> float:
        return 1000.0 / self.achievable_fps

    def offer(self, frame: Frame, stream_id: str, frame_seq: int, now_ms: float) -> EncodedFrame | None:
        """Admit or skip a frame; admitted frames carry deterministic
        synthetic content sized to the preset's per-frame byte budget."""
        min_gap = self.encode_time_ms
        if self._last_admit_ms is not None and now_ms - self._last_admit_ms < min_gap - 1e-9:
            self.frames_skipped += 1
            return None
        self._last_admit_ms = now_ms
        self.frames_admitted += 1
        payload = synthetic_bytes(f"{stream_id}/{frame_seq}", self.frame_payload_bytes)
        return EncodedFrame(
            stream_id=stream_id,
            frame_seq=frame_seq,
            capture_ts_ms=frame.capture_ts_ms,
            encode_done_ms=now_ms + self.encode_time_ms,
            encode_time_ms=self.encode_time_ms,
            payload=payload,
        )


class GateState(str, Enum):
    IDLE = "Idle"
    AWAITING_VERIFICATION = "AwaitingVerification"
    STREAMING = "Streaming"


class GateEvent(str, Enum):
    DETECTIONS_FOUND = "detections_found"
    DETECTIONS_EMPTY = "detections_empty"
    VERIFY_POSITIVE = "verify_positive"
    VERIFY_NEGATIVE = "verify_negative"
    TIMEOUT = "timeout"


class GateAction(str, Enum):
    UPLOAD_IMAGE = "upload_image"
    START_STREAM = "start_stream"
    STOP_STREAM = "stop_stream"


@dataclass(frozen=True)
class StreamGate:
    state: GateState = GateState.IDLE
    active_stream_id: str | None = None
    last_verified_ts_ms: float = 0.0
    stream_timeout_ms: float = DEFAULT_STREAM_TIMEOUT_MS
    streams_started: int = 0


def step_gate(
    g: StreamGate, event: GateEvent, now_ms: float, drone_id: str = "edge"
) -> tuple[StreamGate, list[GateAction]]:
    """Total transition function of the conditional-streaming state machine.

    Any (state, event) pair not listed below is a no-op self-transition.
    The TIMEOUT event is fired by the caller once
    now - last_verified exceeds the configured stream timeout.
    """
    if g.state is GateState.IDLE and event is GateEvent.DETECTIONS_FOUND:
        return replace(g, state=GateState.AWAITING_VERIFICATION), [GateAction.UPLOAD_IMAGE]
    if g.state is GateState.AWAITING_VERIFICATION and event is GateEvent.VERIFY_POSITIVE:
        stream_id = f"{drone_id}-stream-{g.streams_started + 1:04d}"
        nxt = replace(
            g,
            state=GateState.STREAMING,
            active_stream_id=stream_id,
            last_verified_ts_ms=now_ms,
            streams_started=g.streams_started + 1,
        )
        return nxt, [GateAction.START_STREAM]
    if g.state is GateState.AWAITING_VERIFICATION and event is GateEvent.VERIFY_NEGATIVE:
        return replace(g, state=GateState.IDLE), []
    if g.state is GateState.STREAMING and event is GateEvent.VERIFY_POSITIVE:
        return replace(g, last_verified_ts_ms=now_ms), []
    if g.state is GateState.STREAMING and event is GateEvent.TIMEOUT:
        return (
            replace(g, state=GateState.IDLE, active_stream_id=None),
            [GateAction.STOP_STREAM],
        )
    return g, []


# -- edge node core -----------------------------------------------------------


@dataclass
class EdgeConfig:
    drone_id: str = "drone-1"
    token: str = ""
    preset: str = "ultrafast"
    seed: int = 0
    stream_timeout_ms: float = DEFAULT_STREAM_TIMEOUT_MS
    upload_image_bytes: int = DEFAULT_UPLOAD_IMAGE_BYTES
    #: minimum spacing between refresh uploads while streaming; keeps the
    #: verification window alive as long as objects stay in view
    refresh_upload_interval_ms: float = 2_000.0
    metrics_interval_ms: float = 1_000.0
    detect_cpu_fraction: float = 0.55


@dataclass
class Emit:
    """Outbound envelope plus the logical channel it leaves on."""

    env: Envelope
    channel: str  # "control" | "video"


@dataclass
class EncodeJob:
    """A frame admitted to the encoder; the driver calls
    EdgeNode.on_encode_done at ``done_ms``."""

    encoded: EncodedFrame
    done_ms: float


class EdgeNode:
    """Sans-IO edge node: callers feed frames, messages, and ticks; the node
    returns envelopes to send. A driver (simulation or asyncio client) owns
    all actual I/O and timing."""

    def __init__(self, config: EdgeConfig, detector: DetectorModel, encoder: EncoderModel):
        self.config = config
        self.detector = detector
        self.encoder = encoder
        self.gate = StreamGate(stream_timeout_ms=config.stream_timeout_ms)
        # The control and video paths are separate connections (the video
        # feed has its own socket), so each carries its own seq space.
        self._seq = {"control": 0, "video": 0}
        self._frame_seq = 0
        self._last_upload_ms: float | None = None
        self._last_metrics_ms: float | None = None
        self._pending_upload: dict | None = None
        self.authenticated = False
        self.uploads_sent = 0
        self.frames_sent = 0
        self.gate_log: list[tuple[float, str, str]] = []  # (t, state, event)

    # -- envelope plumbing ---------------------------------------------------

    def _envelope(self, msg_type: MsgType, payload: dict, now_ms: float,
                  channel: str = "control") -> Envelope:
        self._seq[channel] += 1
        return Envelope(
            msg_type=msg_type,
            sender_id=self.config.drone_id,
            seq=self._seq[channel],
            timestamp_ms=int(now_ms),
            payload=payload,
        )

    def hello(self, now_ms: float, channel: str = "control") -> Emit:
        return Emit(
            self._envelope(
                MsgType.HELLO, {"role": "edge", "token": self.config.token},
                now_ms, channel,
            ),
            channel,
        )

    # -- inputs ---------------------------------------------------------------

    def on_message(self, env: Envelope, now_ms: float, channel: str = "control") -> list[Emit]:
        if env.msg_type is MsgType.HELLO_ACK:
            if not env.payload.get("ok", False):
                raise PermissionError(
                    f"server rejected handshake: {env.payload.get('error', 'unknown')}"
                )
            if channel == "control":
                self.authenticated = True
            return []
        if env.msg_type is MsgType.VERIFY_RESULT:
            event = (
                GateEvent.VERIFY_POSITIVE
                if env.payload.get("verified")
                else GateEvent.VERIFY_NEGATIVE
            )
            return self._step(event, now_ms)
        if env.msg_type is MsgType.ANALYSIS:
            logger.info("analysis for %s: %s", env.payload.get("detection_id"),
                        str(env.payload.get("text", ""))[:80])
            return []
        return []

    def on_frame(
        self, frame: Frame, detections: list[DetectionMsg], now_ms: float
    ) -> list[Emit | EncodeJob]:
        """Gate step for a detected frame; emits uploads and (while
        streaming) offers the frame to the encoder."""
        out: list[Emit | EncodeJob] = []
        event = GateEvent.DETECTIONS_FOUND if detections else GateEvent.DETECTIONS_EMPTY
        if detections:
            self._pending_upload = {
                "detections": detections,
                "capture_ts_ms": frame.capture_ts_ms,
            }
        out.extend(self._step(event, now_ms))
        # Refresh uploads are loop policy, not a gate transition: while
        # streaming, periodically re-submit evidence so the server keeps the
        # verification window open.
        if (
            self.gate.state is GateState.STREAMING
            and detections
            and self._last_upload_ms is not None
            and now_ms - self._last_upload_ms >= self.config.refresh_upload_interval_ms
        ):
            out.append(self._make_upload(now_ms))
        if self.gate.state is GateState.STREAMING:
            job = self._offer_to_encoder(frame, now_ms)
            if job is not None:
                out.append(job)
        return out

    def on_encode_done(self, encoded: EncodedFrame, now_ms: float) -> Emit | None:
        """Encode finished; send the frame only if its stream is still open
        (a stream closed mid-encode discards the frame)."""
        if (
            self.gate.state is not GateState.STREAMING
            or self.gate.active_stream_id != encoded.stream_id
        ):
            self.encoder.frames_skipped += 1
            return None
        self.frames_sent += 1
        payload = {
            "stream_id": encoded.stream_id,
            "frame_seq": encoded.frame_seq,
            "frame_data": b64encode_bytes(encoded.payload),
            "encode_ts_ms": int(now_ms),
            "capture_ts_ms": encoded.capture_ts_ms,
        }
        return Emit(self._envelope(MsgType.VIDEO_FRAME, payload, now_ms, "video"), "video")

    def on_tick(self, now_ms: float) -> list[Emit]:
        if not self.authenticated:
            return []
        out: list[Emit] = []
        if (
            self.gate.state is GateState.STREAMING
            and now_ms - self.gate.last_verified_ts_ms > self.gate.stream_timeout_ms
        ):
            out.extend(self._step(GateEvent.TIMEOUT, now_ms))
        if (
            self._last_metrics_ms is None
            or now_ms - self._last_metrics_ms >= self.config.metrics_interval_ms
        ):
            self._last_metrics_ms = now_ms
            out.append(Emit(self._envelope(
                MsgType.METRICS_SNAPSHOT, self.metrics(now_ms), now_ms), "control"))
        return out

    def on_disconnect(self, now_ms: float) -> None:
        """Transport loss: gate resets to Idle; the server closes any active
        stream on its side."""
        if self.gate.state is not GateState.IDLE:
            self.gate_log.append((now_ms, GateState.IDLE.value, "disconnect"))
        self.gate = replace(
            self.gate, state=GateState.IDLE, active_stream_id=None
        )
        self.authenticated = False
        self._pending_upload = None
        self._seq = {"control": 0, "video": 0}  # fresh connection, fresh seq space

    # -- internals -------------------------------------------------------------

    def _step(self, event: GateEvent, now_ms: float) -> list[Emit]:
        before = self.gate.state
        self.gate, actions = step_gate(self.gate, event, now_ms, self.config.drone_id)
        if self.gate.state is not before:
            self.gate_log.append((now_ms, self.gate.state.value, event.value))
        out: list[Emit] = []
        for action in actions:
            if action is GateAction.UPLOAD_IMAGE:
                out.append(self._make_upload(now_ms))
            elif action is GateAction.START_STREAM:
                self._frame_seq = 0
                out.append(Emit(self._envelope(
                    MsgType.STREAM_START, {"stream_id": self.gate.active_stream_id}, now_ms
                ), "control"))
            elif action is GateAction.STOP_STREAM:
                out.append(Emit(self._envelope(
                    MsgType.STREAM_STOP, {"stream_id": self._last_stream_id()}, now_ms
                ), "control"))
        return out

    def _last_stream_id(self) -> str:
        return f"{self.config.drone_id}-stream-{self.gate.streams_started:04d}"

    def _make_upload(self, now_ms: float) -> Emit:
        pending = self._pending_upload or {"detections": [], "capture_ts_ms": int(now_ms)}
        image = synthetic_bytes(
            f"upload/{self.config.drone_id}/{self.uploads_sent}", self.config.upload_image_bytes
        )
        payload = {
            "image_data": b64encode_bytes(image),
            "detections": [detection_to_payload(d) for d in pending["detections"]],
            "capture_ts_ms": pending["capture_ts_ms"],
        }
        self.uploads_sent += 1
        self._last_upload_ms = now_ms
        return Emit(self._envelope(MsgType.IMAGE_UPLOAD, payload, now_ms), "control")

    def _offer_to_encoder(self, frame: Frame, now_ms: float) -> EncodeJob | None:
        stream_id = self.gate.active_stream_id
        assert stream_id is not None
        encoded = self.encoder.offer(frame, stream_id, self._frame_seq + 1, now_ms)
        if encoded is None:
            return None
        self._frame_seq += 1
        return EncodeJob(encoded=encoded, done_ms=encoded.encode_done_ms)

    def metrics(self, now_ms: float) -> dict:
        streaming = self.gate.state is GateState.STREAMING
        return {
            "gate_state": self.gate.state.value,
            "cpu_fraction": self.encoder.cpu_fraction if streaming else self.config.detect_cpu_fraction,
            "preset": self.encoder.preset,
            "frames_admitted": self.encoder.frames_admitted,
            "frames_skipped": self.encoder.frames_skipped,
            "uploads_sent": self.uploads_sent,
        }
