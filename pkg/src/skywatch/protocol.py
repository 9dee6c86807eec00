"""Wire protocol: envelope framing, message payloads, and the JSON codec.

One envelope per WebSocket text message. Binary content (images, encoded
video frames) travels as base64 fields inside the payload. The codec is
canonical: encoding a decoded envelope reproduces the original bytes.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

logger = logging.getLogger(__name__)

__all__ = [
    "MsgType",
    "Envelope",
    "DetectionMsg",
    "ImageUpload",
    "VideoFrameMsg",
    "ProtocolError",
    "EncodeError",
    "DecodeError",
    "encode_envelope",
    "decode_envelope",
    "b64encode_bytes",
    "b64decode_field",
    "SeqTracker",
]


class MsgType(str, Enum):
    HELLO = "HELLO"
    HELLO_ACK = "HELLO_ACK"
    IMAGE_UPLOAD = "IMAGE_UPLOAD"
    VERIFY_RESULT = "VERIFY_RESULT"
    ANALYSIS = "ANALYSIS"
    STREAM_START = "STREAM_START"
    VIDEO_FRAME = "VIDEO_FRAME"
    STREAM_STOP = "STREAM_STOP"
    ALERT_EVENT = "ALERT_EVENT"
    ALERT_ACK = "ALERT_ACK"
    RULE_UPDATE = "RULE_UPDATE"
    METRICS_SNAPSHOT = "METRICS_SNAPSHOT"


class ProtocolError(Exception):
    """Base class for protocol failures."""


class EncodeError(ProtocolError):
    """Envelope cannot be serialized (payload does not match its msg_type)."""


class DecodeError(ProtocolError):
    """Incoming bytes cannot be decoded. ``code`` names the failure class."""

    #: distinct codes callers can branch on
    TRUNCATED = "truncated"
    MALFORMED = "malformed"
    UNKNOWN_TYPE = "unknown_type"
    INVALID_BASE64 = "invalid_base64"
    SCHEMA = "schema"

    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


@dataclass(frozen=True)
class DetectionMsg:
    """One detected object as reported by the edge (pre-persistence)."""

    class_label: str
    confidence: float
    x: float
    y: float
    w: float
    h: float
    orientation_deg: float


@dataclass(frozen=True)
class ImageUpload:
    image_data: str  # base64
    detections: tuple[DetectionMsg, ...]
    capture_ts_ms: int


@dataclass(frozen=True)
class VideoFrameMsg:
    stream_id: str
    frame_seq: int
    frame_data: str  # base64
    encode_ts_ms: int
    capture_ts_ms: int


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    sender_id: str
    seq: int
    timestamp_ms: int
    payload: dict[str, Any] = field(default_factory=dict)


def b64encode_bytes(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode_field(value: str, where: str) -> bytes:
    """Strict base64 decode; raises a typed DecodeError on bad input."""
    if not isinstance(value, str) or not value:
        raise DecodeError(DecodeError.INVALID_BASE64, f"{where}: empty or non-string")
    try:
        raw = base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise DecodeError(DecodeError.INVALID_BASE64, f"{where}: {exc}") from None
    if not raw:
        raise DecodeError(DecodeError.INVALID_BASE64, f"{where}: decodes to zero bytes")
    return raw


# Required payload fields per message type: name -> (type, validator or None).
# Only structural requirements live here; semantic checks belong to domain code.
def _non_empty(v: Any) -> bool:
    return isinstance(v, str) and len(v) > 0


def _fraction(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and 0.0 <= v <= 1.0


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


_PAYLOAD_FIELDS: dict[MsgType, dict[str, Any]] = {
    MsgType.HELLO: {"role": _non_empty, "token": _non_empty},
    MsgType.HELLO_ACK: {"ok": lambda v: isinstance(v, bool)},
    MsgType.IMAGE_UPLOAD: {
        "image_data": _non_empty,
        "detections": lambda v: isinstance(v, list),
        "capture_ts_ms": _is_int,
    },
    MsgType.VERIFY_RESULT: {"verified": lambda v: isinstance(v, bool)},
    MsgType.ANALYSIS: {"detection_id": _non_empty, "text": lambda v: isinstance(v, str)},
    MsgType.STREAM_START: {"stream_id": _non_empty},
    MsgType.VIDEO_FRAME: {
        "stream_id": _non_empty,
        "frame_seq": _is_int,
        "frame_data": _non_empty,
        "encode_ts_ms": _is_int,
        "capture_ts_ms": _is_int,
    },
    MsgType.STREAM_STOP: {"stream_id": _non_empty},
    MsgType.ALERT_EVENT: {"alert": lambda v: isinstance(v, dict)},
    MsgType.ALERT_ACK: {
        "alert_id": _non_empty,
        "action": lambda v: v in ("acknowledge", "resolve"),
    },
    MsgType.RULE_UPDATE: {"rule": lambda v: isinstance(v, dict)},
    MsgType.METRICS_SNAPSHOT: {},
}

_DETECTION_FIELDS = {
    "class_label": _non_empty,
    "confidence": _fraction,
    "x": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "y": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "w": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "h": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "orientation_deg": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
}


def _check_payload(msg_type: MsgType, payload: dict[str, Any], err: type) -> None:
    spec = _PAYLOAD_FIELDS[msg_type]
    for name, check in spec.items():
        if name not in payload:
            _fail(err, DecodeError.SCHEMA, f"{msg_type.value}: missing field {name!r}")
        if check is not None and not check(payload[name]):
            _fail(err, DecodeError.SCHEMA, f"{msg_type.value}: bad value for {name!r}")
    if msg_type is MsgType.IMAGE_UPLOAD:
        for i, det in enumerate(payload["detections"]):
            if not isinstance(det, dict):
                _fail(err, DecodeError.SCHEMA, f"detections[{i}] is not an object")
            for name, check in _DETECTION_FIELDS.items():
                if name not in det or not check(det[name]):
                    _fail(err, DecodeError.SCHEMA, f"detections[{i}]: bad field {name!r}")


def _fail(err: type, code: str, detail: str) -> None:
    if err is DecodeError:
        raise DecodeError(code, detail)
    raise EncodeError(detail)


def _check_base64_fields(msg_type: MsgType, payload: dict[str, Any]) -> None:
    if msg_type is MsgType.IMAGE_UPLOAD:
        b64decode_field(payload["image_data"], "image_data")
    elif msg_type is MsgType.VIDEO_FRAME:
        b64decode_field(payload["frame_data"], "frame_data")


def encode_envelope(env: Envelope) -> bytes:
    """Serialize an envelope to canonical UTF-8 JSON bytes.

    Canonical form (sorted keys, compact separators) makes
    decode(encode(e)) -> encode byte-identical, which the golden samples
    and the fanout path rely on.
    """
    if not isinstance(env.msg_type, MsgType):
        raise EncodeError(f"unknown msg_type: {env.msg_type!r}")
    if not env.sender_id:
        raise EncodeError("sender_id must be non-empty")
    if env.seq < 0:
        raise EncodeError("seq must be non-negative")
    _check_payload(env.msg_type, env.payload, EncodeError)
    try:
        _check_base64_fields(env.msg_type, env.payload)
    except DecodeError as exc:
        raise EncodeError(exc.detail) from None
    doc = {
        "type": env.msg_type.value,
        "sender": env.sender_id,
        "seq": env.seq,
        "ts_ms": env.timestamp_ms,
        "payload": env.payload,
    }
    try:
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise EncodeError(f"payload not JSON-serializable: {exc}") from None


def decode_envelope(data: bytes | str) -> Envelope:
    """Parse bytes into an Envelope.

    Total over arbitrary input: every failure raises DecodeError with a
    distinct code (truncated / malformed / unknown_type / invalid_base64 /
    schema), never anything else.
    """
    if isinstance(data, str):
        data = data.encode("utf-8", errors="surrogateescape")
    if not isinstance(data, (bytes, bytearray)):
        raise DecodeError(DecodeError.MALFORMED, f"expected bytes, got {type(data).__name__}")
    if len(data) == 0:
        raise DecodeError(DecodeError.TRUNCATED, "empty frame")
    try:
        text = bytes(data).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(DecodeError.MALFORMED, f"not UTF-8: {exc}") from None
    try:
        doc = json.loads(text)
    except RecursionError:
        raise DecodeError(DecodeError.MALFORMED, "nesting too deep") from None
    except json.JSONDecodeError as exc:
        # Ran off the end of the buffer -> the frame was cut short.
        if exc.pos >= len(text.rstrip()) - 1 and text.strip():
            raise DecodeError(DecodeError.TRUNCATED, f"incomplete document: {exc.msg}") from None
        raise DecodeError(DecodeError.MALFORMED, f"invalid JSON: {exc.msg}") from None
    except ValueError as exc:
        raise DecodeError(DecodeError.MALFORMED, str(exc)) from None
    if not isinstance(doc, dict):
        raise DecodeError(DecodeError.SCHEMA, "top-level value is not an object")
    for name, typ in (("type", str), ("sender", str), ("seq", int), ("ts_ms", int)):
        if name not in doc:
            raise DecodeError(DecodeError.SCHEMA, f"missing envelope field {name!r}")
        if not isinstance(doc[name], typ) or isinstance(doc[name], bool):
            raise DecodeError(DecodeError.SCHEMA, f"envelope field {name!r} has wrong type")
    try:
        msg_type = MsgType(doc["type"])
    except ValueError:
        raise DecodeError(DecodeError.UNKNOWN_TYPE, f"unknown msg_type {doc['type']!r}") from None
    payload = doc.get("payload")
    if not isinstance(payload, dict):
        raise DecodeError(DecodeError.SCHEMA, "payload is not an object")
    if not doc["sender"]:
        raise DecodeError(DecodeError.SCHEMA, "sender is empty")
    if doc["seq"] < 0:
        raise DecodeError(DecodeError.SCHEMA, "seq is negative")
    _check_payload(msg_type, payload, DecodeError)
    _check_base64_fields(msg_type, payload)
    return Envelope(
        msg_type=msg_type,
        sender_id=doc["sender"],
        seq=doc["seq"],
        timestamp_ms=doc["ts_ms"],
        payload=payload,
    )


class SeqTracker:
    """Per-connection monotonicity check on (sender, seq, timestamp).

    Regressed messages are logged and dropped rather than killing the
    connection; simulated-network reordering must not cascade.
    """

    def __init__(self) -> None:
        self._last: dict[str, tuple[int, int]] = {}
        self.dropped = 0

    def accept(self, env: Envelope) -> bool:
        last = self._last.get(env.sender_id)
        if last is not None:
            last_seq, last_ts = last
            if env.seq <= last_seq:
                self.dropped += 1
                logger.warning(
                    "seq regression from %s: %d after %d; dropping",
                    env.sender_id, env.seq, last_seq,
                )
                return False
            if env.timestamp_ms < last_ts:
                self.dropped += 1
                logger.warning(
                    "timestamp regression from %s: %d after %d; dropping",
                    env.sender_id, env.timestamp_ms, last_ts,
                )
                return False
        self._last[env.sender_id] = (env.seq, env.timestamp_ms)
        return True


def detection_to_payload(det: DetectionMsg) -> dict[str, Any]:
    return {
        "class_label": det.class_label,
        "confidence": det.confidence,
        "x": det.x,
        "y": det.y,
        "w": det.w,
        "h": det.h,
        "orientation_deg": det.orientation_deg,
    }


def detection_from_payload(doc: dict[str, Any]) -> DetectionMsg:
    return DetectionMsg(
        class_label=doc["class_label"],
        confidence=float(doc["confidence"]),
        x=float(doc["x"]),
        y=float(doc["y"]),
        w=float(doc["w"]),
        h=float(doc["h"]),
        orientation_deg=float(doc["orientation_deg"]),
    )
