"""Codec round-trips, typed decode failures, and the golden wire samples."""

import base64
import json
import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skywatch.protocol import (
    DecodeError,
    EncodeError,
    Envelope,
    MsgType,
    SeqTracker,
    b64decode_field,
    b64encode_bytes,
    decode_envelope,
    encode_envelope,
)

GOLDEN = Path(__file__).parent / "golden" / "protocol_samples.jsonl"


def hello(seq=1, sender="drone-1", ts=1000):
    return Envelope(MsgType.HELLO, sender, seq, ts, {"role": "edge", "token": "t"})


def test_round_trip_identity():
    env = hello()
    data = encode_envelope(env)
    assert decode_envelope(data) == env


def test_empty_frame_data_rejected():
    env = Envelope(MsgType.VIDEO_FRAME, "drone-1", 1, 1000, {
        "stream_id": "s", "frame_seq": 1, "frame_data": "",
        "encode_ts_ms": 1, "capture_ts_ms": 1,
    })
    with pytest.raises(EncodeError):
        encode_envelope(env)


def test_payload_type_mismatch_is_structural_error():
    env = Envelope(MsgType.STREAM_START, "drone-1", 1, 1000, {"nope": 1})
    with pytest.raises(EncodeError):
        encode_envelope(env)


def _random_envelope(rng: random.Random) -> Envelope:
    choice = rng.randrange(4)
    sender = rng.choice(["drone-1", "server", "dash-9"])
    seq = rng.randrange(1, 10_000)
    ts = rng.randrange(0, 2**45)
    if choice == 0:
        return Envelope(MsgType.HELLO, sender, seq, ts,
                        {"role": rng.choice(["edge", "consumer"]), "token": "tk"})
    if choice == 1:
        dets = [{
            "class_label": rng.choice(["person", "vehicle"]),
            "confidence": round(rng.random(), 6),
            "x": 0.5, "y": 0.5, "w": 0.2, "h": 0.2,
            "orientation_deg": round(rng.uniform(0, 359), 3),
        } for _ in range(rng.randrange(0, 4))]
        return Envelope(MsgType.IMAGE_UPLOAD, sender, seq, ts, {
            "image_data": b64encode_bytes(rng.randbytes(rng.randrange(1, 2048))),
            "detections": dets,
            "capture_ts_ms": rng.randrange(0, 2**45),
        })
    if choice == 2:
        return Envelope(MsgType.VIDEO_FRAME, sender, seq, ts, {
            "stream_id": f"s-{rng.randrange(10)}",
            "frame_seq": rng.randrange(1, 1000),
            "frame_data": b64encode_bytes(rng.randbytes(rng.randrange(1, 4096))),
            "encode_ts_ms": ts, "capture_ts_ms": ts - 100,
        })
    return Envelope(MsgType.ALERT_EVENT, sender, seq, ts,
                    {"alert": {"alert_id": f"a-{seq}", "status": "open"}})


def test_randomized_round_trip_oracle():
    rng = random.Random(20240817)
    for _ in range(1000):
        env = _random_envelope(rng)
        assert decode_envelope(encode_envelope(env)) == env


def test_decode_error_codes_are_distinct():
    with pytest.raises(DecodeError) as err:
        decode_envelope(b"")
    assert err.value.code == DecodeError.TRUNCATED

    with pytest.raises(DecodeError) as err:
        decode_envelope(b'{"type": "HELLO", "sender": "x", "seq": 1, ')
    assert err.value.code == DecodeError.TRUNCATED

    with pytest.raises(DecodeError) as err:
        decode_envelope(b"\xff\xfe not json")
    assert err.value.code == DecodeError.MALFORMED

    with pytest.raises(DecodeError) as err:
        decode_envelope(json.dumps({
            "type": "NOPE", "sender": "x", "seq": 1, "ts_ms": 1, "payload": {},
        }).encode())
    assert err.value.code == DecodeError.UNKNOWN_TYPE

    with pytest.raises(DecodeError) as err:
        decode_envelope(json.dumps({
            "type": "VIDEO_FRAME", "sender": "x", "seq": 1, "ts_ms": 1,
            "payload": {"stream_id": "s", "frame_seq": 1, "frame_data": "!!notb64!!",
                        "encode_ts_ms": 1, "capture_ts_ms": 1},
        }).encode())
    assert err.value.code == DecodeError.INVALID_BASE64

    with pytest.raises(DecodeError) as err:
        decode_envelope(json.dumps({
            "type": "HELLO", "sender": "x", "seq": 1, "ts_ms": 1,
            "payload": {"role": "edge"},
        }).encode())
    assert err.value.code == DecodeError.SCHEMA


def test_fuzz_corpus_only_typed_errors():
    rng = random.Random(99)
    valid = encode_envelope(hello())
    crashes = 0
    for i in range(2000):
        kind = rng.randrange(3)
        if kind == 0:
            data = rng.randbytes(rng.randrange(0, 200))
        elif kind == 1:
            data = bytearray(valid)
            for _ in range(rng.randrange(1, 6)):
                data[rng.randrange(len(data))] = rng.randrange(256)
            data = bytes(data)
        else:
            cut = rng.randrange(len(valid))
            data = valid[:cut]
        try:
            decode_envelope(data)
        except DecodeError:
            pass
        except Exception:
            crashes += 1
    assert crashes == 0


def test_deep_nesting_is_typed_error():
    data = (b'[' * 200000) + (b']' * 200000)
    with pytest.raises(DecodeError):
        decode_envelope(data)


@given(payload=st.binary(min_size=1, max_size=65536))
@settings(max_examples=50, deadline=None)
def test_base64_round_trip_property(payload):
    assert b64decode_field(b64encode_bytes(payload), "x") == payload


def test_base64_round_trip_4mib():
    payload = random.Random(5).randbytes(4 * 1024 * 1024)
    assert b64decode_field(b64encode_bytes(payload), "x") == payload


def test_base64_rejects_invalid():
    with pytest.raises(DecodeError):
        b64decode_field("####", "x")
    with pytest.raises(DecodeError):
        b64decode_field("", "x")
    # decodes to zero bytes
    with pytest.raises(DecodeError):
        b64decode_field(base64.b64encode(b"").decode(), "x")


def test_golden_samples_round_trip_bit_exact():
    lines = GOLDEN.read_bytes().splitlines()
    assert len(lines) == len(MsgType)
    seen = set()
    for line in lines:
        env = decode_envelope(line)
        seen.add(env.msg_type)
        assert encode_envelope(env) == line
    assert seen == set(MsgType)


def test_seq_tracker_drops_regressions():
    tracker = SeqTracker()
    assert tracker.accept(hello(seq=1))
    assert tracker.accept(hello(seq=2, ts=2000))
    assert not tracker.accept(hello(seq=2, ts=2000))
    assert not tracker.accept(hello(seq=1, ts=3000))
    assert tracker.accept(hello(seq=5, ts=2000))
    # timestamp regression also drops
    assert not tracker.accept(hello(seq=6, ts=1000))
    assert tracker.dropped == 3
    # independent senders do not interfere
    assert tracker.accept(hello(seq=1, sender="other"))
