"""Trace invariant suite: gating, ordering, throughput ceiling, bandwidth
conservation, frame-interval floor, consumer ordering, and the persistence
sweep result embedded in the trace."""

from __future__ import annotations

from dataclasses import dataclass, field

from .tracing import TraceLog, build_timelines

EPS_MS = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    offenders: list[str] = field(default_factory=list)
    detail: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        tail = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}{tail}"


def _meta(trace: TraceLog) -> dict:
    metas = trace.select("meta")
    if not metas:
        raise ValueError("trace has no meta event; was it produced by the harness?")
    return metas[0]


def _trace_end(trace: TraceLog) -> float:
    return max((rec["t"] for rec in trace.events), default=0.0)


def _streaming_windows(trace: TraceLog, drone_id: str, end_ms: float) -> list[tuple[float, float]]:
    """[start, end] intervals during which the drone's gate was Streaming."""
    windows: list[tuple[float, float]] = []
    open_at: float | None = None
    for rec in trace.select("gate_transition", drone_id=drone_id):
        if rec["state"] == "Streaming":
            if open_at is None:
                open_at = rec["t"]
        else:
            if open_at is not None:
                windows.append((open_at, rec["t"]))
                open_at = None
    if open_at is not None:
        windows.append((open_at, end_ms))
    return windows


def check_gating(trace: TraceLog) -> CheckResult:
    """No VIDEO_FRAME leaves the edge outside a verified streaming window."""
    meta = _meta(trace)
    end = _trace_end(trace)
    offenders = []
    for drone in meta["drones"]:
        drone_id = drone["drone_id"]
        windows = _streaming_windows(trace, drone_id, end)
        for rec in trace.select("frame_sent", drone_id=drone_id):
            t = rec["t"]
            if not any(a - EPS_MS <= t <= b + EPS_MS for a, b in windows):
                offenders.append(f"{drone_id} {rec['stream_id']}#{rec['frame_seq']} at t={t}")
    return CheckResult("gating", not offenders, offenders,
                       "" if not offenders else f"{len(offenders)} frame(s) outside windows")


def check_pipeline_order(trace: TraceLog) -> CheckResult:
    offenders = []
    for tl in build_timelines(trace):
        if not tl.ordered():
            offenders.append(tl.upload_id)
    return CheckResult("pipeline-order", not offenders, offenders)


def check_throughput_ceiling(trace: TraceLog, window_ms: float = 10_000.0) -> CheckResult:
    """Frames emitted per window never exceed achievable_fps x window + 1."""
    meta = _meta(trace)
    end = _trace_end(trace)
    offenders = []
    for drone in meta["drones"]:
        drone_id = drone["drone_id"]
        fps = drone["achievable_fps"]
        times = sorted(rec["t"] for rec in trace.select("frame_sent", drone_id=drone_id))
        if not times:
            continue
        limit_per_window = fps * window_ms / 1000.0 + 1
        start = 0.0
        while start < end:
            count = sum(1 for t in times if start <= t < start + window_ms)
            if count > limit_per_window + EPS_MS:
                offenders.append(
                    f"{drone_id}: {count} frames in [{start}, {start + window_ms})"
                )
            start += window_ms
    return CheckResult("throughput-ceiling", not offenders, offenders)


def check_consumer_order(trace: TraceLog) -> CheckResult:
    """Accepted frame_seq strictly increases per (consumer, stream)."""
    offenders = []
    last: dict[tuple[str, str], int] = {}
    for rec in trace.select("frame_received"):
        key = (rec["consumer"], rec["stream_id"])
        seq = rec["frame_seq"]
        if key in last and seq <= last[key]:
            offenders.append(f"{key[0]} {key[1]}: {seq} after {last[key]}")
        last[key] = seq
    return CheckResult("consumer-frame-order", not offenders, offenders)


def check_bandwidth_conservation(trace: TraceLog, window_ms: float = 1_000.0) -> CheckResult:
    """Per link: payload bytes serialized inside any window stay within the
    highest bandwidth configured for that link during the run."""
    meta = _meta(trace)
    allowed: dict[str, float | None] = {}
    for name, specs in meta["links"].items():
        bws = [s["bandwidth_bps"] for s in specs]
        allowed[name] = None if any(b is None for b in bws) else max(bws)
    end = _trace_end(trace)
    offenders = []
    tx_by_link: dict[str, list[dict]] = {}
    for rec in trace.select("link_tx"):
        tx_by_link.setdefault(rec["link"], []).append(rec)
    for link, records in tx_by_link.items():
        cap_bps = allowed.get(link)
        if cap_bps is None:
            continue
        cap_bytes = cap_bps / 8.0 * window_ms / 1000.0
        start = 0.0
        while start < end:
            stop = start + window_ms
            total = 0.0
            for rec in records:
                a, b = rec["t_start"], rec["t_depart"]
                if b <= start or a >= stop or b <= a:
                    continue
                overlap = min(b, stop) - max(a, start)
                total += rec["bytes"] * overlap / (b - a)
            if total > cap_bytes * (1 + 1e-6) + 1:
                offenders.append(f"{link}: {total:.0f} bytes in [{start}, {stop})")
            start = stop
    return CheckResult("bandwidth-conservation", not offenders, offenders)


def check_frame_interval_floor(trace: TraceLog) -> CheckResult:
    """Consumer inter-frame spacing respects the encoder's rate floor."""
    meta = _meta(trace)
    fps_by_stream_prefix = {d["drone_id"]: d["achievable_fps"] for d in meta["drones"]}
    jitter = 0.0
    for specs in meta["links"].values():
        jitter = max(jitter, max(s["jitter_ms"] for s in specs))
    offenders = []
    last: dict[tuple[str, str], float] = {}
    for rec in trace.select("frame_received"):
        key = (rec["consumer"], rec["stream_id"])
        drone_id = rec["stream_id"].rsplit("-stream-", 1)[0]
        fps = fps_by_stream_prefix.get(drone_id)
        if fps is None:
            continue
        floor = 1000.0 / fps - jitter - 50.0
        if key in last and rec["t"] - last[key] < floor - EPS_MS:
            offenders.append(
                f"{key[0]} {key[1]}: gap {rec['t'] - last[key]:.1f}ms < {floor:.1f}ms"
            )
        last[key] = rec["t"]
    return CheckResult("frame-interval-floor", not offenders, offenders)


def check_alert_before_stream(trace: TraceLog) -> CheckResult:
    """Per consumer connection, some alert precedes (or accompanies) the
    first frame of each stream the consumer accepted."""
    offenders = []
    first_frame: dict[tuple[str, str], float] = {}
    for rec in trace.select("frame_received"):
        key = (rec["consumer"], rec["stream_id"])
        if key not in first_frame:
            first_frame[key] = rec["t"]
    alerts_by_consumer: dict[str, list[float]] = {}
    for rec in trace.select("alert_received"):
        alerts_by_consumer.setdefault(rec["consumer"], []).append(rec["t"])
    for (consumer, stream_id), t_frame in first_frame.items():
        times = alerts_by_consumer.get(consumer, [])
        if not any(t <= t_frame + EPS_MS for t in times):
            offenders.append(f"{consumer} {stream_id}: first frame at {t_frame} unheralded")
    return CheckResult("alert-before-stream", not offenders, offenders)


def check_integrity(trace: TraceLog) -> CheckResult:
    sweeps = trace.select("integrity_sweep")
    if not sweeps:
        return CheckResult("persistence-integrity", False, [],
                           "no integrity_sweep event in trace")
    rec = sweeps[-1]
    bad = rec["dangling"] + rec["backward_transitions"]
    return CheckResult("persistence-integrity", bad == 0,
                       [str(d) for d in rec.get("detail", [])],
                       "" if bad == 0 else f"{rec['dangling']} dangling, "
                       f"{rec['backward_transitions']} backward")


ALL_CHECKS = (
    check_gating,
    check_pipeline_order,
    check_throughput_ceiling,
    check_consumer_order,
    check_bandwidth_conservation,
    check_frame_interval_floor,
    check_alert_before_stream,
    check_integrity,
)


def check_trace(trace: TraceLog, checks=ALL_CHECKS) -> list[CheckResult]:
    return [fn(trace) for fn in checks]
