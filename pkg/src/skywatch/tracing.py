"""Trace event log, the per-event latency breakdown, and the budget report.

A trace is a flat list of timestamped events (one JSON object per line on
disk). The budget builder joins edge, server, and consumer events into
per-detection pipeline timelines and per-stream delivery records.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable


class TraceLog:
    def __init__(self) -> None:
        self.events: list[dict[str, Any]] = []

    def append(self, t_ms: float, event: str, **fields: Any) -> None:
        rec = {"t": round(float(t_ms), 6), "ev": event}
        rec.update(fields)
        self.events.append(rec)

    def bound(self, now_fn) -> Any:
        def emit(event: str, **fields: Any) -> None:
            self.append(now_fn(), event, **fields)
        return emit

    def select(self, event: str, **match: Any) -> list[dict[str, Any]]:
        out = []
        for rec in self.events:
            if rec["ev"] != event:
                continue
            if all(rec.get(k) == v for k, v in match.items()):
                out.append(rec)
        return out

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.events:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "TraceLog":
        log = cls()
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: bad trace line: {exc}") from None
                if "t" not in rec or "ev" not in rec:
                    raise ValueError(f"{path}:{lineno}: trace line missing t/ev")
                log.events.append(rec)
        return log


@dataclass
class StageStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    n: int

    @classmethod
    def of(cls, values: list[float]) -> "StageStats | None":
        if not values:
            return None
        ordered = sorted(values)
        return cls(
            mean_ms=statistics.fmean(values),
            p50_ms=_quantile(ordered, 0.5),
            p95_ms=_quantile(ordered, 0.95),
            n=len(values),
        )

    def to_doc(self) -> dict:
        return {
            "mean_ms": round(self.mean_ms, 3),
            "p50_ms": round(self.p50_ms, 3),
            "p95_ms": round(self.p95_ms, 3),
            "n": self.n,
        }


def _quantile(ordered: list[float], q: float) -> float:
    if len(ordered) == 1:
        return ordered[0]
    pos = q * (len(ordered) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(ordered) - 1)
    frac = pos - lo
    return ordered[lo] * (1 - frac) + ordered[hi] * frac


PIPELINE_STAGES = ("inference", "transmission", "analysis", "delivery")


@dataclass
class DetectionTimeline:
    """Per verified-upload pipeline timestamps (all in sim ms)."""

    upload_id: str
    t_capture: float
    t_detect_done: float
    t_upload_done: float
    t_verify_done: float
    t_analysis_done: float | None = None
    t_delivered: float | None = None

    def stages(self) -> dict[str, float] | None:
        if self.t_analysis_done is None or self.t_delivered is None:
            return None
        return {
            "inference": self.t_detect_done - self.t_capture,
            "transmission": self.t_upload_done - self.t_detect_done,
            "analysis": self.t_analysis_done - self.t_upload_done,
            "delivery": self.t_delivered - self.t_analysis_done,
        }

    def ordered(self) -> bool:
        seq = [self.t_capture, self.t_detect_done, self.t_upload_done, self.t_verify_done]
        if self.t_analysis_done is not None:
            seq.append(self.t_analysis_done)
            if self.t_delivered is not None:
                seq.append(self.t_delivered)
        return all(a <= b + 1e-6 for a, b in zip(seq, seq[1:]))


@dataclass
class BudgetReport:
    stage_stats: dict[str, StageStats]
    total: StageStats | None
    stage_fractions: dict[str, float]
    stream: dict[str, Any]
    counts: dict[str, int]
    bytes_by_link: dict[str, int]
    notes: list[str] = field(default_factory=list)

    def to_doc(self) -> dict:
        return {
            "stages": {k: v.to_doc() for k, v in self.stage_stats.items()},
            "total": self.total.to_doc() if self.total else None,
            "stage_fractions": {k: round(v, 6) for k, v in self.stage_fractions.items()},
            "stream": self.stream,
            "counts": self.counts,
            "bytes_by_link": self.bytes_by_link,
            "notes": self.notes,
        }


def build_timelines(trace: TraceLog) -> list[DetectionTimeline]:
    """Join edge/server/consumer events into per-upload timelines.

    Correlation: uploads carry the capture timestamp of the frame that
    triggered them; detect events are keyed by the same capture timestamp
    and drone.
    """
    detect_by_key: dict[tuple[str, int], dict] = {}
    for rec in trace.select("detect_done"):
        detect_by_key[(rec["drone_id"], rec["capture_ts_ms"])] = rec

    job_to_upload: dict[str, str] = {}
    for rec in trace.select("analysis_requested"):
        job_to_upload[rec["job_id"]] = rec["upload_id"]

    analysis_done_by_upload: dict[str, dict] = {}
    detection_for_upload: dict[str, str] = {}
    for rec in trace.select("analysis_done"):
        upload_id = job_to_upload.get(rec["job_id"])
        if upload_id is not None:
            analysis_done_by_upload[upload_id] = rec
            detection_for_upload[upload_id] = rec["detection_id"]

    delivered_by_detection: dict[str, float] = {}
    for rec in trace.select("analysis_received"):
        det_id = rec["detection_id"]
        if det_id not in delivered_by_detection:
            delivered_by_detection[det_id] = rec["t"]

    timelines: list[DetectionTimeline] = []
    for rec in trace.select("upload_received"):
        upload_id = rec["upload_id"]
        detect = detect_by_key.get((rec["drone_id"], rec["capture_ts_ms"]))
        if detect is None:
            continue
        verify = trace.select("verify_done", upload_id=upload_id)
        if not verify:
            continue
        tl = DetectionTimeline(
            upload_id=upload_id,
            t_capture=float(rec["capture_ts_ms"]),
            t_detect_done=detect["t"],
            t_upload_done=rec["t"],
            t_verify_done=verify[0]["t"],
        )
        done = analysis_done_by_upload.get(upload_id)
        if done is not None:
            tl.t_analysis_done = done["t"]
            det_id = detection_for_upload.get(upload_id)
            if det_id is not None and det_id in delivered_by_detection:
                tl.t_delivered = delivered_by_detection[det_id]
        timelines.append(tl)
    return timelines


def build_report(trace: TraceLog, notes: Iterable[str] = ()) -> BudgetReport:
    timelines = build_timelines(trace)
    stage_values: dict[str, list[float]] = {s: [] for s in PIPELINE_STAGES}
    totals: list[float] = []
    complete = 0
    for tl in timelines:
        stages = tl.stages()
        if stages is None:
            continue
        complete += 1
        for name, value in stages.items():
            stage_values[name].append(value)
        totals.append(tl.t_delivered - tl.t_capture)

    stage_stats = {
        name: stats
        for name, values in stage_values.items()
        if (stats := StageStats.of(values)) is not None
    }
    total = StageStats.of(totals)
    fractions: dict[str, float] = {}
    if total is not None and total.mean_ms > 0:
        for name, stats in stage_stats.items():
            fractions[name] = stats.mean_ms / total.mean_ms

    # Stream metrics come from consumer-side receipts.
    frame_recs = trace.select("frame_received")
    g2g = [r["t"] - r["capture_ts_ms"] for r in frame_recs if "capture_ts_ms" in r]
    fps = 0.0
    if len(frame_recs) >= 2:
        per_consumer: dict[str, list[float]] = {}
        for r in frame_recs:
            per_consumer.setdefault(r.get("consumer", "?"), []).append(r["t"])
        rates = []
        for times in per_consumer.values():
            if len(times) >= 2:
                span = max(times) - min(times)
                if span > 0:
                    rates.append((len(times) - 1) / (span / 1000.0))
        fps = statistics.fmean(rates) if rates else 0.0

    bytes_by_link: dict[str, int] = {}
    for rec in trace.select("link_tx"):
        bytes_by_link[rec["link"]] = bytes_by_link.get(rec["link"], 0) + rec["bytes"]

    g2g_stats = StageStats.of(g2g)
    report = BudgetReport(
        stage_stats=stage_stats,
        total=total,
        stage_fractions=fractions,
        stream={
            "frames_received": len(frame_recs),
            "effective_fps": round(fps, 4),
            "glass_to_glass": g2g_stats.to_doc() if g2g_stats else None,
        },
        counts={
            "uploads": len(trace.select("upload_received")),
            "uploads_verified": sum(
                1 for r in trace.select("verify_done") if r.get("verified")
            ),
            "alerts": len(trace.select("alert_created")),
            "timelines": len(timelines),
            "timelines_complete": complete,
        },
        bytes_by_link=bytes_by_link,
        notes=list(notes),
    )
    return report
