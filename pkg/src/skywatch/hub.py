"""Central server logic, independent of any transport.

Drivers (the live WebSocket app and the discrete-event harness) feed decoded
envelopes in and drain per-connection outbound queues; analysis work comes
back as jobs the driver schedules on its own clock. Outbound queues preserve
FIFO order; video frames are capped per connection (drop-oldest) while
control traffic is never dropped.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Callable

from .domain import (
    Alert,
    Detection,
    IllegalTransition,
    MissionStatus,
    Rule,
    ValidationError,
    generate_alert,
    match_rules,
    pick_primary_rule,
    render_prompt,
)
from .objectstore import ObjectStore
from .protocol import Envelope, MsgType, SeqTracker, b64decode_field
from .providers import AnalysisProvider, AnalysisResult
from .store import (
    StoreError,
    TelemetryStore,
    alert_to_doc,
    rule_from_doc,
    rule_to_doc,
)

logger = logging.getLogger(__name__)

FRAME_QUEUE_CAP = 8

ROLE_EDGE = "edge"
ROLE_CONSUMER = "consumer"
ROLE_DASHBOARD = "dashboard"


def token_hash(token: str) -> str:
    return hashlib.sha256(token.encode()).hexdigest()


@dataclass
class AnalysisJob:
    job_id: str
    edge_conn_id: str
    detection_id: str
    alert_id: str
    image_ref: str
    prompt: str
    latency_ms: float


@dataclass
class Connection:
    conn_id: str
    role: str = ""
    authenticated: bool = False
    drone_id: str | None = None
    user_id: str | None = None
    mission_id: str | None = None
    stream_filter: set[str] | None = None  # None = all streams
    close_after_flush: bool = False
    seq_out: int = 0
    last_ts_out: int = 0
    frames_dropped: int = 0
    inbound: SeqTracker = field(default_factory=SeqTracker)
    # Two stamped queues merged on dequeue keep global FIFO order while
    # letting the frame queue drop its oldest entry in O(1).
    control_q: deque = field(default_factory=deque)  # (stamp, Envelope)
    frame_q: deque = field(default_factory=deque)
    enq_stamp: int = 0

    def wants_stream(self, stream_id: str) -> bool:
        return self.stream_filter is None or stream_id in self.stream_filter

    @property
    def outbox_size(self) -> int:
        return len(self.control_q) + len(self.frame_q)


@dataclass
class HandleResult:
    woken: set[str] = field(default_factory=set)
    jobs: list[AnalysisJob] = field(default_factory=list)


class ServerHub:
    def __init__(
        self,
        store: TelemetryStore,
        object_store: ObjectStore,
        provider: AnalysisProvider,
        server_id: str = "server",
        trace: Callable[..., None] | None = None,
    ):
        self.store = store
        self.object_store = object_store
        self.provider = provider
        self.server_id = server_id
        self.trace = trace or (lambda event, **fields: None)
        self.conns: dict[str, Connection] = {}
        self.streams: dict[str, str] = {}  # stream_id -> owning edge conn_id
        self.latest_metrics: dict[str, dict] = {}  # drone_id -> last snapshot
        self.started_at = time.time()
        self.counters: dict[str, int] = {
            "uploads": 0,
            "uploads_rejected": 0,
            "alerts_created": 0,
            "frames_relayed": 0,
            "frames_dropped": 0,
            "unknown_stream_frames": 0,
            "messages_dropped_seq": 0,
        }

    # -- connection lifecycle -------------------------------------------------

    def register(self, conn_id: str) -> Connection:
        conn = Connection(conn_id=conn_id)
        self.conns[conn_id] = conn
        return conn

    def disconnect(self, conn_id: str, now_ms: float) -> HandleResult:
        """Remove a connection; an edge connection going away terminates its
        streams for every subscriber."""
        result = HandleResult()
        conn = self.conns.pop(conn_id, None)
        if conn is None:
            return result
        if conn.role == ROLE_EDGE:
            for stream_id, owner in list(self.streams.items()):
                if owner == conn_id:
                    del self.streams[stream_id]
                    self.trace("stream_closed", stream_id=stream_id, reason="edge_disconnect")
                    self._broadcast_control(
                        MsgType.STREAM_STOP, {"stream_id": stream_id}, now_ms, result
                    )
        return result

    # -- inbound dispatch -------------------------------------------------------

    def handle(self, conn_id: str, env: Envelope, now_ms: float) -> HandleResult:
        result = HandleResult()
        conn = self.conns.get(conn_id)
        if conn is None:
            logger.warning("message on unregistered connection %s", conn_id)
            return result
        if not conn.inbound.accept(env):
            self.counters["messages_dropped_seq"] += 1
            return result
        if env.msg_type is MsgType.HELLO:
            self._handle_hello(conn, env, now_ms, result)
            return result
        if not conn.authenticated:
            logger.warning("%s before handshake on %s; closing", env.msg_type.value, conn_id)
            conn.close_after_flush = True
            result.woken.add(conn_id)
            return result
        handler = {
            MsgType.IMAGE_UPLOAD: self._handle_image_upload,
            MsgType.STREAM_START: self._handle_stream_start,
            MsgType.VIDEO_FRAME: self._handle_video_frame,
            MsgType.STREAM_STOP: self._handle_stream_stop,
            MsgType.ALERT_ACK: self._handle_alert_ack,
            MsgType.RULE_UPDATE: self._handle_rule_update,
            MsgType.METRICS_SNAPSHOT: self._handle_metrics,
        }.get(env.msg_type)
        if handler is None:
            logger.warning("unexpected %s from %s", env.msg_type.value, conn_id)
            return result
        handler(conn, env, now_ms, result)
        return result

    # -- outbound queue API ------------------------------------------------------

    def enqueue(self, conn: Connection, msg_type: MsgType, payload: dict,
                now_ms: float, result: HandleResult, is_frame: bool = False) -> None:
        if is_frame and len(conn.frame_q) >= FRAME_QUEUE_CAP:
            # Drop the oldest queued frame, never control traffic.
            conn.frame_q.popleft()
            conn.frames_dropped += 1
            self.counters["frames_dropped"] += 1
        conn.seq_out += 1
        ts = max(int(now_ms), conn.last_ts_out)
        conn.last_ts_out = ts
        env = Envelope(
            msg_type=msg_type,
            sender_id=self.server_id,
            seq=conn.seq_out,
            timestamp_ms=ts,
            payload=payload,
        )
        conn.enq_stamp += 1
        (conn.frame_q if is_frame else conn.control_q).append((conn.enq_stamp, env))
        result.woken.add(conn.conn_id)

    def next_outbound(self, conn_id: str) -> Envelope | None:
        conn = self.conns.get(conn_id)
        if conn is None:
            return None
        take_control: bool
        if conn.control_q and conn.frame_q:
            take_control = conn.control_q[0][0] < conn.frame_q[0][0]
        elif conn.control_q:
            take_control = True
        elif conn.frame_q:
            take_control = False
        else:
            return None
        _, env = (conn.control_q if take_control else conn.frame_q).popleft()
        return env

    def pending(self, conn_id: str) -> int:
        conn = self.conns.get(conn_id)
        return conn.outbox_size if conn else 0

    # -- message handlers ----------------------------------------------------------

    def _handle_hello(self, conn: Connection, env: Envelope, now_ms: float,
                      result: HandleResult) -> None:
        role = env.payload.get("role", "")
        token = env.payload.get("token", "")
        if role == ROLE_EDGE:
            drone = self.store.get_drone(env.sender_id)
            if drone is None or not hmac.compare_digest(token, drone.secret_token):
                self._reject_hello(conn, "unknown drone or bad token", now_ms, result)
                return
            conn.role = ROLE_EDGE
            conn.drone_id = drone.drone_id
            conn.mission_id = drone.mission_id
            conn.authenticated = True
            self.enqueue(conn, MsgType.HELLO_ACK,
                         {"ok": True, "server_id": self.server_id, "role": role},
                         now_ms, result)
            self.trace("edge_connected", drone_id=drone.drone_id)
            return
        if role in (ROLE_CONSUMER, ROLE_DASHBOARD):
            user = self.store.get_user_by_token_hash(token_hash(token))
            if user is None:
                self._reject_hello(conn, "unknown user token", now_ms, result)
                return
            conn.role = role
            conn.user_id = user.user_id
            conn.authenticated = True
            requested = env.payload.get("streams")
            if isinstance(requested, list) and requested:
                conn.stream_filter = {str(s) for s in requested}
            mission_id = env.payload.get("mission_id")
            if isinstance(mission_id, str) and mission_id:
                conn.mission_id = mission_id
            ack: dict[str, Any] = {"ok": True, "server_id": self.server_id, "role": role}
            if role == ROLE_DASHBOARD:
                ack["snapshot"] = self._snapshot(conn)
            self.enqueue(conn, MsgType.HELLO_ACK, ack, now_ms, result)
            # Late joiners learn about already-active streams.
            for stream_id in sorted(self.streams):
                if conn.wants_stream(stream_id):
                    self.enqueue(conn, MsgType.STREAM_START,
                                 {"stream_id": stream_id}, now_ms, result)
            return
        self._reject_hello(conn, f"unknown role {role!r}", now_ms, result)

    def _reject_hello(self, conn: Connection, reason: str, now_ms: float,
                      result: HandleResult) -> None:
        logger.warning("handshake rejected on %s: %s", conn.conn_id, reason)
        conn.close_after_flush = True
        self.enqueue(conn, MsgType.HELLO_ACK, {"ok": False, "error": reason}, now_ms, result)

    def _handle_image_upload(self, conn: Connection, env: Envelope, now_ms: float,
                             result: HandleResult) -> None:
        if conn.role != ROLE_EDGE:
            logger.warning("IMAGE_UPLOAD from non-edge %s", conn.conn_id)
            return
        self.counters["uploads"] += 1
        upload_id = self.store.next_id("upload")
        drone_id = conn.drone_id or ""
        mission_id = conn.mission_id
        self.trace("upload_received", upload_id=upload_id, drone_id=drone_id,
                   capture_ts_ms=env.payload["capture_ts_ms"],
                   n_detections=len(env.payload["detections"]))

        def reject(reason: str) -> None:
            self.counters["uploads_rejected"] += 1
            self.trace("upload_rejected", upload_id=upload_id, reason=reason)
            self.enqueue(conn, MsgType.VERIFY_RESULT,
                         {"verified": False, "matched_rule_id": None,
                          "alert_id": None, "error": reason},
                         now_ms, result)

        if mission_id is None:
            reject("drone not assigned to a mission")
            return
        mission = self.store.get_mission(mission_id)
        if mission is None or mission.status is not MissionStatus.ACTIVE:
            reject("mission is not active")
            return
        image_bytes = b64decode_field(env.payload["image_data"], "image_data")

        # Validate every detection before anything is persisted.
        detections: list[Detection] = []
        for i, doc in enumerate(env.payload["detections"]):
            det = Detection(
                detection_id=f"pending-{i}",
                drone_id=drone_id,
                mission_id=mission_id,
                class_label=doc["class_label"],
                confidence=float(doc["confidence"]),
                x=float(doc["x"]), y=float(doc["y"]),
                w=float(doc["w"]), h=float(doc["h"]),
                orientation_deg=float(doc["orientation_deg"]),
                capture_ts_ms=int(env.payload["capture_ts_ms"]),
            )
            try:
                det.validate()
            except ValidationError as exc:
                reject(f"detection[{i}]: {exc}")
                return
            detections.append(det)

        image_ref = self.object_store.put(image_bytes)
        rules = self.store.rules_for_mission(mission_id)
        alerts: list[Alert] = []
        matched_by_rule: dict[str, tuple[Rule, Detection]] = {}
        persisted: list[Detection] = []
        for det in detections:
            det = replace(det, detection_id=self.store.next_id("det"), image_ref=image_ref)
            self.store.insert_detection(det)
            persisted.append(det)
            for rule in match_rules(det, rules):
                alert = generate_alert(det, rule, int(now_ms), self.store.next_id("alert"))
                self.store.insert_alert(alert)
                alerts.append(alert)
                if rule.rule_id not in matched_by_rule:
                    matched_by_rule[rule.rule_id] = (rule, det)
        verified = bool(alerts)
        self.counters["alerts_created"] += len(alerts)

        primary_rule_id: str | None = None
        primary_alert_id: str | None = None
        if verified:
            primary_rule = pick_primary_rule([r for r, _ in matched_by_rule.values()])
            primary_det = matched_by_rule[primary_rule.rule_id][1]
            primary_alert = next(
                a for a in alerts
                if a.rule_id == primary_rule.rule_id and a.detection_id == primary_det.detection_id
            )
            primary_rule_id = primary_rule.rule_id
            primary_alert_id = primary_alert.alert_id
            for alert in alerts:
                self.trace("alert_created", alert_id=alert.alert_id,
                           rule_id=alert.rule_id, severity=alert.severity.value,
                           detection_id=alert.detection_id, upload_id=upload_id)
                self._broadcast_control(MsgType.ALERT_EVENT, {"alert": alert_to_doc(alert)},
                                        now_ms, result)
            job = AnalysisJob(
                job_id=self.store.next_id("job"),
                edge_conn_id=conn.conn_id,
                detection_id=primary_det.detection_id,
                alert_id=primary_alert.alert_id,
                image_ref=image_ref,
                prompt=render_prompt(primary_rule, primary_det),
                latency_ms=self.provider.latency_ms,
            )
            result.jobs.append(job)
            self.trace("analysis_requested", job_id=job.job_id, upload_id=upload_id,
                       detection_id=job.detection_id, alert_id=job.alert_id)
        self.trace("verify_done", upload_id=upload_id, verified=verified,
                   n_alerts=len(alerts),
                   detection_ids=[d.detection_id for d in persisted])
        self.enqueue(conn, MsgType.VERIFY_RESULT,
                     {"verified": verified, "matched_rule_id": primary_rule_id,
                      "alert_id": primary_alert_id},
                     now_ms, result)

    def apply_analysis(self, job: AnalysisJob, analysis: AnalysisResult,
                       now_ms: float, result: HandleResult | None = None) -> HandleResult:
        """Analysis completed (driver supplies the provider result)."""
        result = result if result is not None else HandleResult()
        try:
            self.store.set_analysis_text(job.alert_id, analysis.text)
        except StoreError:
            logger.warning("analysis done for vanished alert %s", job.alert_id)
        payload = {"detection_id": job.detection_id, "text": analysis.text}
        edge_conn = self.conns.get(job.edge_conn_id)
        if edge_conn is not None and edge_conn.authenticated:
            self.enqueue(edge_conn, MsgType.ANALYSIS, payload, now_ms, result)
        for conn in self._by_role(ROLE_DASHBOARD):
            self.enqueue(conn, MsgType.ANALYSIS, payload, now_ms, result)
        self.trace("analysis_done", job_id=job.job_id, detection_id=job.detection_id,
                   alert_id=job.alert_id, chars=len(analysis.text))
        return result

    def _handle_stream_start(self, conn: Connection, env: Envelope, now_ms: float,
                             result: HandleResult) -> None:
        if conn.role != ROLE_EDGE:
            return
        stream_id = env.payload["stream_id"]
        self.streams[stream_id] = conn.conn_id
        self.trace("stream_registered", stream_id=stream_id, drone_id=conn.drone_id)
        self._broadcast_control(MsgType.STREAM_START, {"stream_id": stream_id},
                                now_ms, result, stream_id=stream_id)

    def _handle_stream_stop(self, conn: Connection, env: Envelope, now_ms: float,
                            result: HandleResult) -> None:
        if conn.role != ROLE_EDGE:
            return
        stream_id = env.payload["stream_id"]
        if self.streams.pop(stream_id, None) is None:
            logger.warning("STREAM_STOP for unknown stream %s", stream_id)
            return
        self.trace("stream_closed", stream_id=stream_id, reason="edge_stop")
        self._broadcast_control(MsgType.STREAM_STOP, {"stream_id": stream_id},
                                now_ms, result, stream_id=stream_id)

    def _handle_video_frame(self, conn: Connection, env: Envelope, now_ms: float,
                            result: HandleResult) -> None:
        if conn.role != ROLE_EDGE:
            return
        delivered = self.fanout_stream(env.payload["stream_id"], env, now_ms, result)
        self.trace("frame_fanout", stream_id=env.payload["stream_id"],
                   frame_seq=env.payload["frame_seq"], delivered=delivered,
                   payload_b64_len=len(env.payload["frame_data"]))

    def fanout_stream(self, stream_id: str, frame_env: Envelope, now_ms: float,
                      result: HandleResult) -> int:
        """Forward one frame to every subscribed consumer; returns deliveries."""
        if stream_id not in self.streams:
            self.counters["unknown_stream_frames"] += 1
            logger.warning("frame for unknown stream %s dropped", stream_id)
            return 0
        delivered = 0
        for conn in list(self.conns.values()):
            if conn.role in (ROLE_CONSUMER, ROLE_DASHBOARD) and conn.authenticated \
                    and conn.wants_stream(stream_id):
                self.enqueue(conn, MsgType.VIDEO_FRAME, frame_env.payload, now_ms,
                             result, is_frame=True)
                delivered += 1
        self.counters["frames_relayed"] += delivered
        return delivered

    def _handle_alert_ack(self, conn: Connection, env: Envelope, now_ms: float,
                          result: HandleResult) -> None:
        if conn.role != ROLE_DASHBOARD:
            logger.warning("ALERT_ACK from non-dashboard %s", conn.conn_id)
            return
        alert_id = env.payload["alert_id"]
        action = env.payload["action"]
        try:
            updated = self.store.apply_alert_action(alert_id, action, int(now_ms))
        except (IllegalTransition, StoreError) as exc:
            current = self.store.get_alert(alert_id)
            payload = {
                "alert": alert_to_doc(current) if current else {"alert_id": alert_id},
                "ack_error": str(exc),
            }
            self.enqueue(conn, MsgType.ALERT_EVENT, payload, now_ms, result)
            return
        self.trace("alert_transition", alert_id=alert_id, action=action,
                   new_status=updated.status.value, by=conn.user_id)
        self._broadcast_control(MsgType.ALERT_EVENT, {"alert": alert_to_doc(updated)},
                                now_ms, result)

    def _handle_rule_update(self, conn: Connection, env: Envelope, now_ms: float,
                            result: HandleResult) -> None:
        if conn.role != ROLE_DASHBOARD:
            logger.warning("RULE_UPDATE from non-dashboard %s", conn.conn_id)
            return
        try:
            rule = rule_from_doc(env.payload["rule"])
        except ValidationError as exc:
            self.enqueue(conn, MsgType.RULE_UPDATE,
                         {"rule": env.payload["rule"], "error": str(exc)}, now_ms, result)
            return
        user = conn.user_id or ""
        mission = self.store.get_mission(rule.mission_id)
        if mission is None or user not in mission.user_ids:
            self.enqueue(conn, MsgType.RULE_UPDATE,
                         {"rule": env.payload["rule"],
                          "error": f"user {user} not assigned to mission {rule.mission_id}"},
                         now_ms, result)
            return
        self.store.upsert_rule(rule)
        self.trace("rule_updated", rule_id=rule.rule_id, enabled=rule.enabled, by=user)
        for dash in self._by_role(ROLE_DASHBOARD):
            self.enqueue(dash, MsgType.RULE_UPDATE, {"rule": rule_to_doc(rule)},
                         now_ms, result)

    def _handle_metrics(self, conn: Connection, env: Envelope, now_ms: float,
                        result: HandleResult) -> None:
        if conn.role != ROLE_EDGE:
            return
        self.latest_metrics[conn.drone_id or conn.conn_id] = dict(env.payload)
        for dash in self._by_role(ROLE_DASHBOARD):
            payload = dict(env.payload)
            payload["drone_id"] = conn.drone_id
            self.enqueue(dash, MsgType.METRICS_SNAPSHOT, payload, now_ms, result)

    # -- shutdown / status -------------------------------------------------------

    def shutdown(self, now_ms: float) -> HandleResult:
        """Stop every active stream and mark all connections to close once
        their queues flush; pending analysis jobs are the driver's to drain."""
        result = HandleResult()
        for stream_id in sorted(self.streams):
            self.trace("stream_closed", stream_id=stream_id, reason="shutdown")
            self._broadcast_control(MsgType.STREAM_STOP, {"stream_id": stream_id},
                                    now_ms, result)
        self.streams.clear()
        for conn in self.conns.values():
            conn.close_after_flush = True
            result.woken.add(conn.conn_id)
        return result

    def status(self) -> dict:
        counts = self.store.counts()
        roles = {"edge": 0, "consumer": 0, "dashboard": 0}
        for conn in self.conns.values():
            if conn.authenticated and conn.role in roles:
                roles[conn.role] += 1
        return {
            "uptime_s": round(time.time() - self.started_at, 1),
            "drones": counts["drones"],
            "missions": counts["missions"],
            "users": counts["users"],
            "rules": counts["rules"],
            "detections": counts["detections"],
            "alerts": counts["alerts"],
            "connected": roles,
            "active_streams": sorted(self.streams),
            "counters": dict(self.counters),
        }

    # -- helpers --------------------------------------------------------------------

    def _by_role(self, role: str) -> list[Connection]:
        return [c for c in self.conns.values() if c.role == role and c.authenticated]

    def _broadcast_control(self, msg_type: MsgType, payload: dict, now_ms: float,
                           result: HandleResult, stream_id: str | None = None) -> None:
        for conn in self._by_role(ROLE_CONSUMER) + self._by_role(ROLE_DASHBOARD):
            if stream_id is not None and not conn.wants_stream(stream_id):
                continue
            self.enqueue(conn, msg_type, payload, now_ms, result)

    def _snapshot(self, conn: Connection) -> dict:
        alerts = [alert_to_doc(a) for a in self.store.list_alerts(limit=200)]
        rules = []
        missions = []
        if conn.mission_id:
            mission = self.store.get_mission(conn.mission_id)
            if mission is not None:
                missions.append({
                    "mission_id": mission.mission_id,
                    "name": mission.name,
                    "status": mission.status.value,
                    "drone_ids": list(mission.drone_ids),
                    "user_ids": list(mission.user_ids),
                })
                rules = [rule_to_doc(r) for r in self.store.rules_for_mission(conn.mission_id)]
        return {
            "alerts": alerts,
            "rules": rules,
            "missions": missions,
            "active_streams": sorted(self.streams),
            "metrics": self.latest_metrics,
        }
