"""Embedded relational store for the six mission-control tables.

SQLite by default (file path or ":memory:"), with foreign keys enforced.
Alert status changes are transactional and journaled to a history table so
an integrity sweep can prove no alert ever moved backward.
"""

from __future__ import annotations

import json
import logging
import sqlite3
import threading
from dataclasses import dataclass

from .domain import (
    Alert,
    AlertStatus,
    AlertType,
    Detection,
    Drone,
    Mission,
    MissionStatus,
    Rule,
    Severity,
    User,
    ValidationError,
    transition_alert,
)

logger = logging.getLogger(__name__)

_SCHEMA = """
PRAGMA foreign_keys = ON;
CREATE TABLE IF NOT EXISTS users (
    user_id TEXT PRIMARY KEY,
    display_name TEXT NOT NULL,
    auth_token_hash TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS missions (
    mission_id TEXT PRIMARY KEY,
    name TEXT NOT NULL,
    status TEXT NOT NULL CHECK (status IN ('planned','active','complete'))
);
CREATE TABLE IF NOT EXISTS mission_users (
    mission_id TEXT NOT NULL REFERENCES missions(mission_id),
    user_id TEXT NOT NULL REFERENCES users(user_id),
    PRIMARY KEY (mission_id, user_id)
);
CREATE TABLE IF NOT EXISTS drones (
    drone_id TEXT PRIMARY KEY,
    secret_token TEXT NOT NULL,
    label TEXT NOT NULL DEFAULT '',
    mission_id TEXT REFERENCES missions(mission_id)
);
CREATE TABLE IF NOT EXISTS rules (
    rule_id TEXT PRIMARY KEY,
    mission_id TEXT NOT NULL REFERENCES missions(mission_id),
    target_classes TEXT NOT NULL,
    min_confidence REAL NOT NULL CHECK (min_confidence BETWEEN 0 AND 1),
    severity TEXT NOT NULL CHECK (severity IN ('info','warning','critical')),
    prompt_template TEXT NOT NULL,
    enabled INTEGER NOT NULL DEFAULT 1
);
CREATE TABLE IF NOT EXISTS detections (
    detection_id TEXT PRIMARY KEY,
    drone_id TEXT NOT NULL REFERENCES drones(drone_id),
    mission_id TEXT NOT NULL REFERENCES missions(mission_id),
    class_label TEXT NOT NULL,
    confidence REAL NOT NULL CHECK (confidence BETWEEN 0 AND 1),
    x REAL NOT NULL, y REAL NOT NULL, w REAL NOT NULL, h REAL NOT NULL,
    orientation_deg REAL NOT NULL,
    capture_ts_ms INTEGER NOT NULL,
    image_ref TEXT NOT NULL DEFAULT ''
);
CREATE TABLE IF NOT EXISTS alerts (
    alert_id TEXT PRIMARY KEY,
    alert_type TEXT NOT NULL CHECK (alert_type IN ('detection','system')),
    severity TEXT NOT NULL CHECK (severity IN ('info','warning','critical')),
    message TEXT NOT NULL,
    timestamp_ms INTEGER NOT NULL,
    status TEXT NOT NULL CHECK (status IN ('open','acknowledged','resolved')),
    detection_id TEXT REFERENCES detections(detection_id),
    rule_id TEXT REFERENCES rules(rule_id),
    analysis_text TEXT
);
CREATE TABLE IF NOT EXISTS alert_history (
    hist_id INTEGER PRIMARY KEY AUTOINCREMENT,
    alert_id TEXT NOT NULL REFERENCES alerts(alert_id),
    old_status TEXT NOT NULL,
    new_status TEXT NOT NULL,
    ts_ms INTEGER NOT NULL
);
"""

_STATUS_ORDER = {"open": 0, "acknowledged": 1, "resolved": 2}


class StoreError(Exception):
    pass


class DuplicateId(StoreError):
    pass


class ForeignKeyError(StoreError):
    pass


@dataclass
class IntegrityReport:
    dangling: list[str]
    backward_transitions: list[str]

    @property
    def clean(self) -> bool:
        return not self.dangling and not self.backward_transitions


class TelemetryStore:
    """Single-writer transactional access to the mission tables.

    One connection guarded by a lock: alert transitions need a
    read-check-write cycle that must not interleave.
    """

    def __init__(self, path: str = ":memory:"):
        self.path = path
        self._conn = sqlite3.connect(path, check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._lock = threading.RLock()
        with self._lock, self._conn:
            self._conn.executescript(_SCHEMA)
        self._counters: dict[str, int] = {}

    def close(self) -> None:
        self._conn.close()

    def next_id(self, kind: str) -> str:
        """Deterministic monotonic ids: det-000001, alert-000001, ..."""
        with self._lock:
            n = self._counters.get(kind, 0) + 1
            self._counters[kind] = n
            return f"{kind}-{n:06d}"

    # -- creation -----------------------------------------------------------

    def create_user(self, user: User) -> None:
        with self._lock, self._conn:
            try:
                self._conn.execute(
                    "INSERT INTO users VALUES (?,?,?)",
                    (user.user_id, user.display_name, user.auth_token_hash),
                )
                for mid in user.mission_ids:
                    self._conn.execute(
                        "INSERT OR IGNORE INTO mission_users VALUES (?,?)", (mid, user.user_id)
                    )
            except sqlite3.IntegrityError as exc:
                raise _map_integrity(exc, user.user_id) from None

    def create_mission(self, mission: Mission) -> None:
        with self._lock, self._conn:
            try:
                self._conn.execute(
                    "INSERT INTO missions VALUES (?,?,?)",
                    (mission.mission_id, mission.name, mission.status.value),
                )
                for uid in mission.user_ids:
                    self._conn.execute(
                        "INSERT OR IGNORE INTO mission_users VALUES (?,?)",
                        (mission.mission_id, uid),
                    )
            except sqlite3.IntegrityError as exc:
                raise _map_integrity(exc, mission.mission_id) from None

    def create_drone(self, drone: Drone) -> None:
        drone.validate()
        with self._lock, self._conn:
            try:
                self._conn.execute(
                    "INSERT INTO drones VALUES (?,?,?,?)",
                    (drone.drone_id, drone.secret_token, drone.label, drone.mission_id),
                )
            except sqlite3.IntegrityError as exc:
                raise _map_integrity(exc, drone.drone_id) from None

    def upsert_rule(self, rule: Rule) -> None:
        rule.validate()
        with self._lock, self._conn:
            try:
                self._conn.execute(
                    "INSERT INTO rules VALUES (?,?,?,?,?,?,?) "
                    "ON CONFLICT(rule_id) DO UPDATE SET mission_id=excluded.mission_id,"
                    " target_classes=excluded.target_classes,"
                    " min_confidence=excluded.min_confidence, severity=excluded.severity,"
                    " prompt_template=excluded.prompt_template, enabled=excluded.enabled",
                    (
                        rule.rule_id,
                        rule.mission_id,
                        json.dumps(sorted(rule.target_classes)),
                        rule.min_confidence,
                        rule.severity.value,
                        rule.prompt_template,
                        int(rule.enabled),
                    ),
                )
            except sqlite3.IntegrityError as exc:
                raise _map_integrity(exc, rule.rule_id) from None

    def insert_detection(self, det: Detection) -> None:
        det.validate()
        with self._lock, self._conn:
            try:
                self._conn.execute(
                    "INSERT INTO detections VALUES (?,?,?,?,?,?,?,?,?,?,?,?)",
                    (
                        det.detection_id, det.drone_id, det.mission_id, det.class_label,
                        det.confidence, det.x, det.y, det.w, det.h,
                        det.orientation_deg, det.capture_ts_ms, det.image_ref,
                    ),
                )
            except sqlite3.IntegrityError as exc:
                raise _map_integrity(exc, det.detection_id) from None

    def insert_alert(self, alert: Alert) -> None:
        with self._lock, self._conn:
            try:
                self._conn.execute(
                    "INSERT INTO alerts VALUES (?,?,?,?,?,?,?,?,?)",
                    (
                        alert.alert_id, alert.alert_type.value, alert.severity.value,
                        alert.message, alert.timestamp_ms, alert.status.value,
                        alert.detection_id, alert.rule_id, alert.analysis_text,
                    ),
                )
            except sqlite3.IntegrityError as exc:
                raise _map_integrity(exc, alert.alert_id) from None

    # -- reads --------------------------------------------------------------

    def get_drone(self, drone_id: str) -> Drone | None:
        row = self._one("SELECT * FROM drones WHERE drone_id=?", (drone_id,))
        if row is None:
            return None
        return Drone(row["drone_id"], row["secret_token"], row["label"], row["mission_id"])

    def get_user_by_token_hash(self, token_hash: str) -> User | None:
        row = self._one("SELECT * FROM users WHERE auth_token_hash=?", (token_hash,))
        if row is None:
            return None
        mids = [
            r["mission_id"]
            for r in self._all(
                "SELECT mission_id FROM mission_users WHERE user_id=?", (row["user_id"],)
            )
        ]
        return User(row["user_id"], row["display_name"], row["auth_token_hash"], tuple(mids))

    def get_mission(self, mission_id: str) -> Mission | None:
        row = self._one("SELECT * FROM missions WHERE mission_id=?", (mission_id,))
        if row is None:
            return None
        drones = [r["drone_id"] for r in self._all(
            "SELECT drone_id FROM drones WHERE mission_id=? ORDER BY drone_id", (mission_id,))]
        users = [r["user_id"] for r in self._all(
            "SELECT user_id FROM mission_users WHERE mission_id=? ORDER BY user_id", (mission_id,))]
        rules = [r["rule_id"] for r in self._all(
            "SELECT rule_id FROM rules WHERE mission_id=? ORDER BY rule_id", (mission_id,))]
        return Mission(
            mission_id=row["mission_id"],
            name=row["name"],
            drone_ids=tuple(drones),
            user_ids=tuple(users),
            rule_ids=tuple(rules),
            status=MissionStatus(row["status"]),
        )

    def rules_for_mission(self, mission_id: str) -> list[Rule]:
        rows = self._all(
            "SELECT * FROM rules WHERE mission_id=? ORDER BY rule_id", (mission_id,)
        )
        return [_row_to_rule(r) for r in rows]

    def get_rule(self, rule_id: str) -> Rule | None:
        row = self._one("SELECT * FROM rules WHERE rule_id=?", (rule_id,))
        return _row_to_rule(row) if row is not None else None

    def get_detection(self, detection_id: str) -> Detection | None:
        row = self._one("SELECT * FROM detections WHERE detection_id=?", (detection_id,))
        if row is None:
            return None
        return Detection(
            detection_id=row["detection_id"], drone_id=row["drone_id"],
            mission_id=row["mission_id"], class_label=row["class_label"],
            confidence=row["confidence"], x=row["x"], y=row["y"], w=row["w"], h=row["h"],
            orientation_deg=row["orientation_deg"], capture_ts_ms=row["capture_ts_ms"],
            image_ref=row["image_ref"],
        )

    def get_alert(self, alert_id: str) -> Alert | None:
        row = self._one("SELECT * FROM alerts WHERE alert_id=?", (alert_id,))
        return _row_to_alert(row) if row is not None else None

    def list_alerts(self, limit: int = 200) -> list[Alert]:
        rows = self._all(
            "SELECT * FROM alerts ORDER BY timestamp_ms DESC, alert_id DESC LIMIT ?", (limit,)
        )
        return [_row_to_alert(r) for r in rows]

    def counts(self) -> dict[str, int]:
        out = {}
        for table in ("users", "drones", "missions", "rules", "detections", "alerts"):
            out[table] = self._one(f"SELECT COUNT(*) AS n FROM {table}", ())["n"]
        return out

    # -- mutation -----------------------------------------------------------

    def apply_alert_action(self, alert_id: str, action: str, now_ms: int) -> Alert:
        """Transition an alert under the store lock; journals the change.

        Raises IllegalTransition (state machine) or StoreError (missing id).
        """
        with self._lock, self._conn:
            row = self._conn.execute(
                "SELECT * FROM alerts WHERE alert_id=?", (alert_id,)
            ).fetchone()
            if row is None:
                raise StoreError(f"no such alert: {alert_id}")
            current = _row_to_alert(row)
            updated = transition_alert(current, action)  # may raise IllegalTransition
            self._conn.execute(
                "UPDATE alerts SET status=? WHERE alert_id=?",
                (updated.status.value, alert_id),
            )
            self._conn.execute(
                "INSERT INTO alert_history (alert_id, old_status, new_status, ts_ms) "
                "VALUES (?,?,?,?)",
                (alert_id, current.status.value, updated.status.value, now_ms),
            )
            return updated

    def set_analysis_text(self, alert_id: str, text: str) -> None:
        with self._lock, self._conn:
            cur = self._conn.execute(
                "UPDATE alerts SET analysis_text=? WHERE alert_id=?", (text, alert_id)
            )
            if cur.rowcount == 0:
                raise StoreError(f"no such alert: {alert_id}")

    # -- integrity ----------------------------------------------------------

    def integrity_sweep(self) -> IntegrityReport:
        """Cross-table referential check plus alert-history direction check."""
        dangling: list[str] = []
        queries = [
            ("detection->drone", "SELECT d.detection_id FROM detections d "
             "LEFT JOIN drones dr ON d.drone_id=dr.drone_id WHERE dr.drone_id IS NULL"),
            ("detection->mission", "SELECT d.detection_id FROM detections d "
             "LEFT JOIN missions m ON d.mission_id=m.mission_id WHERE m.mission_id IS NULL"),
            ("alert->detection", "SELECT a.alert_id FROM alerts a "
             "WHERE a.detection_id IS NOT NULL AND a.detection_id NOT IN "
             "(SELECT detection_id FROM detections)"),
            ("alert->rule", "SELECT a.alert_id FROM alerts a "
             "WHERE a.rule_id IS NOT NULL AND a.rule_id NOT IN (SELECT rule_id FROM rules)"),
            ("rule->mission", "SELECT r.rule_id FROM rules r "
             "LEFT JOIN missions m ON r.mission_id=m.mission_id WHERE m.mission_id IS NULL"),
            ("drone->mission", "SELECT d.drone_id FROM drones d "
             "WHERE d.mission_id IS NOT NULL AND d.mission_id NOT IN "
             "(SELECT mission_id FROM missions)"),
            ("mission_user->user", "SELECT mu.mission_id || '/' || mu.user_id FROM mission_users mu "
             "WHERE mu.user_id NOT IN (SELECT user_id FROM users)"),
            ("mission_user->mission", "SELECT mu.mission_id || '/' || mu.user_id FROM mission_users mu "
             "WHERE mu.mission_id NOT IN (SELECT mission_id FROM missions)"),
        ]
        with self._lock:
            for name, sql in queries:
                for row in self._conn.execute(sql):
                    dangling.append(f"{name}: {row[0]}")
            backward: list[str] = []
            hist = self._conn.execute(
                "SELECT alert_id, old_status, new_status, hist_id FROM alert_history "
                "ORDER BY alert_id, hist_id"
            ).fetchall()
        last_by_alert: dict[str, str] = {}
        for alert_id, old, new, hist_id in hist:
            if _STATUS_ORDER[new] <= _STATUS_ORDER[old]:
                backward.append(f"alert {alert_id} hist {hist_id}: {old} -> {new}")
            prev = last_by_alert.get(alert_id)
            if prev is not None and _STATUS_ORDER[old] < _STATUS_ORDER[prev]:
                backward.append(f"alert {alert_id} hist {hist_id}: resumed from {old} after {prev}")
            last_by_alert[alert_id] = new
        return IntegrityReport(dangling=dangling, backward_transitions=backward)

    # -- helpers ------------------------------------------------------------

    def _one(self, sql: str, params: tuple) -> sqlite3.Row | None:
        with self._lock:
            return self._conn.execute(sql, params).fetchone()

    def _all(self, sql: str, params: tuple) -> list[sqlite3.Row]:
        with self._lock:
            return self._conn.execute(sql, params).fetchall()


def _map_integrity(exc: sqlite3.IntegrityError, record_id: str) -> StoreError:
    text = str(exc)
    if "FOREIGN KEY" in text:
        return ForeignKeyError(f"{record_id}: {text}")
    if "UNIQUE" in text:
        return DuplicateId(f"{record_id}: {text}")
    return StoreError(f"{record_id}: {text}")


def _row_to_rule(row: sqlite3.Row) -> Rule:
    return Rule(
        rule_id=row["rule_id"],
        mission_id=row["mission_id"],
        target_classes=frozenset(json.loads(row["target_classes"])),
        min_confidence=row["min_confidence"],
        severity=Severity(row["severity"]),
        prompt_template=row["prompt_template"],
        enabled=bool(row["enabled"]),
    )


def _row_to_alert(row: sqlite3.Row) -> Alert:
    return Alert(
        alert_id=row["alert_id"],
        alert_type=AlertType(row["alert_type"]),
        severity=Severity(row["severity"]),
        message=row["message"],
        timestamp_ms=row["timestamp_ms"],
        status=AlertStatus(row["status"]),
        detection_id=row["detection_id"],
        rule_id=row["rule_id"],
        analysis_text=row["analysis_text"],
    )


def alert_to_doc(a: Alert) -> dict:
    """Wire/JSON form of an alert (ALERT_EVENT payload, snapshots)."""
    return {
        "alert_id": a.alert_id,
        "alert_type": a.alert_type.value,
        "severity": a.severity.value,
        "message": a.message,
        "timestamp_ms": a.timestamp_ms,
        "status": a.status.value,
        "detection_id": a.detection_id,
        "rule_id": a.rule_id,
        "analysis_text": a.analysis_text,
    }


def rule_to_doc(r: Rule) -> dict:
    return {
        "rule_id": r.rule_id,
        "mission_id": r.mission_id,
        "target_classes": sorted(r.target_classes),
        "min_confidence": r.min_confidence,
        "severity": r.severity.value,
        "prompt_template": r.prompt_template,
        "enabled": r.enabled,
    }


def rule_from_doc(doc: dict) -> Rule:
    try:
        rule = Rule(
            rule_id=str(doc["rule_id"]),
            mission_id=str(doc["mission_id"]),
            target_classes=frozenset(str(c) for c in doc["target_classes"]),
            min_confidence=float(doc["min_confidence"]),
            severity=Severity(doc["severity"]),
            prompt_template=str(doc.get("prompt_template", "Describe the {class}.")),
            enabled=bool(doc.get("enabled", True)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"bad rule document: {exc}") from None
    rule.validate()
    return rule
