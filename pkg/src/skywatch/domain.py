"""Mission data model and the rule evaluation / alert generation logic.

Six record kinds back the whole system: users, drones, missions, rules,
detections, and alerts. Everything here is pure value logic; persistence
and transport live elsewhere.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from enum import Enum

logger = logging.getLogger(__name__)


class Severity(str, Enum):
    INFO = "info"
    WARNING = "warning"
    CRITICAL = "critical"

    @property
    def rank(self) -> int:
        return {"info": 0, "warning": 1, "critical": 2}[self.value]


class AlertStatus(str, Enum):
    OPEN = "open"
    ACKNOWLEDGED = "acknowledged"
    RESOLVED = "resolved"


class AlertType(str, Enum):
    DETECTION = "detection"
    SYSTEM = "system"


class MissionStatus(str, Enum):
    PLANNED = "planned"
    ACTIVE = "active"
    COMPLETE = "complete"


class ValidationError(ValueError):
    """A record violates its structural invariants."""


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class IllegalTransition(ValueError):
    def __init__(self, status: AlertStatus, action: str):
        super().__init__(f"cannot {action} an alert in state {status.value!r}")
        self.status = status
        self.action = action


@dataclass(frozen=True)
class User:
    user_id: str
    display_name: str
    auth_token_hash: str
    mission_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class Drone:
    drone_id: str
    secret_token: str
    label: str = ""
    mission_id: str | None = None

    def validate(self) -> None:
        if not self.drone_id:
            raise ValidationError("drone_id must be non-empty")
        if not self.secret_token:
            raise ValidationError("secret_token must be non-empty")


@dataclass(frozen=True)
class Mission:
    mission_id: str
    name: str
    drone_ids: tuple[str, ...] = ()
    user_ids: tuple[str, ...] = ()
    rule_ids: tuple[str, ...] = ()
    status: MissionStatus = MissionStatus.PLANNED


@dataclass(frozen=True)
class Rule:
    rule_id: str
    mission_id: str
    target_classes: frozenset[str]
    min_confidence: float
    severity: Severity
    prompt_template: str = "Describe the {class} (confidence {confidence})."
    enabled: bool = True

    def validate(self) -> None:
        if not self.target_classes:
            raise ValidationError(f"rule {self.rule_id}: target_classes must be non-empty")
        if not 0.0 <= self.min_confidence <= 1.0:
            raise ValidationError(
                f"rule {self.rule_id}: min_confidence {self.min_confidence} outside [0,1]"
            )


@dataclass(frozen=True)
class Detection:
    detection_id: str
    drone_id: str
    mission_id: str
    class_label: str
    confidence: float
    x: float
    y: float
    w: float
    h: float
    orientation_deg: float
    capture_ts_ms: int
    image_ref: str = ""

    def validate(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0,1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValidationError(f"size ({self.w}, {self.h}) outside (0,1]")
        # Bounding box must stay inside the unit frame.
        eps = 1e-9
        if not (-eps <= self.x - self.w / 2 and self.x + self.w / 2 <= 1 + eps):
            raise ValidationError(f"box x-extent [{self.x - self.w / 2}, {self.x + self.w / 2}] outside frame")
        if not (-eps <= self.y - self.h / 2 and self.y + self.h / 2 <= 1 + eps):
            raise ValidationError(f"box y-extent [{self.y - self.h / 2}, {self.y + self.h / 2}] outside frame")
        if not 0.0 <= self.orientation_deg < 360.0:
            raise ValidationError(f"orientation {self.orientation_deg} outside [0,360)")


@dataclass(frozen=True)
class Alert:
    alert_id: str
    alert_type: AlertType
    severity: Severity
    message: str
    timestamp_ms: int
    status: AlertStatus = AlertStatus.OPEN
    detection_id: str | None = None
    rule_id: str | None = None
    analysis_text: str | None = None


def match_rules(d: Detection, rules: list[Rule]) -> list[Rule]:
    """Enabled rules whose target classes and confidence threshold admit ``d``.

    Output is sorted by rule_id so evaluation order never depends on input
    order.
    """
    hits = [
        r
        for r in rules
        if r.enabled and d.class_label in r.target_classes and d.confidence >= r.min_confidence
    ]
    hits.sort(key=lambda r: r.rule_id)
    return hits


_ALERT_MESSAGE = "{severity}: {cls} detected by {drone} (confidence {conf})"


def generate_alert(d: Detection, r: Rule, now_ms: int, alert_id: str) -> Alert:
    """Produce the open alert for one (detection, matched rule) pair."""
    if not match_rules(d, [r]):
        raise ContractError(
            f"rule {r.rule_id} does not match detection {d.detection_id}"
        )
    message = _ALERT_MESSAGE.format(
        severity=r.severity.value,
        cls=d.class_label,
        drone=d.drone_id,
        conf=repr(d.confidence),
    )
    return Alert(
        alert_id=alert_id,
        alert_type=AlertType.DETECTION,
        severity=r.severity,
        message=message,
        timestamp_ms=now_ms,
        status=AlertStatus.OPEN,
        detection_id=d.detection_id,
        rule_id=r.rule_id,
    )


_PLACEHOLDER = re.compile(r"\{([a-zA-Z_][a-zA-Z0-9_]*)\}")


def render_prompt(r: Rule, d: Detection) -> str:
    """Substitute {class} / {confidence} into the rule's prompt template.

    Unknown placeholders stay verbatim and are reported as a warning;
    numeric values use the shortest round-trip decimal form.
    """
    values = {"class": d.class_label, "confidence": repr(d.confidence)}

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name in values:
            return values[name]
        logger.warning(
            "prompt template for rule %s: unknown placeholder {%s} left verbatim",
            r.rule_id, name,
        )
        return m.group(0)

    return _PLACEHOLDER.sub(sub, r.prompt_template)


_TRANSITIONS: dict[tuple[AlertStatus, str], AlertStatus] = {
    (AlertStatus.OPEN, "acknowledge"): AlertStatus.ACKNOWLEDGED,
    (AlertStatus.ACKNOWLEDGED, "resolve"): AlertStatus.RESOLVED,
}


def transition_alert(a: Alert, action: str) -> Alert:
    """Apply acknowledge/resolve; everything else (including resolve on an
    open alert) is an IllegalTransition."""
    if action not in ("acknowledge", "resolve"):
        raise IllegalTransition(a.status, action)
    nxt = _TRANSITIONS.get((a.status, action))
    if nxt is None:
        raise IllegalTransition(a.status, action)
    return replace(a, status=nxt)


def pick_primary_rule(matched: list[Rule]) -> Rule:
    """The rule whose severity (then rule_id) wins when several match; its
    prompt drives the per-upload analysis request."""
    if not matched:
        raise ContractError("no matched rules")
    return sorted(matched, key=lambda r: (-r.severity.rank, r.rule_id))[0]
