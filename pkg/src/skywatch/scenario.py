"""Scenario files: the scripted input that drives deterministic runs.

A scenario is a YAML document (``schema: 1``) describing the mission
seed data, the ground-truth objects each drone will see, detector/encoder
parameters, the network link model, attached consumers, and timed
network-condition events. See docs/scenario.md for the full schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .domain import Rule, Severity
from .edge import GroundTruthObject
from .simnet import LinkSpec

SCHEMA_VERSION = 1

DEFAULT_LINKS = {
    "edge_control": LinkSpec(latency_ms=0.0, bandwidth_bps=5_000_000.0, jitter_ms=0.0),
    "edge_video": LinkSpec(latency_ms=0.0, bandwidth_bps=5_000_000.0, jitter_ms=0.0),
    "consumer": LinkSpec(latency_ms=400.0, bandwidth_bps=None, jitter_ms=0.0),
}


class ScenarioError(ValueError):
    """Schema violation; message carries the offending field path."""


@dataclass
class DetectorSpec:
    latency_range_ms: tuple[float, float] = (200.0, 400.0)
    precision: float = 1.0
    recall: float = 1.0
    tp_confidence: tuple[float, float] = (0.6, 0.95)
    fp_confidence: tuple[float, float] = (0.3, 0.9)


@dataclass
class SourceSpec:
    frame_period_ms: int = 200
    resolution_profile: str = "4k360"
    pipeline_delay_ms: int = 0


@dataclass
class EdgeSpec:
    drone_id: str
    token: str
    preset: str = "ultrafast"
    stream_timeout_ms: float = 10_000.0
    refresh_upload_interval_ms: float = 2_000.0
    upload_image_bytes: int = 500_000
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    source: SourceSpec = field(default_factory=SourceSpec)
    objects: list[GroundTruthObject] = field(default_factory=list)


@dataclass
class ConsumerSpec:
    consumer_id: str
    role: str = "consumer"  # consumer | dashboard
    display_delay_ms: float = 0.0
    link: LinkSpec | None = None
    streams: list[str] | None = None


@dataclass
class NetEvent:
    t_ms: float
    kind: str  # set_link | disconnect
    link: str | None = None
    drone_id: str | None = None
    spec: LinkSpec | None = None
    duration_ms: float = 1_000.0


@dataclass
class Scenario:
    name: str
    duration_ms: float
    seed: int
    mission_id: str
    mission_name: str
    user_id: str
    user_name: str
    user_token: str
    rules: list[Rule]
    edges: list[EdgeSpec]
    consumers: list[ConsumerSpec]
    links: dict[str, LinkSpec]
    events: list[NetEvent]
    provider_latency_ms: float = 2_100.0


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise ScenarioError(f"{path}.{key}: required field missing")
    return doc[key]


def _as_number(value, path: str, lo: float | None = None, hi: float | None = None) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ScenarioError(f"{path}: expected a number, got {type(value).__name__}")
    v = float(value)
    if lo is not None and v < lo:
        raise ScenarioError(f"{path}: {v} below minimum {lo}")
    if hi is not None and v > hi:
        raise ScenarioError(f"{path}: {v} above maximum {hi}")
    return v


def _as_pair(value, path: str) -> tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ScenarioError(f"{path}: expected [min, max]")
    lo = _as_number(value[0], f"{path}[0]")
    hi = _as_number(value[1], f"{path}[1]")
    if lo > hi:
        raise ScenarioError(f"{path}: min {lo} exceeds max {hi}")
    return (lo, hi)


def _parse_link(doc, path: str) -> LinkSpec:
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: expected a mapping")
    bw = doc.get("bandwidth_bps")
    if bw is not None:
        bw = _as_number(bw, f"{path}.bandwidth_bps", lo=1.0)
    return LinkSpec(
        latency_ms=_as_number(doc.get("latency_ms", 0.0), f"{path}.latency_ms", lo=0.0),
        bandwidth_bps=bw,
        jitter_ms=_as_number(doc.get("jitter_ms", 0.0), f"{path}.jitter_ms", lo=0.0),
    )


def _parse_object(doc, path: str) -> GroundTruthObject:
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: expected a mapping")
    w = _as_number(_require(doc, "w", path), f"{path}.w", lo=1e-6, hi=1.0)
    h = _as_number(_require(doc, "h", path), f"{path}.h", lo=1e-6, hi=1.0)
    x = _as_number(_require(doc, "x", path), f"{path}.x", lo=w / 2, hi=1 - w / 2)
    y = _as_number(_require(doc, "y", path), f"{path}.y", lo=h / 2, hi=1 - h / 2)
    return GroundTruthObject(
        class_label=str(_require(doc, "class", path)),
        x=x, y=y, w=w, h=h,
        orientation_deg=_as_number(doc.get("orientation_deg", 0.0),
                                   f"{path}.orientation_deg", lo=0.0) % 360.0,
        t_ms=int(_as_number(_require(doc, "t_ms", path), f"{path}.t_ms", lo=0.0)),
        duration_ms=int(_as_number(doc.get("duration_ms", 0), f"{path}.duration_ms", lo=0.0)),
    )


def _parse_detector(doc, path: str) -> DetectorSpec:
    if doc is None:
        return DetectorSpec()
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: expected a mapping")
    spec = DetectorSpec()
    if "latency_range_ms" in doc:
        spec.latency_range_ms = _as_pair(doc["latency_range_ms"], f"{path}.latency_range_ms")
    if "precision" in doc:
        spec.precision = _as_number(doc["precision"], f"{path}.precision", 0.0, 1.0)
    if "recall" in doc:
        spec.recall = _as_number(doc["recall"], f"{path}.recall", 0.0, 1.0)
    if "tp_confidence" in doc:
        spec.tp_confidence = _as_pair(doc["tp_confidence"], f"{path}.tp_confidence")
    if "fp_confidence" in doc:
        spec.fp_confidence = _as_pair(doc["fp_confidence"], f"{path}.fp_confidence")
    return spec


def _parse_source(doc, path: str) -> SourceSpec:
    if doc is None:
        return SourceSpec()
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: expected a mapping")
    return SourceSpec(
        frame_period_ms=int(_as_number(doc.get("frame_period_ms", 200),
                                       f"{path}.frame_period_ms", lo=1.0)),
        resolution_profile=str(doc.get("resolution_profile", "4k360")),
        pipeline_delay_ms=int(_as_number(doc.get("pipeline_delay_ms", 0),
                                         f"{path}.pipeline_delay_ms", lo=0.0)),
    )


def _parse_rule(doc, path: str, mission_id: str) -> Rule:
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: expected a mapping")
    classes = _require(doc, "target_classes", path)
    if not isinstance(classes, list) or not classes:
        raise ScenarioError(f"{path}.target_classes: expected a non-empty list")
    severity = str(doc.get("severity", "warning"))
    try:
        sev = Severity(severity)
    except ValueError:
        raise ScenarioError(f"{path}.severity: unknown severity {severity!r}") from None
    rule = Rule(
        rule_id=str(_require(doc, "rule_id", path)),
        mission_id=mission_id,
        target_classes=frozenset(str(c) for c in classes),
        min_confidence=_as_number(doc.get("min_confidence", 0.5),
                                  f"{path}.min_confidence", 0.0, 1.0),
        severity=sev,
        prompt_template=str(doc.get("prompt_template",
                                    "Describe the {class} (confidence {confidence}).")),
        enabled=bool(doc.get("enabled", True)),
    )
    return rule


def _parse_edge(doc, path: str, defaults: dict) -> EdgeSpec:
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: expected a mapping")
    preset = str(doc.get("preset", defaults.get("preset", "ultrafast")))
    if preset not in ("ultrafast", "medium", "slow"):
        raise ScenarioError(f"{path}.preset: unknown preset {preset!r}")
    edge = EdgeSpec(
        drone_id=str(_require(doc, "drone_id", path)),
        token=str(_require(doc, "token", path)),
        preset=preset,
        stream_timeout_ms=_as_number(doc.get("stream_timeout_ms",
                                             defaults.get("stream_timeout_ms", 10_000)),
                                     f"{path}.stream_timeout_ms", lo=1.0),
        refresh_upload_interval_ms=_as_number(
            doc.get("refresh_upload_interval_ms",
                    defaults.get("refresh_upload_interval_ms", 2_000)),
            f"{path}.refresh_upload_interval_ms", lo=1.0),
        upload_image_bytes=int(_as_number(doc.get("upload_image_bytes",
                                                  defaults.get("upload_image_bytes", 500_000)),
                                          f"{path}.upload_image_bytes", lo=1.0)),
        detector=_parse_detector(doc.get("detector", defaults.get("detector_doc")),
                                 f"{path}.detector"),
        source=_parse_source(doc.get("source", defaults.get("source_doc")), f"{path}.source"),
        objects=[_parse_object(o, f"{path}.objects[{i}]")
                 for i, o in enumerate(doc.get("objects", []))],
    )
    return edge


def parse_scenario(doc: dict, name: str = "scenario") -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("top level: expected a mapping")
    version = doc.get("schema")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"schema: expected {SCHEMA_VERSION}, got {version!r}")
    duration = _as_number(_require(doc, "duration_ms", "top level"), "duration_ms", lo=1.0)
    seed = int(_as_number(doc.get("seed", 0), "seed", lo=0.0))

    mission = doc.get("mission", {})
    if not isinstance(mission, dict):
        raise ScenarioError("mission: expected a mapping")
    mission_id = str(mission.get("mission_id", "m-1"))
    mission_name = str(mission.get("name", "scenario mission"))

    user = doc.get("user", {})
    if not isinstance(user, dict):
        raise ScenarioError("user: expected a mapping")

    rules = [
        _parse_rule(r, f"rules[{i}]", mission_id)
        for i, r in enumerate(doc.get("rules", []))
    ]
    rule_ids = [r.rule_id for r in rules]
    if len(set(rule_ids)) != len(rule_ids):
        raise ScenarioError("rules: duplicate rule_id")

    defaults = {
        "preset": doc.get("encoder", {}).get("preset", "ultrafast")
        if isinstance(doc.get("encoder"), dict) else "ultrafast",
        "detector_doc": doc.get("detector"),
        "source_doc": doc.get("source"),
    }
    if isinstance(doc.get("edge"), dict):
        defaults.update({k: doc["edge"][k] for k in
                         ("stream_timeout_ms", "refresh_upload_interval_ms",
                          "upload_image_bytes") if k in doc["edge"]})

    if "drones" in doc:
        drones_doc = doc["drones"]
        if not isinstance(drones_doc, list) or not drones_doc:
            raise ScenarioError("drones: expected a non-empty list")
        edges = [_parse_edge(d, f"drones[{i}]", defaults) for i, d in enumerate(drones_doc)]
    else:
        drone_doc = dict(_require(doc, "drone", "top level"))
        drone_doc.setdefault("objects", doc.get("objects", []))
        edges = [_parse_edge(drone_doc, "drone", defaults)]
    edge_ids = [e.drone_id for e in edges]
    if len(set(edge_ids)) != len(edge_ids):
        raise ScenarioError("drones: duplicate drone_id")

    links = dict(DEFAULT_LINKS)
    net_doc = doc.get("network", {})
    if not isinstance(net_doc, dict):
        raise ScenarioError("network: expected a mapping")
    for key, value in net_doc.items():
        if key not in DEFAULT_LINKS:
            raise ScenarioError(f"network.{key}: unknown link (expected one of "
                                f"{sorted(DEFAULT_LINKS)})")
        links[key] = _parse_link(value, f"network.{key}")

    consumers = []
    for i, c in enumerate(doc.get("consumers", [])):
        if not isinstance(c, dict):
            raise ScenarioError(f"consumers[{i}]: expected a mapping")
        role = str(c.get("role", "consumer"))
        if role not in ("consumer", "dashboard"):
            raise ScenarioError(f"consumers[{i}].role: must be consumer or dashboard")
        streams = c.get("streams")
        if streams is not None and not isinstance(streams, list):
            raise ScenarioError(f"consumers[{i}].streams: expected a list")
        consumers.append(ConsumerSpec(
            consumer_id=str(_require(c, "id", f"consumers[{i}]")),
            role=role,
            display_delay_ms=_as_number(c.get("display_delay_ms", 0.0),
                                        f"consumers[{i}].display_delay_ms", lo=0.0),
            link=_parse_link(c["link"], f"consumers[{i}].link") if "link" in c else None,
            streams=[str(s) for s in streams] if streams else None,
        ))

    events = []
    for i, e in enumerate(doc.get("events", [])):
        if not isinstance(e, dict):
            raise ScenarioError(f"events[{i}]: expected a mapping")
        kind = str(_require(e, "type", f"events[{i}]"))
        t_ms = _as_number(_require(e, "t_ms", f"events[{i}]"), f"events[{i}].t_ms", lo=0.0)
        if kind == "set_link":
            link_name = str(_require(e, "link", f"events[{i}]"))
            if link_name not in DEFAULT_LINKS:
                raise ScenarioError(f"events[{i}].link: unknown link {link_name!r}")
            events.append(NetEvent(
                t_ms=t_ms, kind=kind, link=link_name,
                drone_id=e.get("drone_id"),
                spec=_parse_link({k: v for k, v in e.items()
                                  if k in ("latency_ms", "bandwidth_bps", "jitter_ms")},
                                 f"events[{i}]"),
            ))
        elif kind == "disconnect":
            events.append(NetEvent(
                t_ms=t_ms, kind=kind,
                drone_id=e.get("drone_id"),
                duration_ms=_as_number(e.get("duration_ms", 1000),
                                       f"events[{i}].duration_ms", lo=0.0),
            ))
        else:
            raise ScenarioError(f"events[{i}].type: unknown event type {kind!r}")

    server_doc = doc.get("server", {})
    if not isinstance(server_doc, dict):
        raise ScenarioError("server: expected a mapping")

    return Scenario(
        name=str(doc.get("name", name)),
        duration_ms=duration,
        seed=seed,
        mission_id=mission_id,
        mission_name=mission_name,
        user_id=str(user.get("user_id", "operator")),
        user_name=str(user.get("display_name", "Operator")),
        user_token=str(user.get("token", "operator-token")),
        rules=rules,
        edges=edges,
        consumers=consumers,
        links=links,
        events=events,
        provider_latency_ms=_as_number(server_doc.get("provider_latency_ms", 2_100.0),
                                       "server.provider_latency_ms", lo=0.0),
    )


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    return parse_scenario(doc, name=path.stem)
