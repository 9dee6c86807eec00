"""Scenario schema parsing and its diagnostics."""

from pathlib import Path

import pytest

from skywatch.scenario import ScenarioError, load_scenario, parse_scenario

SCENARIOS = Path(__file__).parent.parent / "scenarios"


def minimal_doc(**overrides):
    doc = {
        "schema": 1,
        "duration_ms": 10_000,
        "drone": {"drone_id": "drone-1", "token": "secret"},
    }
    doc.update(overrides)
    return doc


def test_shipped_scenarios_parse():
    for path in sorted(SCENARIOS.glob("*.yaml")):
        scenario = load_scenario(path)
        assert scenario.duration_ms > 0
        assert scenario.edges


def test_minimal_defaults():
    sc = parse_scenario(minimal_doc())
    assert sc.edges[0].drone_id == "drone-1"
    assert sc.edges[0].preset == "ultrafast"
    assert sc.links["edge_video"].bandwidth_bps == 5_000_000
    assert sc.provider_latency_ms == 2_100.0
    assert sc.user_token == "operator-token"


def test_schema_version_required():
    with pytest.raises(ScenarioError, match="schema"):
        parse_scenario(minimal_doc(schema=2))
    with pytest.raises(ScenarioError, match="schema"):
        parse_scenario({"duration_ms": 1000})


def test_missing_drone_diagnosed():
    with pytest.raises(ScenarioError, match="drone"):
        parse_scenario({"schema": 1, "duration_ms": 1000})


def test_object_field_diagnostics_name_the_path():
    doc = minimal_doc()
    doc["drone"]["objects"] = [
        {"t_ms": 0, "class": "person", "x": 0.5, "y": 0.5, "w": 2.0, "h": 0.2},
    ]
    with pytest.raises(ScenarioError, match=r"objects\[0\]\.w"):
        parse_scenario(doc)


def test_object_center_must_keep_box_inside():
    doc = minimal_doc()
    doc["drone"]["objects"] = [
        {"t_ms": 0, "class": "person", "x": 0.99, "y": 0.5, "w": 0.2, "h": 0.2},
    ]
    with pytest.raises(ScenarioError, match=r"objects\[0\]\.x"):
        parse_scenario(doc)


def test_unknown_preset_diagnosed():
    doc = minimal_doc()
    doc["drone"]["preset"] = "turbo"
    with pytest.raises(ScenarioError, match="preset"):
        parse_scenario(doc)


def test_unknown_link_name_diagnosed():
    doc = minimal_doc(network={"uplink": {}})
    with pytest.raises(ScenarioError, match="network.uplink"):
        parse_scenario(doc)


def test_bad_rule_severity_diagnosed():
    doc = minimal_doc(rules=[{"rule_id": "r", "target_classes": ["x"],
                              "severity": "fatal"}])
    with pytest.raises(ScenarioError, match=r"rules\[0\]\.severity"):
        parse_scenario(doc)


def test_duplicate_rule_ids_rejected():
    doc = minimal_doc(rules=[
        {"rule_id": "r", "target_classes": ["x"]},
        {"rule_id": "r", "target_classes": ["y"]},
    ])
    with pytest.raises(ScenarioError, match="duplicate"):
        parse_scenario(doc)


def test_multi_drone_block():
    doc = {
        "schema": 1, "duration_ms": 5_000,
        "drones": [
            {"drone_id": "a", "token": "t1"},
            {"drone_id": "b", "token": "t2", "preset": "medium"},
        ],
    }
    sc = parse_scenario(doc)
    assert [e.drone_id for e in sc.edges] == ["a", "b"]
    assert sc.edges[1].preset == "medium"


def test_events_parsed_and_validated():
    doc = minimal_doc(events=[
        {"t_ms": 100, "type": "set_link", "link": "edge_video", "latency_ms": 20},
        {"t_ms": 200, "type": "disconnect", "duration_ms": 500},
    ])
    sc = parse_scenario(doc)
    assert sc.events[0].kind == "set_link"
    assert sc.events[0].spec.latency_ms == 20
    assert sc.events[1].duration_ms == 500
    with pytest.raises(ScenarioError, match="unknown event type"):
        parse_scenario(minimal_doc(events=[{"t_ms": 0, "type": "meteor"}]))


def test_yaml_syntax_error_carries_location(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("schema: 1\nduration_ms: [unterminated\n")
    with pytest.raises(ScenarioError):
        load_scenario(path)
