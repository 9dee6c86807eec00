"""Shared scenario-document builders for harness-level tests."""

import pytest

from skywatch.harness import run_scenario
from skywatch.scenario import parse_scenario


def scenario_doc(objects=None, duration_ms=20_000, seed=7, rules=None,
                 consumers=None, detector=None, network=None, **extra):
    doc = {
        "schema": 1,
        "duration_ms": duration_ms,
        "seed": seed,
        "mission": {"mission_id": "m-1", "name": "test"},
        "user": {"user_id": "op", "display_name": "Op", "token": "op-token"},
        "drone": {
            "drone_id": "drone-1",
            "token": "drone-secret",
            "objects": objects if objects is not None else [],
        },
        "detector": detector or {
            "latency_range_ms": [300, 300],
            "precision": 1.0,
            "recall": 1.0,
            "tp_confidence": [0.72, 0.72],
        },
        "rules": rules if rules is not None else [{
            "rule_id": "r-person", "target_classes": ["person"],
            "min_confidence": 0.5, "severity": "critical",
        }],
        "consumers": consumers if consumers is not None else [
            {"id": "vr-1", "role": "consumer"},
            {"id": "dash-1", "role": "dashboard"},
        ],
    }
    if network is not None:
        doc["network"] = network
    doc.update(extra)
    return doc


def person(t_ms, duration_ms=0, cls="person"):
    return {"t_ms": t_ms, "class": cls, "x": 0.5, "y": 0.5, "w": 0.1, "h": 0.2,
            "orientation_deg": 45, "duration_ms": duration_ms}


def run_doc(doc, seed=None):
    return run_scenario(parse_scenario(doc), seed=seed)


@pytest.fixture(scope="module")
def streaming_run():
    """One person visible for 6 s; stream starts, runs, and times out."""
    doc = scenario_doc(objects=[person(2_000, duration_ms=6_000)],
                       duration_ms=25_000)
    return run_doc(doc)
