"""Conditional-streaming gate: the exhaustive transition table and its
safety properties."""

from hypothesis import given, settings
from hypothesis import strategies as st

from skywatch.edge import GateAction, GateEvent, GateState, StreamGate, step_gate

S = GateState
E = GateEvent
A = GateAction

# Hand-written oracle: (state, event) -> (next state, actions). Every pair
# not listed is a no-op self-transition.
ORACLE = {
    (S.IDLE, E.DETECTIONS_FOUND): (S.AWAITING_VERIFICATION, [A.UPLOAD_IMAGE]),
    (S.AWAITING_VERIFICATION, E.VERIFY_POSITIVE): (S.STREAMING, [A.START_STREAM]),
    (S.AWAITING_VERIFICATION, E.VERIFY_NEGATIVE): (S.IDLE, []),
    (S.STREAMING, E.VERIFY_POSITIVE): (S.STREAMING, []),
    (S.STREAMING, E.TIMEOUT): (S.IDLE, [A.STOP_STREAM]),
}


def make_gate(state: GateState) -> StreamGate:
    if state is S.IDLE:
        return StreamGate()
    if state is S.AWAITING_VERIFICATION:
        g, _ = step_gate(StreamGate(), E.DETECTIONS_FOUND, 0.0)
        return g
    g, _ = step_gate(StreamGate(), E.DETECTIONS_FOUND, 0.0)
    g, _ = step_gate(g, E.VERIFY_POSITIVE, 10.0)
    return g


def test_idle_with_empty_detections_is_noop():
    g = StreamGate()
    g2, actions = step_gate(g, E.DETECTIONS_EMPTY, 0.0)
    assert g2 == g
    assert actions == []


def test_detections_found_triggers_upload():
    g2, actions = step_gate(StreamGate(), E.DETECTIONS_FOUND, 0.0)
    assert g2.state is S.AWAITING_VERIFICATION
    assert actions == [A.UPLOAD_IMAGE]


def test_exhaustive_table_matches_oracle():
    for state in GateState:
        for event in GateEvent:
            gate = make_gate(state)
            nxt, actions = step_gate(gate, event, 99.0, "drone-1")
            expected_state, expected_actions = ORACLE.get(
                (state, event), (state, [])
            )
            assert nxt.state is expected_state, f"{state} + {event}"
            assert actions == expected_actions, f"{state} + {event}"


def test_stream_id_present_iff_streaming():
    for state in GateState:
        gate = make_gate(state)
        assert (gate.active_stream_id is not None) == (state is S.STREAMING)


def test_verify_positive_refreshes_streaming_window():
    gate = make_gate(S.STREAMING)
    refreshed, actions = step_gate(gate, E.VERIFY_POSITIVE, 500.0)
    assert refreshed.last_verified_ts_ms == 500.0
    assert refreshed.active_stream_id == gate.active_stream_id
    assert actions == []


def test_new_stream_gets_new_id():
    gate = make_gate(S.STREAMING)
    first = gate.active_stream_id
    gate, actions = step_gate(gate, E.TIMEOUT, 1000.0)
    assert actions == [A.STOP_STREAM]
    gate, _ = step_gate(gate, E.DETECTIONS_FOUND, 1100.0)
    gate, _ = step_gate(gate, E.VERIFY_POSITIVE, 1200.0)
    assert gate.active_stream_id != first


@given(events=st.lists(st.sampled_from(list(GateEvent)), max_size=40))
@settings(max_examples=300, deadline=None)
def test_random_sequences_keep_invariants(events):
    gate = StreamGate()
    t = 0.0
    for event in events:
        t += 10.0
        gate, actions = step_gate(gate, event, t)
        assert gate.state in set(GateState)
        assert (gate.active_stream_id is not None) == (gate.state is S.STREAMING)
        # A stream starts only on a positive verification.
        if A.START_STREAM in actions:
            assert event is E.VERIFY_POSITIVE
        if A.UPLOAD_IMAGE in actions:
            assert event is E.DETECTIONS_FOUND
