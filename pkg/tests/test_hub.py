"""Server hub: verification, alert fanout, stream relay, backpressure,
dashboard control, and shutdown."""

import pytest

from skywatch.domain import Drone, Mission, MissionStatus, Rule, Severity, User
from skywatch.hub import FRAME_QUEUE_CAP, ServerHub, token_hash
from skywatch.objectstore import MemoryObjectStore
from skywatch.protocol import Envelope, MsgType, b64encode_bytes
from skywatch.providers import MockProvider
from skywatch.store import TelemetryStore


def make_hub(provider_latency=50.0):
    store = TelemetryStore(":memory:")
    store.create_mission(Mission("m-1", "watch", status=MissionStatus.ACTIVE))
    store.create_user(User("u-1", "Op", token_hash("op-token"), mission_ids=("m-1",)))
    store.create_drone(Drone("drone-1", "drone-secret", mission_id="m-1"))
    store.upsert_rule(Rule("r-person", "m-1", frozenset({"person"}), 0.5,
                           Severity.CRITICAL,
                           prompt_template="Describe the {class}."))
    hub = ServerHub(store, MemoryObjectStore(), MockProvider(latency_ms=provider_latency))
    return hub


class Driver:
    """Minimal synchronous driver around the hub for tests."""

    def __init__(self, hub):
        self.hub = hub
        self.seqs = {}
        self.now = 0.0

    def send(self, conn_id, msg_type, payload, sender=None):
        self.seqs[conn_id] = self.seqs.get(conn_id, 0) + 1
        env = Envelope(msg_type, sender or conn_id, self.seqs[conn_id],
                       int(self.now), payload)
        self.now += 1
        return self.hub.handle(conn_id, env, self.now)

    def connect_edge(self, conn_id="e-1", drone="drone-1", token="drone-secret"):
        self.hub.register(conn_id)
        return self.send(conn_id, MsgType.HELLO, {"role": "edge", "token": token},
                         sender=drone)

    def connect(self, conn_id, role, token="op-token", **extra):
        self.hub.register(conn_id)
        return self.send(conn_id, MsgType.HELLO,
                         {"role": role, "token": token, **extra})

    def drain(self, conn_id):
        out = []
        while (env := self.hub.next_outbound(conn_id)) is not None:
            out.append(env)
        return out

    def upload(self, conn_id="e-1", detections=None, drone="drone-1", image=b"jpegbytes"):
        payload = {
            "image_data": b64encode_bytes(image),
            "detections": detections if detections is not None else [person_det()],
            "capture_ts_ms": int(self.now),
        }
        return self.send(conn_id, MsgType.IMAGE_UPLOAD, payload, sender=drone)


def person_det(conf=0.72, cls="person"):
    return {"class_label": cls, "confidence": conf, "x": 0.5, "y": 0.5,
            "w": 0.1, "h": 0.2, "orientation_deg": 0.0}


def msgs_of(envs, msg_type):
    return [e for e in envs if e.msg_type is msg_type]


class TestHandshake:
    def test_edge_hello_ack(self):
        d = Driver(make_hub())
        d.connect_edge()
        acks = msgs_of(d.drain("e-1"), MsgType.HELLO_ACK)
        assert acks and acks[0].payload["ok"] is True
        assert d.hub.conns["e-1"].authenticated

    def test_bad_token_rejected_and_closed(self):
        d = Driver(make_hub())
        d.connect_edge(token="wrong")
        conn = d.hub.conns["e-1"]
        assert conn.close_after_flush
        acks = msgs_of(d.drain("e-1"), MsgType.HELLO_ACK)
        assert acks[0].payload["ok"] is False

    def test_unknown_user_rejected(self):
        d = Driver(make_hub())
        d.connect("c-1", "consumer", token="bogus")
        acks = msgs_of(d.drain("c-1"), MsgType.HELLO_ACK)
        assert acks[0].payload["ok"] is False

    def test_messages_before_hello_close_connection(self):
        d = Driver(make_hub())
        d.hub.register("e-1")
        d.send("e-1", MsgType.STREAM_START, {"stream_id": "s"})
        assert d.hub.conns["e-1"].close_after_flush

    def test_dashboard_gets_snapshot_in_ack(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.upload()
        d.connect("dash-1", "dashboard", mission_id="m-1")
        ack = msgs_of(d.drain("dash-1"), MsgType.HELLO_ACK)[0]
        snap = ack.payload["snapshot"]
        assert len(snap["alerts"]) == 1
        assert snap["rules"][0]["rule_id"] == "r-person"
        assert snap["missions"][0]["mission_id"] == "m-1"


class TestUpload:
    def test_verified_upload_creates_alert_and_analysis(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.drain("e-1")
        result = d.upload(detections=[person_det(0.72)])
        assert len(result.jobs) == 1
        job = result.jobs[0]
        assert "person" in job.prompt
        verify = msgs_of(d.drain("e-1"), MsgType.VERIFY_RESULT)[0]
        assert verify.payload["verified"] is True
        assert verify.payload["matched_rule_id"] == "r-person"
        alert = d.hub.store.get_alert(verify.payload["alert_id"])
        assert alert.severity is Severity.CRITICAL
        assert alert.status.value == "open"

    def test_zero_detections_not_verified(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.drain("e-1")
        result = d.upload(detections=[])
        assert result.jobs == []
        verify = msgs_of(d.drain("e-1"), MsgType.VERIFY_RESULT)[0]
        assert verify.payload["verified"] is False
        assert d.hub.store.counts()["alerts"] == 0
        # the image and its (zero) detections are still persisted
        assert d.hub.counters["uploads"] == 1

    def test_alert_count_is_sum_of_rule_matches(self):
        hub = make_hub()
        hub.store.upsert_rule(Rule("r-any", "m-1", frozenset({"person", "vehicle"}),
                                   0.1, Severity.INFO))
        d = Driver(hub)
        d.connect_edge()
        d.drain("e-1")
        # 3 detections x 2 matching rules each = 6 alerts
        d.upload(detections=[person_det(0.9), person_det(0.8), person_det(0.7)])
        assert hub.store.counts()["alerts"] == 6

    def test_invalid_detection_rejects_whole_upload(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.drain("e-1")
        bad = person_det()
        bad["x"] = 0.99  # box spills outside the frame
        d.upload(detections=[person_det(), bad])
        verify = msgs_of(d.drain("e-1"), MsgType.VERIFY_RESULT)[0]
        assert verify.payload["verified"] is False
        assert "error" in verify.payload
        counts = d.hub.store.counts()
        assert counts["detections"] == 0
        assert counts["alerts"] == 0

    def test_unassigned_drone_rejected(self):
        hub = make_hub()
        hub.store.create_drone(Drone("drone-2", "tok2", mission_id=None))
        d = Driver(hub)
        d.connect_edge("e-2", drone="drone-2", token="tok2")
        d.drain("e-2")
        d.upload("e-2", drone="drone-2")
        verify = msgs_of(d.drain("e-2"), MsgType.VERIFY_RESULT)[0]
        assert verify.payload["verified"] is False
        assert "mission" in verify.payload["error"]

    def test_alert_event_fanned_to_consumers_and_dashboards(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.connect("c-1", "consumer")
        d.connect("dash-1", "dashboard")
        d.drain("c-1"), d.drain("dash-1")
        d.upload()
        for conn_id in ("c-1", "dash-1"):
            alerts = msgs_of(d.drain(conn_id), MsgType.ALERT_EVENT)
            assert len(alerts) == 1
            assert alerts[0].payload["alert"]["severity"] == "critical"

    def test_analysis_completion_updates_alert_and_notifies(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.connect("dash-1", "dashboard")
        result = d.upload()
        job = result.jobs[0]
        analysis = d.hub.provider.request(job.image_ref, job.prompt)
        d.hub.apply_analysis(job, analysis, d.now)
        assert d.hub.store.get_alert(job.alert_id).analysis_text == analysis.text
        edge_msgs = msgs_of(d.drain("e-1"), MsgType.ANALYSIS)
        dash_msgs = msgs_of(d.drain("dash-1"), MsgType.ANALYSIS)
        assert edge_msgs and dash_msgs
        assert edge_msgs[0].payload["text"] == analysis.text

    def test_analysis_prompt_uses_highest_severity_rule(self):
        hub = make_hub()
        hub.store.upsert_rule(Rule("r-a-info", "m-1", frozenset({"person"}), 0.1,
                                   Severity.INFO, prompt_template="info prompt"))
        d = Driver(hub)
        d.connect_edge()
        result = d.upload()
        assert "Describe the person" in result.jobs[0].prompt  # critical rule wins


class TestStreams:
    def start_stream(self, d, stream_id="drone-1-stream-0001"):
        d.send("e-1", MsgType.STREAM_START, {"stream_id": stream_id}, sender="drone-1")
        return stream_id

    def frame(self, d, stream_id, seq):
        payload = {"stream_id": stream_id, "frame_seq": seq,
                   "frame_data": b64encode_bytes(b"x" * 64),
                   "encode_ts_ms": int(d.now), "capture_ts_ms": int(d.now) - 100}
        return d.send("e-1", MsgType.VIDEO_FRAME, payload, sender="drone-1")

    def test_fanout_counts_deliveries(self):
        d = Driver(make_hub())
        d.connect_edge()
        sid = self.start_stream(d)
        # no consumers -> dropped
        self.frame(d, sid, 1)
        assert d.hub.counters["frames_relayed"] == 0
        d.connect("c-1", "consumer")
        d.connect("c-2", "consumer")
        self.frame(d, sid, 2)
        assert d.hub.counters["frames_relayed"] == 2
        for cid in ("c-1", "c-2"):
            frames = msgs_of(d.drain(cid), MsgType.VIDEO_FRAME)
            assert [f.payload["frame_seq"] for f in frames] == [2]

    def test_unknown_stream_dropped_with_metric(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.connect("c-1", "consumer")
        self.frame(d, "ghost-stream", 1)
        assert d.hub.counters["unknown_stream_frames"] == 1
        assert msgs_of(d.drain("c-1"), MsgType.VIDEO_FRAME) == []

    def test_stalled_consumer_drops_oldest_frames_only(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.connect("c-1", "consumer")
        d.drain("c-1")
        sid = self.start_stream(d)
        d.upload()  # one control message that must never be dropped
        for seq in range(1, FRAME_QUEUE_CAP + 5):
            self.frame(d, sid, seq)
        conn = d.hub.conns["c-1"]
        assert conn.frames_dropped == 4
        envs = d.drain("c-1")
        frames = msgs_of(envs, MsgType.VIDEO_FRAME)
        assert len(frames) == FRAME_QUEUE_CAP
        # oldest were dropped: the survivors are the most recent seqs
        assert [f.payload["frame_seq"] for f in frames] == list(range(5, 13))
        assert len(msgs_of(envs, MsgType.ALERT_EVENT)) == 1
        assert len(msgs_of(envs, MsgType.STREAM_START)) == 1

    def test_stream_filter_respected(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.connect("c-1", "consumer", streams=["other-stream"])
        d.drain("c-1")
        sid = self.start_stream(d)
        self.frame(d, sid, 1)
        envs = d.drain("c-1")
        assert msgs_of(envs, MsgType.VIDEO_FRAME) == []
        assert msgs_of(envs, MsgType.STREAM_START) == []

    def test_late_consumer_learns_active_streams(self):
        d = Driver(make_hub())
        d.connect_edge()
        sid = self.start_stream(d)
        d.connect("c-late", "consumer")
        starts = msgs_of(d.drain("c-late"), MsgType.STREAM_START)
        assert [s.payload["stream_id"] for s in starts] == [sid]

    def test_edge_disconnect_stops_streams_for_consumers(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.connect("c-1", "consumer")
        sid = self.start_stream(d)
        d.drain("c-1")
        d.hub.disconnect("e-1", d.now)
        stops = msgs_of(d.drain("c-1"), MsgType.STREAM_STOP)
        assert [s.payload["stream_id"] for s in stops] == [sid]
        assert sid not in d.hub.streams

    def test_shutdown_emits_stream_stop_everywhere(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.connect("c-1", "consumer")
        sid = self.start_stream(d)
        d.drain("c-1")
        d.hub.shutdown(d.now)
        stops = msgs_of(d.drain("c-1"), MsgType.STREAM_STOP)
        assert [s.payload["stream_id"] for s in stops] == [sid]
        assert all(c.close_after_flush for c in d.hub.conns.values())


class TestDashboardControl:
    def test_ack_round_trip(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.connect("dash-1", "dashboard")
        d.upload()
        alert_id = d.hub.store.list_alerts()[0].alert_id
        d.drain("dash-1")
        d.send("dash-1", MsgType.ALERT_ACK,
               {"alert_id": alert_id, "action": "acknowledge"})
        events = msgs_of(d.drain("dash-1"), MsgType.ALERT_EVENT)
        assert events[-1].payload["alert"]["status"] == "acknowledged"

    def test_illegal_ack_reports_error_to_requester_only(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.connect("dash-1", "dashboard")
        d.connect("dash-2", "dashboard")
        d.upload()
        alert_id = d.hub.store.list_alerts()[0].alert_id
        d.drain("dash-1"), d.drain("dash-2")
        d.send("dash-1", MsgType.ALERT_ACK, {"alert_id": alert_id, "action": "resolve"})
        mine = msgs_of(d.drain("dash-1"), MsgType.ALERT_EVENT)
        theirs = msgs_of(d.drain("dash-2"), MsgType.ALERT_EVENT)
        assert mine and "ack_error" in mine[-1].payload
        assert mine[-1].payload["alert"]["status"] == "open"
        assert theirs == []

    def test_rule_update_changes_future_verdicts(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.connect("dash-1", "dashboard")
        d.drain("e-1")
        # disable the person rule
        rule_doc = {"rule_id": "r-person", "mission_id": "m-1",
                    "target_classes": ["person"], "min_confidence": 0.5,
                    "severity": "critical", "enabled": False}
        d.send("dash-1", MsgType.RULE_UPDATE, {"rule": rule_doc})
        echo = msgs_of(d.drain("dash-1"), MsgType.RULE_UPDATE)
        assert echo and echo[-1].payload["rule"]["enabled"] is False
        d.upload()
        verify = msgs_of(d.drain("e-1"), MsgType.VERIFY_RESULT)[0]
        assert verify.payload["verified"] is False

    def test_rule_update_requires_mission_membership(self):
        hub = make_hub()
        hub.store.create_mission(Mission("m-2", "other"))
        d = Driver(hub)
        d.connect("dash-1", "dashboard")
        d.drain("dash-1")
        rule_doc = {"rule_id": "r-x", "mission_id": "m-2",
                    "target_classes": ["person"], "min_confidence": 0.5,
                    "severity": "info"}
        d.send("dash-1", MsgType.RULE_UPDATE, {"rule": rule_doc})
        echo = msgs_of(d.drain("dash-1"), MsgType.RULE_UPDATE)
        assert "error" in echo[-1].payload
        assert hub.store.get_rule("r-x") is None

    def test_invalid_rule_document_rejected(self):
        d = Driver(make_hub())
        d.connect("dash-1", "dashboard")
        d.drain("dash-1")
        d.send("dash-1", MsgType.RULE_UPDATE,
               {"rule": {"rule_id": "r-bad", "mission_id": "m-1",
                         "target_classes": [], "min_confidence": 2.0,
                         "severity": "critical"}})
        echo = msgs_of(d.drain("dash-1"), MsgType.RULE_UPDATE)
        assert "error" in echo[-1].payload


class TestMetricsAndStatus:
    def test_metrics_relayed_to_dashboards(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.connect("dash-1", "dashboard")
        d.drain("dash-1")
        d.send("e-1", MsgType.METRICS_SNAPSHOT,
               {"gate_state": "Streaming", "cpu_fraction": 0.99}, sender="drone-1")
        relayed = msgs_of(d.drain("dash-1"), MsgType.METRICS_SNAPSHOT)
        assert relayed[0].payload["drone_id"] == "drone-1"
        assert d.hub.latest_metrics["drone-1"]["cpu_fraction"] == 0.99

    def test_status_counts(self):
        hub = make_hub()
        status = hub.status()
        assert status["drones"] == 1
        assert status["missions"] == 1
        assert status["connected"] == {"edge": 0, "consumer": 0, "dashboard": 0}
        d = Driver(hub)
        d.connect_edge()
        d.connect("c-1", "consumer")
        status = hub.status()
        assert status["connected"]["edge"] == 1
        assert status["connected"]["consumer"] == 1

    def test_empty_database_status(self):
        hub = ServerHub(TelemetryStore(":memory:"), MemoryObjectStore(), MockProvider())
        status = hub.status()
        assert status["drones"] == 0
        assert status["missions"] == 0


class TestSeqHandling:
    def test_regressed_seq_dropped_not_fatal(self):
        d = Driver(make_hub())
        d.connect_edge()
        d.drain("e-1")
        env = Envelope(MsgType.IMAGE_UPLOAD, "drone-1", 1, int(d.now), {
            "image_data": b64encode_bytes(b"img"), "detections": [],
            "capture_ts_ms": 0,
        })
        d.hub.handle("e-1", env, d.now)  # seq 1 after hello's seq 1 -> regression
        assert d.hub.counters["messages_dropped_seq"] == 1
        assert d.hub.counters["uploads"] == 0
        # connection still usable at higher seq
        d.seqs["e-1"] = 5
        d.upload()
        assert d.hub.counters["uploads"] == 1
