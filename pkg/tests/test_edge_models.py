"""Detector statistics and the encoder throughput model."""

import random

import pytest

from skywatch.edge import (
    DetectorModel,
    EncoderModel,
    Frame,
    FrameSource,
    GroundTruthObject,
    synthetic_bytes,
)


def obj(cls="person", t_ms=0, duration=0):
    return GroundTruthObject(class_label=cls, x=0.5, y=0.5, w=0.1, h=0.2,
                             orientation_deg=0.0, t_ms=t_ms, duration_ms=duration)


def frame_with(objects, ts=0, fid=0):
    return Frame(frame_id=fid, capture_ts_ms=ts, objects=tuple(objects))


class TestDetector:
    def test_perfect_detector_reports_ground_truth_exactly(self):
        model = DetectorModel(precision=1.0, recall=1.0, rng_seed=1)
        gt = [obj(), obj("vehicle")]
        dets, latency = model.detect(frame_with(gt))
        assert [(d.class_label, d.x, d.y) for d in dets] == \
            [(o.class_label, o.x, o.y) for o in gt]
        assert 200 <= latency <= 400

    def test_zero_recall_reports_nothing_true(self):
        model = DetectorModel(precision=0.5, recall=0.0, rng_seed=2)
        dets, _ = model.detect(frame_with([obj()] * 5))
        assert dets == []

    def test_latency_range_respected(self):
        model = DetectorModel(latency_range_ms=(250, 350), rng_seed=3)
        for _ in range(50):
            _, latency = model.detect(frame_with([obj()]))
            assert 250 <= latency <= 350

    def test_statistics_converge(self):
        """Pooled precision/recall over many scripted objects approach the
        configured operating point; true positives are exact copies of the
        ground truth, which the matching below exploits."""
        model = DetectorModel(precision=0.72, recall=0.9, rng_seed=42)
        rng = random.Random(0)
        total_gt = 0
        tp = fp = 0
        for i in range(2000):
            gt = [GroundTruthObject("person", round(rng.uniform(0.2, 0.8), 6),
                                    round(rng.uniform(0.2, 0.8), 6), 0.05, 0.05,
                                    0.0, 0) for _ in range(5)]
            total_gt += len(gt)
            dets, _ = model.detect(frame_with(gt, fid=i))
            truth = {(o.x, o.y) for o in gt}
            for d in dets:
                if (d.x, d.y) in truth:
                    tp += 1
                else:
                    fp += 1
        assert total_gt == 10_000
        precision = tp / (tp + fp)
        recall = tp / total_gt
        assert precision == pytest.approx(0.72, abs=0.02)
        assert recall == pytest.approx(0.9, abs=0.02)

    def test_same_seed_same_stream(self):
        gt = [obj(), obj("vehicle")]
        runs = []
        for _ in range(2):
            model = DetectorModel(precision=0.7, recall=0.8, rng_seed=9)
            out = []
            for i in range(50):
                dets, latency = model.detect(frame_with(gt, ts=i, fid=i))
                out.append((tuple(dets), latency))
            runs.append(out)
        assert runs[0] == runs[1]


class TestEncoder:
    def test_preset_table(self):
        ultra = EncoderModel("ultrafast")
        assert ultra.achievable_fps == 0.5
        assert ultra.output_bitrate_bps == 5_000_000
        assert ultra.cpu_fraction == 0.99
        for preset in ("medium", "slow"):
            slow = EncoderModel(preset)
            assert slow.achievable_fps == 0.05
            assert slow.cpu_fraction == 0.99
        with pytest.raises(ValueError):
            EncoderModel("veryfast")

    def test_ultrafast_payload_size(self):
        # 5,000,000 / (8 * 0.5) = 1,250,000 bytes per admitted frame
        assert EncoderModel("ultrafast").frame_payload_bytes == 1_250_000

    def test_admission_at_5fps_is_one_per_two_seconds(self):
        enc = EncoderModel("ultrafast")
        admitted = []
        for i in range(0, 10_000, 200):  # 5 FPS offers for 10 s
            out = enc.offer(frame_with([], ts=i, fid=i), "s", len(admitted) + 1, float(i))
            if out is not None:
                admitted.append(i)
        assert admitted == [0, 2000, 4000, 6000, 8000]
        assert enc.frames_skipped == 45

    def test_medium_is_one_frame_per_twenty_seconds(self):
        enc = EncoderModel("medium")
        admitted = []
        for i in range(0, 60_000, 200):
            if enc.offer(frame_with([], ts=i, fid=i), "s", len(admitted) + 1, float(i)):
                admitted.append(i)
        assert admitted == [0, 20_000, 40_000]
        assert enc.encode_time_ms == pytest.approx(20_000.0)

    def test_sixty_second_bitrate(self):
        enc = EncoderModel("ultrafast")
        total = 0
        for i in range(0, 60_000, 200):
            out = enc.offer(frame_with([], ts=i, fid=i), "s", 1, float(i))
            if out is not None:
                total += len(out.payload)
        bitrate = total * 8 / 60.0
        assert bitrate == pytest.approx(5_000_000, rel=0.01)

    def test_payload_deterministic(self):
        a = synthetic_bytes("s/3", 1_250_000)
        b = synthetic_bytes("s/3", 1_250_000)
        assert a == b
        assert a != synthetic_bytes("s/4", 1_250_000)
        assert len(a) == 1_250_000
        assert a.startswith(b"skywatch:s/3\n")


class TestFrameSource:
    def test_object_visibility_window(self):
        src = FrameSource(objects=[obj(t_ms=1000, duration=500)])
        assert src.frame_at(800).objects == ()
        assert len(src.frame_at(1000).objects) == 1
        assert len(src.frame_at(1500).objects) == 1
        assert src.frame_at(1600).objects == ()

    def test_frame_ids_strictly_increase(self):
        src = FrameSource(objects=[])
        ids = [src.frame_at(t).frame_id for t in range(0, 1000, 200)]
        assert ids == sorted(set(ids))

    def test_rejects_bad_period(self):
        with pytest.raises(ValueError):
            FrameSource(objects=[], frame_period_ms=0)
