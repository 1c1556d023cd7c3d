import math

import numpy as np
import pytest

from oracles import mean_quartile_decay
from trackseg.geom import AxisBox, RotatedBox, iou_mask
from trackseg.metrics import (
    MetricsReport,
    SequenceResult,
    accuracy_robustness,
    aggregate_success,
    boundary,
    contour_fmeasure,
    contour_stats,
    evaluate_sequences,
    fixed_aspect_oracle,
    jaccard_stats,
    representation_oracles,
    success_map,
)
from trackseg.synthdata import generate, random_scene


def box_mask(h, w, r0, r1, c0, c1):
    m = np.zeros((h, w), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def seq_with_ious(ious):
    """Mask pairs whose per-frame IoU is exactly the requested multiple of 0.01.

    Ground truth covers columns [0, 100); a prediction covering the first k
    of them (a subset) has IoU k/100 exactly.
    """
    gt, pred = [], []
    for v in ious:
        g = box_mask(1, 200, 0, 1, 0, 100)
        k = int(round(100 * v))
        p = box_mask(1, 200, 0, 1, 0, k)
        assert iou_mask(p, g) == pytest.approx(v, abs=1e-12)
        gt.append(g)
        pred.append(p)
    return SequenceResult(pred_masks=pred, gt_masks=gt)


class TestJaccardStats:
    def test_constant_sequence(self):
        gt = [box_mask(20, 20, 0, 10, 0, 10)] * 6
        pred = [box_mask(20, 20, 0, 10, 0, 8)] * 6  # IoU 0.8
        jm, jo, jd = jaccard_stats(SequenceResult(pred_masks=pred, gt_masks=gt))
        assert jm == pytest.approx(0.8, abs=1e-12)
        assert jo == 1.0
        assert jd == 0.0

    def test_linear_ramp_decay(self):
        # IoU ramps 1.0 -> 0.01 in steps of 1/100 over 100 frames:
        # first-quartile mean 0.88, last-quartile mean 0.13, decay 0.75
        ramp = [1.0 - t / 100 for t in range(100)]
        seq = seq_with_ious(ramp)
        ious = [iou_mask(p, g) for p, g in zip(seq.pred_masks, seq.gt_masks)]
        _, _, jd = jaccard_stats(seq)
        assert jd == pytest.approx(mean_quartile_decay(ious), abs=1e-12)
        assert jd == pytest.approx(0.75, abs=1e-9)

    def test_exact_ramp_decay_value(self):
        values = np.array([1.0 - t / 100 for t in range(100)])
        assert mean_quartile_decay(values) == pytest.approx(0.75, abs=1e-12)

    def test_all_empty_predictions(self):
        gt = [box_mask(10, 10, 2, 8, 2, 8)] * 4
        pred = [np.zeros((10, 10), dtype=bool)] * 4
        assert jaccard_stats(SequenceResult(pred_masks=pred, gt_masks=gt)) == (0.0, 0.0, 0.0)

    def test_empty_sequence_raises(self):
        with pytest.raises(ValueError):
            jaccard_stats(SequenceResult(pred_masks=[], gt_masks=[]))


class TestContourFMeasure:
    def test_identical_masks(self):
        m = box_mask(50, 50, 10, 30, 12, 40)
        assert contour_fmeasure(m, m) == 1.0

    def test_disjoint_distant_blobs(self):
        a = box_mask(100, 100, 5, 15, 5, 15)
        b = box_mask(100, 100, 80, 95, 70, 95)
        assert contour_fmeasure(a, b) == 0.0

    def test_one_pixel_dilation_within_tolerance(self):
        # 100x100 image: tolerance = ceil(0.008 * 141.4) = 2 >= 1
        inner = box_mask(100, 100, 40, 60, 40, 60)
        dilated = box_mask(100, 100, 39, 61, 39, 61)
        assert contour_fmeasure(dilated, inner) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a = rng.random((40, 40)) < 0.3
            b = rng.random((40, 40)) < 0.3
            assert contour_fmeasure(a, b) == pytest.approx(contour_fmeasure(b, a), abs=1e-12)

    def test_both_empty(self):
        z = np.zeros((10, 10), dtype=bool)
        assert contour_fmeasure(z, z) == 1.0

    def test_one_empty(self):
        z = np.zeros((10, 10), dtype=bool)
        assert contour_fmeasure(z, box_mask(10, 10, 2, 5, 2, 5)) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            contour_fmeasure(np.zeros((4, 4), dtype=bool), np.zeros((5, 4), dtype=bool))

    def test_boundary_includes_image_border(self):
        m = np.ones((6, 6), dtype=bool)
        b = boundary(m)
        assert b[0].all() and b[-1].all() and b[:, 0].all() and b[:, -1].all()
        assert not b[2:4, 2:4].any()


class TestSuccessMap:
    def test_high_iou_everywhere(self):
        gt = [AxisBox(0, 0, 10, 10)] * 5
        pred = [AxisBox(0, 0, 10, 9.0)] * 5  # IoU 0.9
        seq = SequenceResult(pred_masks=[None] * 5, gt_masks=[np.zeros((2, 2), bool)] * 5, pred_boxes=pred, gt_boxes=gt)
        out = success_map(seq)
        assert out["map"][0.5] == 1.0
        assert out["map"][0.7] == 1.0

    def test_split_thresholds(self):
        def boxes_with_iou(v):
            # [0,0,1,1] vs [0,0,w,1]: IoU = w when w <= 1... use overlap form
            # iou of (0,0,1,1) and (0,0,v',1) with v' <= 1 is v'. Solve v' = v.
            return AxisBox(0, 0, 1, 1), AxisBox(0, 0, v, 1)

        gts, preds = [], []
        for v in [0.6, 0.6, 0.3, 0.3]:
            g, p = boxes_with_iou(v)
            gts.append(g)
            preds.append(p)
        seq = SequenceResult(
            pred_masks=[None] * 4, gt_masks=[np.zeros((2, 2), bool)] * 4, pred_boxes=preds, gt_boxes=gts
        )
        out = success_map(seq)
        assert out["map"][0.5] == 0.5
        assert out["map"][0.7] == 0.0

    def test_rotated_vs_rotated(self):
        gt = [RotatedBox(5, 5, 4, 2, 0.3)] * 3
        seq = SequenceResult(
            pred_masks=[None] * 3, gt_masks=[np.zeros((2, 2), bool)] * 3, pred_boxes=list(gt), gt_boxes=list(gt)
        )
        assert success_map(seq)["miou"] == pytest.approx(1.0, abs=1e-9)

    def test_gt_against_itself(self):
        seq = generate(random_scene(seed=2, n_frames=5))
        boxes = [rb[0] for rb in seq.rotated_boxes]
        res = SequenceResult(
            pred_masks=[None] * 5,
            gt_masks=[m[0] for m in seq.masks],
            pred_boxes=boxes,
            gt_boxes=list(boxes),
        )
        assert success_map(res)["miou"] == pytest.approx(1.0, abs=1e-9)


class StubOracleTracker:
    """Replays ground truth; used to pin the reset-protocol endpoints."""

    def __init__(self, seq):
        self.seq = seq
        self.t = 0

    def init(self, frame, box):
        self.t = _find_frame(self.seq, frame)

    def track(self, frame):
        t = _find_frame(self.seq, frame)

        class R:
            mask = self.seq.masks[t][0]

        return R()


class StubEmptyTracker:
    def init(self, frame, box):
        pass

    def track(self, frame):
        class R:
            mask = np.zeros(frame.shape[:2], dtype=bool)

        return R()


def _find_frame(seq, frame):
    for t, f in enumerate(seq.frames):
        if f is frame:
            return t
    raise AssertionError("unknown frame")


class TestAccuracyRobustness:
    def test_perfect_tracker(self):
        seq = generate(random_scene(seed=6, n_frames=20))
        a, r = accuracy_robustness(lambda: StubOracleTracker(seq), [seq], burn_in=5)
        assert a == 1.0
        assert r == 0.0

    def test_always_empty_tracker(self):
        seq = generate(random_scene(seed=6, n_frames=20))
        a, r = accuracy_robustness(StubEmptyTracker, [seq], reinit_delay=5)
        assert a == 0.0
        # fails at t=1, reinit at 6, fails at 7, reinit at 12, fails 13, reinit 18, fails 19
        assert r == 4.0

    def test_deterministic(self):
        seq = generate(random_scene(seed=8, n_frames=12))
        runs = [accuracy_robustness(lambda: StubOracleTracker(seq), [seq]) for _ in range(2)]
        assert runs[0] == runs[1]


class TestRepresentationOracles:
    def test_rotating_elongated_scene_ordering(self):
        from trackseg.synthdata import oracle_study_scene

        seqs = [generate(oracle_study_scene(seed=s, n_frames=14)) for s in range(4)]
        out = representation_oracles(seqs)
        assert out["mbr"]["miou"] > out["min_max"]["miou"] > out["fixed"]["miou"]

    def test_never_rotating_scene_degenerate(self):
        seqs = [
            generate(
                random_scene(seed=s, n_frames=6, shapes=("rectangle",), rotation_rate=0.0)
            )
            for s in (1, 2)
        ]
        out = representation_oracles(seqs)
        assert out["min_max"]["miou"] == pytest.approx(1.0, abs=1e-6)
        assert out["mbr"]["miou"] == pytest.approx(1.0, abs=0.02)

    def test_fixed_aspect_oracle_geometry(self):
        rb = RotatedBox(10, 10, 8, 2, 0.0)
        box = fixed_aspect_oracle(rb, first_aspect=4.0)
        assert box.area == pytest.approx(rb.area, rel=1e-9)
        assert box.width / box.height == pytest.approx(4.0, rel=1e-9)
        assert box.center == (10, 10)


class TestEvaluateSequences:
    def test_report_fields_and_seen_unseen(self):
        gt = [box_mask(20, 20, 0, 10, 0, 10)] * 4
        perfect = SequenceResult(pred_masks=list(gt), gt_masks=gt)
        half = SequenceResult(pred_masks=[box_mask(20, 20, 0, 5, 0, 10)] * 4, gt_masks=gt)
        report = evaluate_sequences([perfect, half], seen_flags=[True, False])
        assert report.j_mean == pytest.approx((1.0 + 0.5) / 2, abs=1e-9)
        su = report.seen_unseen
        assert su["J_seen"] == 1.0
        assert su["overall"] == pytest.approx(
            (su["J_seen"] + su["J_unseen"] + su["F_seen"] + su["F_unseen"]) / 4, abs=1e-12
        )

    def test_json_round_trip(self):
        import json

        report = MetricsReport(miou=0.5, map_at={0.5: 1.0})
        decoded = json.loads(report.to_json())
        assert decoded["miou"] == 0.5
        assert decoded["map_at"]["0.5"] == 1.0

    def test_decay_bounds(self):
        rng = np.random.default_rng(9)
        gt = [box_mask(20, 20, 0, 10, 0, 10)] * 8
        pred = [rng.random((20, 20)) < 0.3 for _ in range(8)]
        jm, jo, jd = jaccard_stats(SequenceResult(pred_masks=pred, gt_masks=gt))
        assert 0.0 <= jm <= 1.0
        assert 0.0 <= jo <= 1.0
        assert -1.0 <= jd <= 1.0
