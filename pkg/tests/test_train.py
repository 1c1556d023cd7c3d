import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trackseg.geom import AxisBox
from trackseg.model import ModelConfig, build_model
from trackseg.train import (
    AugParams,
    PairRejected,
    TrainConfig,
    TrainingPair,
    anchor_grid,
    anchor_ratios,
    assign_labels_2b,
    assign_labels_3b,
    box_to_cxcywh,
    compute_batch_loss,
    cxcywh_to_box,
    decode_deltas,
    encode_deltas,
    learning_rate,
    loss_mask,
    loss_reg,
    loss_score,
    loss_sim,
    make_training_pair,
    mask_labels,
    row_labels_from_anchors,
    sample_pair,
    smooth_l1,
    total_loss,
    train,
)

TOY = dict(
    backbone_kind="toy_convnet",
    feature_channels=16,
    anchors_per_cell=2,
    mask_side=7,
    refined_mask_side=31,
    refinement_channels=(8, 6, 4),
    exemplar_side=31,
    search_side=63,
    response_side=5,
    toy_channels=(4, 6, 8, 8),
)


def toy_model_config(**kw):
    d = dict(TOY)
    d.update(kw)
    return ModelConfig(**d)


class TestAnchors:
    def test_grid_shape_and_centers(self):
        cfg = ModelConfig()
        anchors = anchor_grid(cfg)
        assert anchors.shape == (17, 17, 5, 4)
        centers = cfg.cell_centers()
        np.testing.assert_allclose(anchors[..., 0], np.broadcast_to(centers[..., 0][:, :, None], anchors.shape[:3]))
        # center cell sits at the middle of the search patch
        assert anchors[8, 8, 0, 0] == 127.5

    def test_five_canonical_ratios(self):
        assert anchor_ratios(5) == (1 / 3, 1 / 2, 1.0, 2.0, 3.0)
        anchors = anchor_grid(ModelConfig())
        ratios = anchors[0, 0, :, 3] / anchors[0, 0, :, 2]
        np.testing.assert_allclose(ratios, [1 / 3, 1 / 2, 1, 2, 3], rtol=1e-12)

    def test_equal_areas(self):
        anchors = anchor_grid(ModelConfig())
        areas = anchors[0, 0, :, 2] * anchors[0, 0, :, 3]
        np.testing.assert_allclose(areas, areas[0])


class TestDeltas:
    def test_identity_encodes_to_zero(self):
        a = np.array([10.0, 20.0, 30.0, 40.0])
        np.testing.assert_array_equal(encode_deltas(a, a), np.zeros(4))

    def test_hand_example(self):
        anchor = np.array([0.0, 0.0, 10.0, 10.0])
        gt = np.array([5.0, 0.0, 20.0, 10.0])
        np.testing.assert_allclose(encode_deltas(anchor, gt), [0.5, 0.0, math.log(2), 0.0], atol=1e-12)

    def test_round_trip_1000_pairs(self):
        rng = np.random.default_rng(0)
        anchors = np.stack(
            [rng.uniform(-50, 50, 1000), rng.uniform(-50, 50, 1000), rng.uniform(1, 80, 1000), rng.uniform(1, 80, 1000)],
            axis=-1,
        )
        gts = np.stack(
            [rng.uniform(-50, 50, 1000), rng.uniform(-50, 50, 1000), rng.uniform(1, 80, 1000), rng.uniform(1, 80, 1000)],
            axis=-1,
        )
        back = decode_deltas(anchors, encode_deltas(anchors, gts))
        assert np.max(np.abs(back - gts)) < 1e-6

    def test_non_positive_gt_rejected(self):
        with pytest.raises(ValueError):
            encode_deltas(np.array([0, 0, 10, 10.0]), np.array([0, 0, -1, 10.0]))

    def test_box_conversions(self):
        box = AxisBox(2, 4, 10, 10)
        assert cxcywh_to_box(box_to_cxcywh(box)) == box


class TestLabels2B:
    def test_centered_gt_center_positive(self):
        cfg = ModelConfig()
        y = assign_labels_2b(AxisBox(107.5, 107.5, 147.5, 147.5), cfg)
        assert y[8, 8] == 1

    def test_distance_exactly_threshold_negative(self):
        cfg = ModelConfig()
        # gt center 16 feature px (= 128 image px) right of the center cell
        c = 127.5 + 16 * cfg.total_stride
        y = assign_labels_2b(AxisBox(c - 5, 122.5, c + 5, 132.5), cfg)
        assert y[8, 8] == -1

    def test_just_inside_threshold_positive(self):
        cfg = ModelConfig()
        c = 127.5 + 16 * cfg.total_stride - 1e-6
        y = assign_labels_2b(AxisBox(c - 5, 122.5, c + 5, 132.5), cfg)
        assert y[8, 8] == 1

    def test_corner_gt_distant_cells_negative(self):
        cfg = ModelConfig()
        y = assign_labels_2b(AxisBox(0, 0, 10, 10), cfg)  # gt at patch corner
        centers = cfg.cell_centers()
        d = np.hypot(centers[..., 0] - 5.0, centers[..., 1] - 5.0) / cfg.total_stride
        np.testing.assert_array_equal(y == 1, d < 16.0)
        assert (y == -1).any()

    def test_translation_consistency(self):
        cfg = ModelConfig()
        s = cfg.total_stride
        base = AxisBox(100, 90, 150, 140)
        shifted = AxisBox(100 + s, 90, 150 + s, 140)
        ya = assign_labels_2b(base, cfg)
        yb = assign_labels_2b(shifted, cfg)
        np.testing.assert_array_equal(ya[:, :-1], yb[:, 1:])


class TestLabels3B:
    def test_anchor_equals_gt(self):
        anchors = np.array([[[[5.0, 5.0, 10.0, 10.0]]]])
        y = assign_labels_3b(anchors, AxisBox(0, 0, 10, 10))
        assert y[0, 0, 0] == 1

    def test_iou_exactly_point_six_positive(self):
        anchors = np.array([[[[5.0, 5.0, 10.0, 10.0]]]])
        # overlap 7.5 x 10 = 75, union 125 -> IoU exactly 0.6
        y = assign_labels_3b(anchors, AxisBox(2.5, 0, 12.5, 10))
        assert y[0, 0, 0] == 1

    def test_iou_below_threshold_negative(self):
        anchors = np.array([[[[5.0, 5.0, 10.0, 10.0]]]])
        y = assign_labels_3b(anchors, AxisBox(2.6, 0, 12.6, 10))  # IoU ~0.587
        assert y[0, 0, 0] == -1

    def test_row_labels(self):
        y_anchor = np.array([[[1, -1], [-1, -1]]], dtype=np.int8)
        np.testing.assert_array_equal(row_labels_from_anchors(y_anchor), [[1, -1]])


class TestMaskLabels:
    def test_center_cell_window_sees_centered_object(self):
        cfg = toy_model_config()
        gt = np.zeros((63, 63), dtype=bool)
        gt[25:38, 25:38] = True
        lab = mask_labels(gt, cfg, cfg.refined_mask_side, [(2, 2)])  # center cell of 5x5 grid
        win = lab[0].reshape(31, 31)
        # refined side == exemplar side: the window is a literal 31x31 crop at (16, 16)
        np.testing.assert_array_equal(win == 1, gt[16:47, 16:47])

    def test_labels_are_plus_minus_one(self):
        cfg = toy_model_config()
        gt = np.zeros((63, 63), dtype=bool)
        gt[10:20, 10:20] = True
        lab = mask_labels(gt, cfg, cfg.mask_side, [(0, 0), (4, 4)])
        assert set(np.unique(lab)) <= {-1, 1}
        assert lab.shape == (2, cfg.mask_side**2)


class TestSmoothL1:
    def test_zero(self):
        assert smooth_l1(0.0).item() == 0.0

    def test_quadratic_branch(self):
        assert smooth_l1(0.5, 1.0).item() == pytest.approx(0.125, abs=1e-12)

    def test_continuity_at_knee(self):
        beta = 1.0
        knee = 1.0
        quad = 0.5 * beta**2 * knee**2
        lin = knee - 1 / (2 * beta**2)
        assert quad == pytest.approx(lin, abs=1e-12)
        assert smooth_l1(knee, beta).item() == pytest.approx(0.5, abs=1e-12)

    def test_beta_scaling(self):
        # knee moves to 1/beta^2 = 4 when beta = 0.5
        assert smooth_l1(3.9, 0.5).item() == pytest.approx(0.5 * 0.25 * 3.9**2, abs=1e-9)
        assert smooth_l1(4.1, 0.5).item() == pytest.approx(4.1 - 2.0, abs=1e-9)


class TestLossSim:
    def test_zero_scores_give_ln2(self):
        scores = np.zeros((17, 17))
        y = np.ones((17, 17))
        assert loss_sim(scores, y).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_saturation(self):
        scores = np.full((5, 5), 50.0)
        assert loss_sim(scores, np.ones((5, 5))).item() < 1e-12

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            g = rng.normal(size=(17, 17))
            y = rng.choice([-1.0, 1.0], size=(17, 17))
            expected = np.mean(np.log1p(np.exp(-y * g)))
            assert loss_sim(g, y).item() == pytest.approx(expected, rel=1e-10)


class TestLossScore:
    def test_perfect_probabilities(self):
        y = np.array([[1.0, -1.0]])
        p = np.array([[1.0, 0.0]])
        assert loss_score(p, y).item() == pytest.approx(0.0, abs=1e-6)

    def test_half_everywhere(self):
        p = np.full((10, 4), 0.5)
        y = np.sign(np.random.default_rng(0).normal(size=(10, 4)))
        assert loss_score(p, y).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        p0 = rng.uniform(0.1, 0.9, size=(3, 2))
        y = rng.choice([-1.0, 1.0], size=(3, 2))
        p = torch.tensor(p0, requires_grad=True)
        loss_score(p, y).backward()
        eps = 1e-6
        for i in range(3):
            for j in range(2):
                pp, pm = p0.copy(), p0.copy()
                pp[i, j] += eps
                pm[i, j] -= eps
                fd = (loss_score(pp, y).item() - loss_score(pm, y).item()) / (2 * eps)
                assert fd == pytest.approx(p.grad[i, j].item(), rel=1e-5)


class TestLossReg:
    def test_perfect_predictions(self):
        q = np.zeros((4, 2, 4))
        delta = np.zeros((4, 2, 4))
        y = np.ones((4, 2))
        assert loss_reg(q, delta, y).item() == 0.0

    def test_hand_example(self):
        # one cell, one anchor, one coordinate off by 0.5
        q = np.zeros((1, 1, 4))
        delta = np.zeros((1, 1, 4))
        delta[0, 0, 0] = 0.5
        y = np.ones((1, 1))
        assert loss_reg(q, delta, y, beta=1.0).item() == pytest.approx(0.125, abs=1e-12)

    def test_all_negative_zero(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(6, 3, 4))
        delta = rng.normal(size=(6, 3, 4))
        y = -np.ones((6, 3))
        assert loss_reg(q, delta, y).item() == 0.0


class TestLossMask:
    def test_all_negative_rows_zero(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(9, 49))
        labels = rng.choice([-1, 1], size=(9, 49))
        y = -np.ones(9)
        assert loss_mask(logits, labels, y).item() == 0.0

    def test_single_positive_zero_logits(self):
        logits = np.zeros((5, 49))
        labels = np.ones((5, 49))
        y = -np.ones(5)
        y[2] = 1.0
        assert loss_mask(logits, labels, y).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_correct_sign_saturation(self):
        labels = np.sign(np.random.default_rng(3).normal(size=(2, 16)))
        logits = labels * 60.0
        assert loss_mask(logits, labels, np.ones(2)).item() < 1e-12


class TestTotalLoss:
    def test_zero_components(self):
        cfg = TrainConfig()
        z = torch.tensor(0.0)
        assert total_loss("three_branch", {"mask": z, "score": z, "reg": z}, cfg).item() == 0.0

    def test_lambda_arithmetic(self):
        cfg = TrainConfig()
        comps = {"mask": torch.tensor(0.1), "score": torch.tensor(0.2), "reg": torch.tensor(0.3)}
        assert total_loss("three_branch", comps, cfg).item() == pytest.approx(3.7, abs=1e-6)

    def test_two_branch_weights(self):
        cfg = TrainConfig()
        comps = {"mask": torch.tensor(1.0), "sim": torch.tensor(2.0)}
        assert total_loss("two_branch", comps, cfg).item() == pytest.approx(34.0, abs=1e-6)


class TestSchedule:
    def test_pinned_points(self):
        cfg = TrainConfig()
        assert learning_rate(0.0, cfg) == pytest.approx(1e-3, abs=1e-12)
        assert learning_rate(5.0, cfg) == pytest.approx(5e-3, abs=1e-12)
        assert learning_rate(20.0, cfg) == pytest.approx(5e-4, abs=1e-12)

    def test_warmup_linear(self):
        cfg = TrainConfig()
        assert learning_rate(2.5, cfg) == pytest.approx((1e-3 + 5e-3) / 2, abs=1e-12)

    def test_decay_monotone(self):
        cfg = TrainConfig()
        lrs = [learning_rate(t, cfg) for t in np.linspace(5, 20, 40)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def centered_frames(frame_size=200, obj_half=20):
    frame = np.full((frame_size, frame_size, 3), 90, dtype=np.uint8)
    mask = np.zeros((frame_size, frame_size), dtype=bool)
    c = frame_size // 2
    mask[c - obj_half : c + obj_half, c - obj_half : c + obj_half] = True
    frame[mask] = 200
    return frame, mask


class TestTrainingPairs:
    def test_zero_augmentation_centers_object(self):
        frame, mask = centered_frames()
        cfg = ModelConfig()
        tcfg = TrainConfig()
        pair = make_training_pair(frame, mask, frame, mask, cfg, tcfg)
        assert pair.exemplar.shape == (127, 127, 3)
        assert pair.search.shape == (255, 255, 3)
        cx, cy = pair.gt_box.center
        assert cx == pytest.approx(127.5, abs=1e-6)
        assert cy == pytest.approx(127.5, abs=1e-6)
        rr, cc = np.nonzero(pair.gt_mask)
        assert cc.mean() == pytest.approx(127.0, abs=1.0)

    def test_shift_displaces_center_exactly(self):
        frame, mask = centered_frames()
        pair = make_training_pair(
            frame, mask, frame, mask, ModelConfig(), TrainConfig(), AugParams(shift_x=(64.0, 0.0))
        )
        cx, cy = pair.gt_box.center
        assert cx == pytest.approx(127.5 + 64.0, abs=1e-6)
        assert cy == pytest.approx(127.5, abs=1e-6)

    def test_scale_changes_area_quadratically(self):
        frame, mask = centered_frames()
        base = make_training_pair(frame, mask, frame, mask, ModelConfig(), TrainConfig())
        big = make_training_pair(
            frame, mask, frame, mask, ModelConfig(), TrainConfig(), AugParams(scale_x=1.18)
        )
        ratio = big.gt_mask.sum() / base.gt_mask.sum()
        assert ratio == pytest.approx(1.18**2, rel=0.05)

    def test_sparse_mask_rejected(self):
        frame = np.full((400, 400, 3), 90, dtype=np.uint8)
        mask = np.zeros((400, 400), dtype=bool)
        mask[10, 10] = True
        mask[390, 390] = True
        with pytest.raises(PairRejected):
            make_training_pair(frame, mask, frame, mask, ModelConfig(), TrainConfig())

    def test_sample_pair_deterministic(self):
        from trackseg.synthdata import generate, random_scene

        seqs = [generate(random_scene(seed=s, n_frames=6)) for s in (1, 2)]
        a = sample_pair(seqs, np.random.default_rng(9), ModelConfig(), TrainConfig())
        b = sample_pair(seqs, np.random.default_rng(9), ModelConfig(), TrainConfig())
        np.testing.assert_array_equal(a.search, b.search)
        assert a.gt_box == b.gt_box


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_all_negative_labels_zero_losses(seed):
    rng = np.random.default_rng(seed)
    n, k, wh = 5, 3, 25
    y = -np.ones((n, k))
    assert loss_reg(rng.normal(size=(n, k, 4)), rng.normal(size=(n, k, 4)), y).item() == 0.0
    assert loss_mask(rng.normal(size=(n, wh)), rng.choice([-1, 1], (n, wh)), -np.ones(n)).item() == 0.0


def random_toy_pair(rng, cfg):
    s = cfg.search_side
    e = cfg.exemplar_side
    exemplar = rng.uniform(0, 255, size=(e, e, 3))
    search = rng.uniform(0, 255, size=(s, s, 3))
    gt_mask = np.zeros((s, s), dtype=bool)
    w, h = int(rng.integers(10, 26)), int(rng.integers(10, 26))
    cx, cy = int(rng.integers(w // 2 + 2, s - w // 2 - 2)), int(rng.integers(h // 2 + 2, s - h // 2 - 2))
    gt_mask[cy - h // 2 : cy + h // 2, cx - w // 2 : cx + w // 2] = True
    box = AxisBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    return TrainingPair(exemplar=exemplar, search=search, gt_box=box, gt_mask=gt_mask)


def gradient_check_total_loss(variant, seed, n_coords=6, eps=1e-4):
    """Central-difference check of d(total loss)/d(params) on a toy config."""
    from trackseg.train import anchor_grid as make_anchors

    cfg = toy_model_config()
    tcfg = TrainConfig(refined_positives_per_pair=1)
    rng = np.random.default_rng(seed)
    pairs = [random_toy_pair(rng, cfg) for _ in range(2)]
    anchors = make_anchors(cfg) if variant == "three_branch" else None
    net = build_model(cfg, variant, seed=seed).double()
    net.train()

    def evaluate():
        loss, _ = compute_batch_loss(net, pairs, anchors, tcfg, np.random.default_rng(seed))
        return loss

    loss = evaluate()
    net.zero_grad()
    loss.backward()

    params = [(n, p) for n, p in net.named_parameters() if p.grad is not None]
    worst = 0.0
    for _ in range(n_coords):
        name, p = params[int(rng.integers(len(params)))]
        idx = tuple(int(rng.integers(d)) for d in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            plus = evaluate().item()
            p[idx] = orig - eps
            minus = evaluate().item()
            p[idx] = orig
        fd = (plus - minus) / (2 * eps)
        rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-6)
        worst = max(worst, rel)
    return worst


@pytest.mark.parametrize("variant", ["two_branch", "three_branch"])
def test_total_loss_gradients_match_finite_differences(variant):
    for seed in (0, 1, 2):
        assert gradient_check_total_loss(variant, seed) < 1e-4


def test_overfit_single_pair_loss_decreases():
    from trackseg.synthdata import generate, random_scene

    cfg = toy_model_config()
    tcfg = TrainConfig(
        batch_size=2,
        steps_per_epoch=10,
        warmup_epochs=1,
        decay_epochs=2,
        refined_positives_per_pair=1,
        seed=3,
    )
    seq = generate(random_scene(seed=12, n_frames=4, canvas=(96, 96), size_range=(24.0, 30.0)))
    net, history = train([seq], cfg, tcfg, variant="three_branch")
    losses = [h["loss"] for h in history]
    warm_end = tcfg.warmup_epochs * tcfg.steps_per_epoch
    smoothed = np.convolve(losses, np.ones(10) / 10, mode="valid")
    after = smoothed[warm_end:]
    assert after[-1] <= after[0]
    assert np.isfinite(losses).all()
