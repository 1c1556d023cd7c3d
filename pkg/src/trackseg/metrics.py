"""Quantitative evaluation: region/contour statistics, success rates,
reset-protocol accuracy/robustness, and the box-representation oracle study.

Region similarity follows the video-segmentation convention: per-measure
mean, recall (fraction of frames above 0.5), and decay (first temporal
quartile mean minus last temporal quartile mean). The quartile is
``max(1, n // 4)`` frames long.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geom import AxisBox, RotatedBox, box_iou, iou_mask, min_max_box, mbr, rasterize_box


@dataclass
class SequenceResult:
    """Aligned per-frame predictions and ground truth for one sequence."""

    pred_masks: list  # list of HxW bool (or None for missing predictions)
    gt_masks: list  # list of HxW bool
    pred_boxes: list | None = None  # AxisBox | RotatedBox per frame
    gt_boxes: list | None = None
    valid: list | None = None  # frames excluded from scoring when False

    def __post_init__(self):
        n = len(self.gt_masks)
        for name in ("pred_masks", "pred_boxes", "gt_boxes", "valid"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ValueError(f"{name} length {len(v)} != {n} frames")


def frame_ious(seq: SequenceResult) -> np.ndarray:
    """Per-frame mask IoU; a missing prediction counts as an empty mask."""
    out = np.zeros(len(seq.gt_masks))
    for t, gt in enumerate(seq.gt_masks):
        pred = seq.pred_masks[t]
        if pred is not None:
            out[t] = iou_mask(pred, gt)
    return out


def _mean_recall_decay(values: np.ndarray) -> tuple[float, float, float]:
    if len(values) == 0:
        raise ValueError("empty sequence")
    mean = float(values.mean())
    recall = float((values > 0.5).mean())
    q = max(1, len(values) // 4)
    decay = float(values[:q].mean() - values[-q:].mean())
    return mean, recall, decay


def jaccard_stats(seq: SequenceResult) -> tuple[float, float, float]:
    """(J_mean, J_recall, J_decay) of per-frame mask IoU."""
    return _mean_recall_decay(frame_ious(seq))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels that touch the background (or the image border)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, border_value=0)
    return mask & ~eroded


def contour_fmeasure(pred, gt, tolerance: int | None = None) -> float:
    """Boundary F-measure with distance tolerance.

    Boundary pixels are extracted morphologically; a boundary pixel matches
    when the nearest opposite-boundary pixel lies within the tolerance
    (default: 0.8% of the image diagonal, rounded up, at least 1 px).
    Identical empty masks score 1; otherwise F = 2PR/(P+R), 0 when P+R = 0.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    if tolerance is None:
        diag = math.hypot(*pred.shape)
        tolerance = max(1, math.ceil(0.008 * diag))
    pb = boundary(pred)
    gb = boundary(gt)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~gb)
    dist_to_pred = ndimage.distance_transform_edt(~pb)
    precision = float((dist_to_gt[pb] <= tolerance).mean())
    recall = float((dist_to_pred[gb] <= tolerance).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def contour_stats(seq: SequenceResult) -> tuple[float, float, float]:
    """(F_mean, F_recall, F_decay) of the per-frame boundary F-measure."""
    values = np.zeros(len(seq.gt_masks))
    for t, gt in enumerate(seq.gt_masks):
        pred = seq.pred_masks[t]
        values[t] = contour_fmeasure(pred if pred is not None else np.zeros_like(gt), gt)
    return _mean_recall_decay(values)


def _pair_iou(pred, gt) -> float:
    """Box-or-mask IoU: boxes compare analytically, masks by pixel counting."""
    pred_is_mask = isinstance(pred, np.ndarray)
    gt_is_mask = isinstance(gt, np.ndarray)
    if pred_is_mask and gt_is_mask:
        return iou_mask(pred, gt)
    if pred_is_mask or gt_is_mask:
        mask = pred if pred_is_mask else gt
        box = gt if pred_is_mask else pred
        return iou_mask(mask, rasterize_box(box, mask.shape[0], mask.shape[1]))
    return box_iou(pred, gt)


def success_map(seq: SequenceResult, taus=(0.5, 0.7)) -> dict:
    """Mean box IoU plus per-threshold success fractions for one sequence."""
    if not seq.pred_boxes or not seq.gt_boxes:
        raise ValueError("success_map needs per-frame boxes")
    ious = np.array([_pair_iou(p, g) for p, g in zip(seq.pred_boxes, seq.gt_boxes)])
    if seq.valid is not None:
        ious = ious[np.asarray(seq.valid, dtype=bool)]
    return {"miou": float(ious.mean()), "map": {float(t): float((ious >= t).mean()) for t in taus}}


def aggregate_success(per_sequence: list[dict]) -> dict:
    """Average the per-sequence mIoU / success numbers."""
    taus = list(per_sequence[0]["map"].keys())
    return {
        "miou": float(np.mean([r["miou"] for r in per_sequence])),
        "map": {t: float(np.mean([r["map"][t] for r in per_sequence])) for t in taus},
    }


# ---------------------------------------------------------------------------
# reset-protocol accuracy / robustness


def accuracy_robustness(
    make_tracker,
    sequences,
    reinit_delay: int = 5,
    burn_in: int = 5,
) -> tuple[float, float]:
    """Run a tracker with ground-truth re-initialization after failures.

    ``make_tracker()`` returns an object with ``init(frame, box)`` and
    ``track(frame) -> result`` where ``result.mask`` is a frame-size binary
    mask. A frame with zero overlap counts as one failure; the tracker is
    re-initialized from ground truth ``reinit_delay`` frames later, and the
    first ``burn_in`` tracked frames after any (re-)initialization are
    excluded from the accuracy average.

    Returns (mean overlap over scored frames, total failure count).
    """
    overlaps: list[float] = []
    failures = 0
    for seq in sequences:
        tracker = make_tracker()
        t = 0
        n = seq.n_frames
        while t < n - 1:
            tracker.init(seq.frames[t], min_max_box(seq.masks[t][0]))
            t += 1
            since_init = 0
            while t < n:
                result = tracker.track(seq.frames[t])
                overlap = iou_mask(result.mask, seq.masks[t][0])
                if overlap == 0.0:
                    failures += 1
                    t += reinit_delay
                    break
                if since_init >= burn_in:
                    overlaps.append(overlap)
                since_init += 1
                t += 1
    accuracy = float(np.mean(overlaps)) if overlaps else 0.0
    return accuracy, float(failures)


# ---------------------------------------------------------------------------
# representation oracle study


def fixed_aspect_oracle(gt_rot: RotatedBox, first_aspect: float) -> AxisBox:
    """Axis box with the ground-truth area and center but a frozen aspect."""
    area = gt_rot.area
    w = math.sqrt(area * first_aspect)
    h = math.sqrt(area / first_aspect)
    return AxisBox(gt_rot.cx - w / 2, gt_rot.cy - h / 2, gt_rot.cx + w / 2, gt_rot.cy + h / 2)


def representation_oracles(sequences, taus=(0.5, 0.7)) -> dict:
    """Evaluate the three ground-truth-derived box representations.

    For every frame of every sequence the oracles produce, respectively:
    an axis box with the true area/center but the first frame's aspect
    ratio; the axis box enclosing the true rotated box; and the minimum
    rotated rectangle of the true mask. All are scored against the ground
    truth rotated boxes.
    """
    results = {"fixed": [], "min_max": [], "mbr": []}
    for seq in sequences:
        gt_boxes = [rb[0] for rb in seq.rotated_boxes]
        first_axis = gt_boxes[0].enclosing_axis_box()
        aspect0 = first_axis.width / first_axis.height
        fixed = [fixed_aspect_oracle(b, aspect0) for b in gt_boxes]
        minmax = [b.enclosing_axis_box() for b in gt_boxes]
        mbr_boxes = [mbr(m[0]) for m in seq.masks]
        for name, preds in (("fixed", fixed), ("min_max", minmax), ("mbr", mbr_boxes)):
            results[name].append(
                success_map(
                    SequenceResult(
                        pred_masks=[None] * len(gt_boxes),
                        gt_masks=[m[0] for m in seq.masks],
                        pred_boxes=preds,
                        gt_boxes=gt_boxes,
                    ),
                    taus,
                )
            )
    return {name: aggregate_success(rs) for name, rs in results.items()}


# ---------------------------------------------------------------------------
# aggregate report


@dataclass
class MetricsReport:
    miou: float = 0.0
    map_at: dict = field(default_factory=dict)  # tau -> rate
    j_mean: float = 0.0
    j_recall: float = 0.0
    j_decay: float = 0.0
    f_mean: float = 0.0
    f_recall: float = 0.0
    f_decay: float = 0.0
    seen_unseen: dict = field(default_factory=dict)  # J_S/J_U/F_S/F_U/O
    accuracy: float | None = None
    robustness: float | None = None
    config_echo: dict = field(default_factory=dict)
    version: int = 1

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["map_at"] = {str(k): v for k, v in d["map_at"].items()}
        return json.dumps(d, indent=2, sort_keys=True)


def evaluate_sequences(seqs: list[SequenceResult], seen_flags: list[bool] | None = None, taus=(0.5, 0.7)) -> MetricsReport:
    """Mask-based J/F statistics (plus box success when boxes are present)."""
    j = np.array([jaccard_stats(s) for s in seqs])
    f = np.array([contour_stats(s) for s in seqs])
    report = MetricsReport(
        j_mean=float(j[:, 0].mean()),
        j_recall=float(j[:, 1].mean()),
        j_decay=float(j[:, 2].mean()),
        f_mean=float(f[:, 0].mean()),
        f_recall=float(f[:, 1].mean()),
        f_decay=float(f[:, 2].mean()),
    )
    if all(s.pred_boxes is not None and s.gt_boxes is not None for s in seqs):
        success = aggregate_success([success_map(s, taus) for s in seqs])
        report.miou = success["miou"]
        report.map_at = success["map"]
    if seen_flags is not None:
        if len(seen_flags) != len(seqs):
            raise ValueError("seen_flags length mismatch")
        flags = np.asarray(seen_flags, dtype=bool)
        if flags.any() and (~flags).any():
            j_s = float(j[flags, 0].mean())
            j_u = float(j[~flags, 0].mean())
            f_s = float(f[flags, 0].mean())
            f_u = float(f[~flags, 0].mean())
            report.seen_unseen = {
                "J_seen": j_s,
                "J_unseen": j_u,
                "F_seen": f_s,
                "F_unseen": f_u,
                "overall": (j_s + j_u + f_s + f_u) / 4.0,
            }
    return report
