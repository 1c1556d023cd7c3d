"""Multiple-object tracking and segmentation.

Each object runs its own two-stage tracker over shared frozen network
parameters: stage one localizes the object coarsely through the box branch,
stage two re-crops at that box and extracts a refined mask. Detector masks
are associated with the per-object predictions by maximum-total-IoU
assignment; matched tracks adopt the detection, unmatched detections above a
confidence threshold spawn new tracks, and tracks unmatched for too long are
dropped.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .geom import Assignment, AxisBox, hungarian, iou_axis, iou_mask, min_max_box
from .model import SiameseTracker
from .track import TrackOptions, Tracker
from .train import decode_deltas


@dataclass(frozen=True)
class MotConfig:
    spawn_threshold: float = 0.5  # min detection confidence to open a track
    max_lost: int = 10  # drop a track after this many unmatched frames
    min_affinity: float = 0.1  # assignments below this count as unmatched
    affinity: str = "mask"  # "mask" (per the association definition) or "box"
    stage1_floor: float = 0.0  # stage-1 score margin below -> empty prediction

    def __post_init__(self):
        if self.affinity not in ("mask", "box"):
            raise ValueError("affinity must be 'mask' or 'box'")


@dataclass(frozen=True)
class Detection:
    mask: np.ndarray
    confidence: float = 1.0
    box: AxisBox | None = None

    def __post_init__(self):
        if not self.mask.any():
            raise ValueError("detection mask must be nonempty")
        if self.box is None:
            object.__setattr__(self, "box", min_max_box(self.mask))


@dataclass
class Track:
    id: int
    tracker: Tracker
    last_mask: np.ndarray
    last_box: AxisBox
    status: str = "active"  # "active" | "lost"
    lost_age: int = 0


@dataclass
class CascadeResult:
    mask: np.ndarray
    stage1_box: AxisBox  # coarse localization, recorded for diagnostics
    score: float
    low_score: bool = False


@dataclass
class StepRecord:
    """Per-frame association diagnostics."""

    assignment: Assignment
    matched: list[tuple[int, int]] = field(default_factory=list)  # (det idx, track id)
    spawned: list[int] = field(default_factory=list)
    dropped: list[int] = field(default_factory=list)
    affinity: np.ndarray | None = None


def cascade_predict(track: Track, frame: np.ndarray, config: MotConfig) -> CascadeResult:
    """Two-stage prediction: coarse box from the regression branch, then a
    refined mask from a re-crop at that box.

    The stage-2 crop follows the stage-1 center; its scale adopts the
    stage-1 size through the tracker's size damping, with the raw size
    additionally clamped to [1/2, 2]x the previous reference so a single bad
    regression readout cannot throw the re-crop out of scale.
    """
    tracker = track.tracker
    st = tracker.state
    patch, tf = tracker._search_transform(frame)
    with torch.no_grad():
        grid, pyramid = tracker._forward(patch)
    cell, anchor_idx, score = tracker._select_cell(grid)

    if tracker.net.variant == "three_branch":
        cx, cy, w, h = tracker.decode_box_branch(grid, cell, anchor_idx, tf)
    else:
        # single-branch fallback: the chosen cell's window center, previous size
        x0, y0, x1, y1 = tracker.config.cell_window(*cell)
        cx, cy = tf.to_source((x0 + x1) / 2, (y0 + y1) / 2)
        w, h = st.size

    d = tracker.options.size_damping
    w = st.size[0] * (1 - d) + float(np.clip(w, st.size[0] / 2, st.size[0] * 2)) * d
    h = st.size[1] * (1 - d) + float(np.clip(h, st.size[1] / 2, st.size[1] * 2)) * d
    fh, fw = st.frame_hw
    w = float(np.clip(w, 2.0, fw))
    h = float(np.clip(h, 2.0, fh))
    cx = float(np.clip(cx, 0.0, fw))
    cy = float(np.clip(cy, 0.0, fh))
    stage1 = AxisBox(
        max(0.0, cx - w / 2), max(0.0, cy - h / 2), min(float(fw), cx + w / 2), min(float(fh), cy + h / 2)
    )

    if score < config.stage1_floor:
        return CascadeResult(
            mask=np.zeros(st.frame_hw, dtype=bool), stage1_box=stage1, score=score, low_score=True
        )

    # stage 2: re-crop centered on the stage-1 box and read out the mask
    saved_center, saved_size = st.center, st.size
    st.center = (cx, cy)
    st.size = (w, h)
    patch2, tf2 = tracker._search_transform(frame)
    with torch.no_grad():
        grid2, pyramid2 = tracker._forward(patch2)
    cell2, _, _ = tracker._select_cell(grid2)
    mask = tracker._cell_mask(grid2, pyramid2, cell2, tf2)
    st.center, st.size = saved_center, saved_size
    return CascadeResult(mask=mask, stage1_box=stage1, score=score)


class MultiObjectTracker:
    """Owns the track list and the per-frame association step."""

    def __init__(
        self,
        net: SiameseTracker,
        config: MotConfig = MotConfig(),
        track_options: TrackOptions = TrackOptions(),
    ):
        self.net = net
        self.config = config
        self.track_options = track_options
        self.tracks: list[Track] = []
        self._ids = itertools.count()

    def _spawn(self, frame: np.ndarray, det: Detection) -> Track:
        tracker = Tracker(self.net, self.track_options)
        tracker.init(frame, det.box)
        return Track(
            id=next(self._ids),
            tracker=tracker,
            last_mask=det.mask,
            last_box=det.box,
        )

    def step(self, frame: np.ndarray, detections: list[Detection]) -> StepRecord:
        """One frame: predict, associate, update lifecycle."""
        cfg = self.config
        predictions = [cascade_predict(t, frame, cfg) for t in self.tracks]

        m, n = len(detections), len(self.tracks)
        aff = np.zeros((m, n))
        for i, det in enumerate(detections):
            for j, pred in enumerate(predictions):
                if cfg.affinity == "mask":
                    aff[i, j] = iou_mask(det.mask, pred.mask)
                else:
                    aff[i, j] = iou_axis(det.box, min_max_box(pred.mask)) if pred.mask.any() else 0.0
        sol = hungarian(aff) if aff.size else Assignment(pairs=(), total=0.0)

        record = StepRecord(assignment=sol, affinity=aff)
        matched_tracks, matched_dets = set(), set()
        for i, j in sol.pairs:
            if aff[i, j] < cfg.min_affinity:
                continue
            track = self.tracks[j]
            det = detections[i]
            track.last_mask = det.mask
            track.last_box = det.box
            track.status = "active"
            track.lost_age = 0
            st = track.tracker.state
            st.center = det.box.center
            st.size = (det.box.width, det.box.height)
            matched_tracks.add(j)
            matched_dets.add(i)
            record.matched.append((i, track.id))

        survivors = []
        for j, track in enumerate(self.tracks):
            if j in matched_tracks:
                survivors.append(track)
                continue
            track.lost_age += 1
            track.status = "lost"
            if track.lost_age > cfg.max_lost:
                record.dropped.append(track.id)
            else:
                # keep the self-predicted mask so the track can recover later
                if predictions[j].mask.any():
                    track.last_mask = predictions[j].mask
                survivors.append(track)
        self.tracks = survivors

        for i, det in enumerate(detections):
            if i in matched_dets or det.confidence < cfg.spawn_threshold:
                continue
            track = self._spawn(frame, det)
            self.tracks.append(track)
            record.spawned.append(track.id)
        return record

    @property
    def active_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.status == "active"]


class OracleDetector:
    """Ground-truth-backed detector with optional dropout and boundary erosion.

    Callable with a frame index; deterministic for a fixed seed and call
    sequence. Stands in for an external instance-segmentation detector.
    """

    def __init__(self, sequence, dropout: float = 0.0, erosion_px: int = 0, seed: int = 0):
        self.sequence = sequence
        self.dropout = dropout
        self.erosion_px = erosion_px
        self.rng = np.random.default_rng(seed)

    def __call__(self, frame_index: int) -> list[Detection]:
        out = []
        for mask in self.sequence.masks[frame_index]:
            if self.dropout > 0 and self.rng.uniform() < self.dropout:
                continue
            m = np.asarray(mask, dtype=bool)
            if self.erosion_px > 0:
                m = ndimage.binary_erosion(m, iterations=self.erosion_px, border_value=0)
            if not m.any():
                continue
            out.append(Detection(mask=m, confidence=1.0))
        return out


def read_detection_directory(path, frame_index: int) -> list[Detection]:
    """External-detector integration point: per-frame instance-ID mask images.

    ``path`` holds files named ``<frame:06d>.png`` where pixel value 0 is
    background and each positive value is one detected instance.
    """
    from PIL import Image

    file = f"{path}/{frame_index:06d}.png"
    ids_img = np.asarray(Image.open(file))
    out = []
    for obj_id in np.unique(ids_img):
        if obj_id == 0:
            continue
        m = ids_img == obj_id
        out.append(Detection(mask=m, confidence=1.0))
    return out
