"""Online single-object tracker.

Initialized once from an axis-aligned box; afterwards the network parameters
and the cached exemplar features never change. Each frame: crop a search
region around the previous target position, pick the response cell with the
maximum classification score, binarize its (refined) mask at 0.5, paste it
into frame coordinates, and derive the output box with the configured
strategy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geom import AxisBox, RotatedBox, mbr, min_max_box, opt_box
from .model import SiameseTracker, depthwise_xcorr, to_input
from .patches import WindowTransform, context_side, extract_window, paste_mask
from .train import anchor_grid, decode_deltas

STRATEGIES = ("min_max", "mbr", "opt")


@dataclass(frozen=True)
class TrackOptions:
    strategy: str = "min_max"
    use_refined_mask: bool = True
    mask_threshold: float = 0.5  # strict >, so all-zero logits give an empty mask
    context_amount: float = 0.5
    size_damping: float = 0.35  # fraction of the new size adopted per frame
    window_influence: float = 0.0  # cosine window on probabilities; off by default
    score_floor: float | None = None  # flag frames whose best score is below this
    min_target_side: float = 2.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")


@dataclass
class TrackerState:
    """Single-owner mutable state for one tracked object."""

    z_feat: torch.Tensor  # cached exemplar features, immutable after init
    center: tuple[float, float]  # target center, frame coords
    size: tuple[float, float]  # target (w, h), frame coords
    frame_hw: tuple[int, int]
    last_box: AxisBox | RotatedBox | None = None
    frame_index: int = 0


@dataclass
class FrameResult:
    mask: np.ndarray  # frame-size bool
    box: AxisBox | RotatedBox
    score: float  # max classification logit (margin for the anchored variant)
    cell: tuple[int, int]  # chosen response cell (row, col)
    fallback: bool = False  # empty mask: the previous box was reused
    low_score: bool = False


def _frame_mean(frame: np.ndarray) -> float:
    return float(np.mean(frame))


class Tracker:
    """Runs one object; many trackers may share the same frozen network."""

    def __init__(self, net: SiameseTracker, options: TrackOptions = TrackOptions()):
        self.net = net.eval()
        self.options = options
        self.config = net.config
        self.anchors = anchor_grid(net.config) if net.variant == "three_branch" else None
        g = net.config.response_side
        hann = np.hanning(g + 2)[1:-1]
        self._window = np.outer(hann, hann)
        self.state: TrackerState | None = None

    # -- initialization ----------------------------------------------------

    def init(self, frame: np.ndarray, box: AxisBox) -> TrackerState:
        """Cache exemplar features from a context-padded crop around ``box``."""
        h, w = frame.shape[:2]
        if box.width < 2 or box.height < 2:
            raise ValueError(f"degenerate init box {box}")
        if box.x_min < 0 or box.y_min < 0 or box.x_max > w or box.y_max > h:
            raise ValueError(f"init box {box} outside the {w}x{h} frame")
        cx, cy = box.center
        s_z = context_side(box.width, box.height, self.options.context_amount)
        patch, _ = extract_window(frame, (cx, cy), s_z, self.config.exemplar_side, pad_value=_frame_mean(frame))
        with torch.no_grad():
            z_feat = self.net.template(to_input(patch, dtype=next(self.net.parameters()).dtype))
        self.state = TrackerState(
            z_feat=z_feat,
            center=(cx, cy),
            size=(box.width, box.height),
            frame_hw=(h, w),
            last_box=box,
        )
        return self.state

    # -- per-frame update --------------------------------------------------

    def _search_transform(self, frame: np.ndarray) -> tuple[np.ndarray, WindowTransform]:
        st = self.state
        s_z = context_side(st.size[0], st.size[1], self.options.context_amount)
        s_x = s_z * self.config.search_side / self.config.exemplar_side
        return extract_window(frame, st.center, s_x, self.config.search_side, pad_value=_frame_mean(frame))

    def _select_cell(self, grid):
        """Deterministic argmax (row-major on ties) over the score output."""
        opts = self.options
        if self.net.variant == "three_branch":
            k = self.config.anchors_per_cell
            g = self.config.response_side
            pair = grid.scores[0].reshape(k, 2, g, g)
            margin = (pair[:, 1] - pair[:, 0]).numpy()  # (k, g, g) fg-bg logit
            p = 1.0 / (1.0 + np.exp(-margin))
            if opts.window_influence > 0:
                p = p * (1 - opts.window_influence) + self._window[None] * opts.window_influence
            a, i, j = np.unravel_index(int(np.argmax(p)), p.shape)
            return (int(i), int(j)), int(a), float(margin[a, i, j])
        scores = grid.scores[0, 0].numpy()
        sel = scores
        if opts.window_influence > 0:
            p = 1.0 / (1.0 + np.exp(-scores))
            sel = p * (1 - opts.window_influence) + self._window * opts.window_influence
        i, j = np.unravel_index(int(np.argmax(sel)), sel.shape)
        return (int(i), int(j)), None, float(scores[i, j])

    def _cell_mask(self, grid, pyramid, cell, tf: WindowTransform) -> np.ndarray:
        """Binarize the chosen cell's mask and paste it into frame coords."""
        i, j = cell
        with torch.no_grad():
            if self.options.use_refined_mask:
                side = self.config.refined_mask_side
                logits = self.net.refine(grid.features, pyramid, [(0, i, j)])[0].reshape(side, side)
            else:
                side = self.config.mask_side
                logits = grid.mask_logits[0, :, i, j].reshape(side, side)
        prob = torch.sigmoid(logits).numpy()
        patch_mask = prob > self.options.mask_threshold
        x0, y0, x1, y1 = self.config.cell_window(i, j)
        window = AxisBox(*tf.to_source(x0, y0), *tf.to_source(x1, y1))
        return paste_mask(patch_mask, window, self.state.frame_hw)

    def decode_box_branch(self, grid, cell, anchor_idx, tf: WindowTransform):
        """Frame-coordinate box decoded from the chosen cell's anchor.

        The decoded center is clipped into the cell's candidate window: a
        positive anchor's target never leaves its own window, so anything
        further out is a bad readout, not a plausible location.
        """
        i, j = cell
        g = self.config.response_side
        delta = grid.box_deltas[0].reshape(self.config.anchors_per_cell, 4, g, g)
        q = delta[anchor_idx, :, i, j].numpy()
        ref = decode_deltas(self.anchors[i, j, anchor_idx], q)
        x0, y0, x1, y1 = self.config.cell_window(i, j)
        px = float(np.clip(ref[0], x0, x1))
        py = float(np.clip(ref[1], y0, y1))
        cx, cy = tf.to_source(px, py)
        return float(cx), float(cy), float(ref[2] * tf.scale), float(ref[3] * tf.scale)

    def track_frame(self, frame: np.ndarray) -> FrameResult:
        if self.state is None:
            raise RuntimeError("track_frame before init")
        st = self.state
        opts = self.options
        patch, tf = self._search_transform(frame)
        with torch.no_grad():
            grid, pyramid = self._forward(patch)
        cell, anchor_idx, score = self._select_cell(grid)
        mask = self._cell_mask(grid, pyramid, cell, tf)

        fallback = not mask.any()
        if fallback:
            box = st.last_box
        else:
            box = generate_box(mask, opts.strategy)

        # next-frame crop reference
        if self.net.variant == "three_branch":
            self._update_reference(*self.decode_box_branch(grid, cell, anchor_idx, tf))
        elif not fallback:
            ref = min_max_box(mask)
            self._update_reference(*ref.center, ref.width, ref.height)

        st.last_box = box
        st.frame_index += 1
        low = opts.score_floor is not None and score < opts.score_floor
        return FrameResult(mask=mask, box=box, score=score, cell=cell, fallback=fallback, low_score=low)

    def _forward(self, patch: np.ndarray):
        x = to_input(patch, dtype=self.state.z_feat.dtype)
        x_feat, pyramid = self.net.search_features(x)
        corr = depthwise_xcorr(self.state.z_feat, x_feat)
        return self.net.heads(corr), pyramid

    def _update_reference(self, cx: float, cy: float, new_w: float, new_h: float):
        # crop hygiene: one bad size readout must not rescale the crop
        st = self.state
        d = self.options.size_damping
        new_w = float(np.clip(new_w, st.size[0] / 2, st.size[0] * 2))
        new_h = float(np.clip(new_h, st.size[1] / 2, st.size[1] * 2))
        w = st.size[0] * (1 - d) + new_w * d
        h = st.size[1] * (1 - d) + new_h * d
        fh, fw = st.frame_hw
        lo = self.options.min_target_side
        w = float(np.clip(w, lo, fw))
        h = float(np.clip(h, lo, fh))
        cx = float(np.clip(cx, 0.0, fw))
        cy = float(np.clip(cy, 0.0, fh))
        st.center = (cx, cy)
        st.size = (w, h)

    # compatibility alias used by evaluation protocols
    def track(self, frame: np.ndarray) -> FrameResult:
        return self.track_frame(frame)


def generate_box(mask: np.ndarray, strategy: str) -> AxisBox | RotatedBox:
    """Fit a box to a nonempty mask with the configured strategy."""
    if strategy == "min_max":
        return min_max_box(mask)
    if strategy == "mbr":
        return mbr(mask)
    if strategy == "opt":
        return opt_box(mask)
    raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
