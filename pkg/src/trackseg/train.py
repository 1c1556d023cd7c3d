"""Training machinery: crops and augmentation, anchors, labels, losses, SGD loop.

Patch layout: the exemplar patch is a context-padded crop around the target,
the search patch a larger crop of the (possibly different) frame around the
same object, so that with zero augmentation the object is centered in both.
Ground truth travels with the search crop as an axis box and a binary mask in
patch coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .geom import AxisBox, min_max_box
from .model import ModelConfig, SiameseTracker, build_model, save_checkpoint
from .patches import context_side, extract_window, warp_mask, window_transform


@dataclass(frozen=True)
class TrainConfig:
    # loss weights: the mask term is strongly upweighted against score/box terms
    lambda_mask: float = 32.0
    lambda_sim: float = 1.0
    lambda_score: float = 1.0
    lambda_reg: float = 1.0
    smooth_l1_beta: float = 1.0
    prob_clamp: float = 1e-7
    # label assignment
    iou_positive: float = 0.6  # anchor IoU at least this -> positive
    center_radius: float = 16.0  # feature-space px, strictly below -> positive
    # schedule: linear warmup then logarithmic decay
    lr_start: float = 1e-3
    lr_peak: float = 5e-3
    lr_final: float = 5e-4
    warmup_epochs: int = 5
    decay_epochs: int = 15
    momentum: float = 0.9
    grad_clip: float = 100.0  # safety net against rare exploding steps
    batch_size: int = 8
    steps_per_epoch: int = 40
    # augmentation (patch-coordinate pixels / content scale factors)
    exemplar_shift: float = 4.0
    search_shift: float = 64.0
    exemplar_scale: tuple[float, float] = (0.95, 1.05)
    search_scale: tuple[float, float] = (0.82, 1.18)
    context_amount: float = 0.5
    max_frame_gap: int = 8
    min_foreground_px: int = 4
    refined_positives_per_pair: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.smooth_l1_beta <= 0 or self.iou_positive <= 0 or self.center_radius <= 0:
            raise ValueError("thresholds must be positive")
        if not (0 < self.iou_positive <= 1):
            raise ValueError("iou_positive must lie in (0, 1]")

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.decay_epochs


class PairRejected(Exception):
    """The annotated object is unusable after cropping (too few pixels)."""


class TrainingDiverged(RuntimeError):
    """Optimization produced a non-finite loss."""


# ---------------------------------------------------------------------------
# anchors and box deltas


def anchor_ratios(k: int) -> tuple[float, ...]:
    """k anchor aspect ratios (h/w), geometrically spaced over [1/3, 3]."""
    if k == 1:
        return (1.0,)
    if k == 5:
        return (1 / 3, 1 / 2, 1.0, 2.0, 3.0)
    return tuple(float(r) for r in np.logspace(math.log10(1 / 3), math.log10(3.0), k))


ANCHOR_BASE_SCALE = 8.0  # anchor area = (total_stride * this)^2, one scale


def anchor_grid(config: ModelConfig) -> np.ndarray:
    """(g, g, k, 4) anchors as (cx, cy, w, h) in search-patch pixels.

    Anchor centers coincide with the response-cell window centers; all
    anchors share one area and differ in aspect ratio.
    """
    centers = config.cell_centers()  # (g, g, 2)
    base = config.total_stride * ANCHOR_BASE_SCALE
    ratios = np.array(anchor_ratios(config.anchors_per_cell))
    w = base / np.sqrt(ratios)
    h = base * np.sqrt(ratios)
    g = config.response_side
    k = len(ratios)
    out = np.empty((g, g, k, 4))
    out[..., 0] = centers[..., 0][:, :, None]
    out[..., 1] = centers[..., 1][:, :, None]
    out[..., 2] = w[None, None, :]
    out[..., 3] = h[None, None, :]
    return out


def box_to_cxcywh(box: AxisBox) -> np.ndarray:
    return np.array([(box.x_min + box.x_max) / 2, (box.y_min + box.y_max) / 2, box.width, box.height])


def cxcywh_to_box(arr) -> AxisBox:
    cx, cy, w, h = (float(v) for v in arr)
    return AxisBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def encode_deltas(anchor, gt) -> np.ndarray:
    """Normalized offsets of a ground-truth box from an anchor.

    Both inputs are (..., 4) arrays in (cx, cy, w, h) form. The size offsets
    use the log-ratio form for both width and height so that encoding an
    anchor against itself yields exactly zero.
    """
    anchor = np.asarray(anchor, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if np.any(gt[..., 2:] <= 0):
        raise ValueError("ground-truth sizes must be positive")
    out = np.empty(np.broadcast_shapes(anchor.shape, gt.shape))
    out[..., 0] = (gt[..., 0] - anchor[..., 0]) / anchor[..., 2]
    out[..., 1] = (gt[..., 1] - anchor[..., 1]) / anchor[..., 3]
    out[..., 2] = np.log(gt[..., 2] / anchor[..., 2])
    out[..., 3] = np.log(gt[..., 3] / anchor[..., 3])
    return out


def decode_deltas(anchor, delta) -> np.ndarray:
    anchor = np.asarray(anchor, dtype=float)
    delta = np.asarray(delta, dtype=float)
    out = np.empty(np.broadcast_shapes(anchor.shape, delta.shape))
    out[..., 0] = anchor[..., 0] + delta[..., 0] * anchor[..., 2]
    out[..., 1] = anchor[..., 1] + delta[..., 1] * anchor[..., 3]
    out[..., 2] = anchor[..., 2] * np.exp(delta[..., 2])
    out[..., 3] = anchor[..., 3] * np.exp(delta[..., 3])
    return out


# ---------------------------------------------------------------------------
# label assignment


def assign_labels_2b(gt_box: AxisBox, config: ModelConfig, radius: float = 16.0) -> np.ndarray:
    """(g, g) grid of +/-1: positive where the cell center is strictly closer
    than ``radius`` feature-space pixels to the ground-truth center."""
    centers = config.cell_centers()
    cx, cy = box_to_cxcywh(gt_box)[:2]
    d = np.hypot(centers[..., 0] - cx, centers[..., 1] - cy) / config.total_stride
    return np.where(d < radius, 1, -1).astype(np.int8)


def assign_labels_3b(anchors: np.ndarray, gt_box: AxisBox, iou_threshold: float = 0.6) -> np.ndarray:
    """(g, g, k) grid of +/-1: positive where anchor IoU >= threshold."""
    ax0 = anchors[..., 0] - anchors[..., 2] / 2
    ay0 = anchors[..., 1] - anchors[..., 3] / 2
    ax1 = anchors[..., 0] + anchors[..., 2] / 2
    ay1 = anchors[..., 1] + anchors[..., 3] / 2
    iw = np.minimum(ax1, gt_box.x_max) - np.maximum(ax0, gt_box.x_min)
    ih = np.minimum(ay1, gt_box.y_max) - np.maximum(ay0, gt_box.y_min)
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = anchors[..., 2] * anchors[..., 3] + gt_box.area - inter
    iou = np.where(union > 0, inter / union, 0.0)
    return np.where(iou >= iou_threshold, 1, -1).astype(np.int8)


def row_labels_from_anchors(y_anchor: np.ndarray) -> np.ndarray:
    """A cell is positive when any of its anchors is."""
    return y_anchor.max(axis=-1)


def mask_labels(gt_mask: np.ndarray, config: ModelConfig, side: int, positions) -> np.ndarray:
    """Per-cell mask labels (+/-1) under each cell's candidate-window transform.

    ``positions`` is a sequence of (row, col) cells; the label for a cell is
    the ground-truth mask nearest-sampled on a ``side`` x ``side`` grid over
    that cell's exemplar-scale window of the search patch.
    """
    offs = np.floor((np.arange(side) + 0.5) * config.exemplar_side / side).astype(np.int64)
    s = config.total_stride
    out = np.empty((len(positions), side * side), dtype=np.int8)
    for n, (i, j) in enumerate(positions):
        win = gt_mask[s * i + offs[:, None], s * j + offs[None, :]]
        out[n] = np.where(win, 1, -1).ravel()
    return out


def all_cells(config: ModelConfig) -> list[tuple[int, int]]:
    g = config.response_side
    return [(i, j) for i in range(g) for j in range(g)]


# ---------------------------------------------------------------------------
# losses (torch; differentiable when fed tensors that require grad)


def _ftensor(x) -> torch.Tensor:
    """Coerce to a float tensor; plain Python numbers become float64."""
    if torch.is_tensor(x):
        return x
    if isinstance(x, np.ndarray):
        return torch.as_tensor(x)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def smooth_l1(x, beta: float = 1.0):
    """Huber-style penalty: quadratic below |x| = 1/beta^2, linear above."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    x = _ftensor(x)
    knee = 1.0 / beta**2
    ax = torch.abs(x)
    return torch.where(ax < knee, 0.5 * beta**2 * x * x, ax - 0.5 * knee)


def loss_sim(scores, y):
    """Mean logistic loss of raw scores against +/-1 labels."""
    scores = _ftensor(scores)
    y = torch.as_tensor(y, dtype=scores.dtype, device=scores.device)
    return F.softplus(-y * scores).mean()


def loss_score(p, y, clamp: float = 1e-7):
    """Cross-entropy of per-anchor object probabilities against +/-1 labels.

    Probabilities are clamped away from {0, 1} so the loss is total.
    """
    p = _ftensor(p)
    y01 = (torch.as_tensor(y, dtype=p.dtype, device=p.device) + 1) / 2
    p = p.clamp(clamp, 1 - clamp)
    return -(y01 * torch.log(p) + (1 - y01) * torch.log1p(-p)).mean()


def loss_reg(q, delta, y, beta: float = 1.0):
    """Box-regression loss; negative anchors contribute exactly zero.

    ``q`` and ``delta`` are (..., k, 4) predicted and target offsets, ``y``
    the (..., k) anchor labels. Normalized by 2 * k * (number of cells), so
    the magnitude scales with the fraction of positive anchors.
    """
    q = _ftensor(q)
    delta = torch.as_tensor(delta, dtype=q.dtype, device=q.device)
    y = torch.as_tensor(y, dtype=q.dtype, device=q.device)
    k = y.shape[-1]
    n_cells = y.numel() // k
    per = smooth_l1(delta - q, beta).sum(dim=-1)
    return ((y + 1) * per).sum() / (2 * k * n_cells)


def loss_mask(mask_logits, labels, y):
    """Pixel-wise binary logistic loss, counted only on positive cells.

    ``mask_logits`` and ``labels`` are (N, wh); ``y`` is the (N,) cell label
    vector. Each positive cell contributes its mean pixel loss (weight
    (1 + y) / (2 wh)); label content of negative cells is ignored.
    """
    mask_logits = _ftensor(mask_logits)
    labels = torch.as_tensor(labels, dtype=mask_logits.dtype, device=mask_logits.device)
    y = torch.as_tensor(y, dtype=mask_logits.dtype, device=mask_logits.device)
    wh = mask_logits.shape[-1]
    per_cell = F.softplus(-labels * mask_logits).sum(dim=-1)
    return ((1 + y) / (2 * wh) * per_cell).sum()


def total_loss(variant: str, components: dict, config: TrainConfig):
    """Weighted multi-task objective for either variant."""
    if variant == "two_branch":
        return config.lambda_mask * components["mask"] + config.lambda_sim * components["sim"]
    if variant == "three_branch":
        return (
            config.lambda_mask * components["mask"]
            + config.lambda_score * components["score"]
            + config.lambda_reg * components["reg"]
        )
    raise ValueError(f"unknown variant {variant!r}")


def learning_rate(progress_epochs: float, config: TrainConfig) -> float:
    """Piecewise schedule: linear warmup, then logarithmic decay to lr_final."""
    t = progress_epochs
    if t <= config.warmup_epochs:
        frac = t / config.warmup_epochs if config.warmup_epochs else 1.0
        return config.lr_start + (config.lr_peak - config.lr_start) * frac
    frac = min(1.0, (t - config.warmup_epochs) / config.decay_epochs)
    return config.lr_peak * (config.lr_final / config.lr_peak) ** frac


# ---------------------------------------------------------------------------
# crops and training pairs


@dataclass(frozen=True)
class AugParams:
    """Deterministic augmentation parameters for one pair."""

    shift_z: tuple[float, float] = (0.0, 0.0)  # object displacement, exemplar px
    scale_z: float = 1.0
    shift_x: tuple[float, float] = (0.0, 0.0)  # object displacement, search px
    scale_x: float = 1.0


def sample_aug(rng: np.random.Generator, config: TrainConfig) -> AugParams:
    return AugParams(
        shift_z=tuple(rng.uniform(-config.exemplar_shift, config.exemplar_shift, size=2)),
        scale_z=float(rng.uniform(*config.exemplar_scale)),
        shift_x=tuple(rng.uniform(-config.search_shift, config.search_shift, size=2)),
        scale_x=float(rng.uniform(*config.search_scale)),
    )


@dataclass
class TrainingPair:
    exemplar: np.ndarray  # (E, E, 3) float
    search: np.ndarray  # (S, S, 3) float
    gt_box: AxisBox  # in search-patch coordinates
    gt_mask: np.ndarray  # (S, S) bool, search-patch coordinates


def make_training_pair(
    frame_z: np.ndarray,
    mask_z: np.ndarray,
    frame_x: np.ndarray,
    mask_x: np.ndarray,
    model_config: ModelConfig,
    train_config: TrainConfig,
    aug: AugParams = AugParams(),
) -> TrainingPair:
    """Build one exemplar/search pair from two annotated frames of an object.

    The object content is displaced by ``aug.shift_*`` patch pixels and its
    apparent size multiplied by ``aug.scale_*``; ground truth is transformed
    consistently with the search crop.
    """
    pad = float(np.mean(frame_x, axis=(0, 1)).mean())

    box_z = min_max_box(mask_z)
    s_z = context_side(box_z.width, box_z.height, train_config.context_amount)
    e = model_config.exemplar_side
    side_z = s_z / aug.scale_z
    czx, czy = box_z.center
    center_z = (czx - aug.shift_z[0] * side_z / e, czy - aug.shift_z[1] * side_z / e)
    exemplar, _ = extract_window(frame_z, center_z, side_z, e, pad_value=pad)

    box_x = min_max_box(mask_x)
    s = model_config.search_side
    s_x = context_side(box_x.width, box_x.height, train_config.context_amount) * s / e
    side_x = s_x / aug.scale_x
    cxx, cxy = box_x.center
    center_x = (cxx - aug.shift_x[0] * side_x / s, cxy - aug.shift_x[1] * side_x / s)
    search, tf = extract_window(frame_x, center_x, side_x, s, pad_value=pad)

    gt_mask = warp_mask(mask_x, tf, s)
    if gt_mask.sum() < train_config.min_foreground_px:
        raise PairRejected(f"object has {int(gt_mask.sum())} px after cropping")
    gt_box = tf.box_to_patch(box_x)
    return TrainingPair(exemplar=exemplar, search=search, gt_box=gt_box, gt_mask=gt_mask)


def sample_pair(
    sequences,
    rng: np.random.Generator,
    model_config: ModelConfig,
    train_config: TrainConfig,
    max_tries: int = 20,
) -> TrainingPair:
    """Draw a random (sequence, object, frame pair) and build a training pair."""
    for _ in range(max_tries):
        seq = sequences[int(rng.integers(len(sequences)))]
        obj = int(rng.integers(seq.n_objects))
        t1 = int(rng.integers(seq.n_frames))
        lo = max(0, t1 - train_config.max_frame_gap)
        hi = min(seq.n_frames - 1, t1 + train_config.max_frame_gap)
        t2 = int(rng.integers(lo, hi + 1))
        if not (seq.masks[t1][obj].any() and seq.masks[t2][obj].any()):
            continue
        try:
            return make_training_pair(
                seq.frames[t1],
                seq.masks[t1][obj],
                seq.frames[t2],
                seq.masks[t2][obj],
                model_config,
                train_config,
                sample_aug(rng, train_config),
            )
        except PairRejected:
            continue
    raise PairRejected(f"no usable pair found in {max_tries} tries")


# ---------------------------------------------------------------------------
# batch assembly and the optimization loop


def scores_to_probs(scores: torch.Tensor, k: int) -> torch.Tensor:
    """(B, 2k, g, g) raw scores -> (B, g, g, k) object probabilities."""
    b, _, g, _ = scores.shape
    pair = scores.reshape(b, k, 2, g, g)
    return torch.softmax(pair, dim=2)[:, :, 1].permute(0, 2, 3, 1)


def deltas_to_grid(deltas: torch.Tensor, k: int) -> torch.Tensor:
    """(B, 4k, g, g) -> (B, g, g, k, 4)."""
    b, _, g, _ = deltas.shape
    return deltas.reshape(b, k, 4, g, g).permute(0, 3, 4, 1, 2)


def _batch_tensors(pairs: list[TrainingPair], dtype=torch.float32):
    z = torch.from_numpy(np.stack([p.exemplar for p in pairs]).transpose(0, 3, 1, 2)).to(dtype)
    x = torch.from_numpy(np.stack([p.search for p in pairs]).transpose(0, 3, 1, 2)).to(dtype)
    return z, x


def compute_batch_loss(
    net: SiameseTracker,
    pairs: list[TrainingPair],
    anchors: np.ndarray | None,
    train_config: TrainConfig,
    rng: np.random.Generator,
):
    """Forward pass plus every loss component for one batch of pairs."""
    cfg = net.config
    z, x = _batch_tensors(pairs, dtype=next(net.parameters()).dtype)
    grid, pyramid = net(z, x)
    g = cfg.response_side
    components: dict[str, torch.Tensor] = {}

    if net.variant == "three_branch":
        y_anchor = np.stack([assign_labels_3b(anchors, p.gt_box, train_config.iou_positive) for p in pairs])
        deltas_gt = np.stack([encode_deltas(anchors, box_to_cxcywh(p.gt_box)) for p in pairs])
        y_row = row_labels_from_anchors(y_anchor)
        p_obj = scores_to_probs(grid.scores, cfg.anchors_per_cell)
        components["score"] = loss_score(p_obj, torch.from_numpy(y_anchor), train_config.prob_clamp)
        q = deltas_to_grid(grid.box_deltas, cfg.anchors_per_cell)
        components["reg"] = loss_reg(q, torch.from_numpy(deltas_gt), torch.from_numpy(y_anchor), train_config.smooth_l1_beta)
    else:
        y_row = np.stack([assign_labels_2b(p.gt_box, cfg, train_config.center_radius) for p in pairs])
        components["sim"] = loss_sim(grid.scores[:, 0], torch.from_numpy(y_row))

    # plain mask head, supervised on every cell (negatives weigh zero);
    # divide by the batch size so the batch loss is the per-pair mean
    cells = all_cells(cfg)
    head_labels = np.stack([mask_labels(p.gt_mask, cfg, cfg.mask_side, cells) for p in pairs])
    logits = grid.mask_logits.permute(0, 2, 3, 1).reshape(len(pairs), g * g, -1)
    mask_term = loss_mask(
        logits.reshape(-1, cfg.mask_side**2),
        torch.from_numpy(head_labels.reshape(-1, cfg.mask_side**2)),
        torch.from_numpy(y_row.reshape(-1)),
    ) * (1.0 / len(pairs))

    # refinement decoder, supervised on a few positive cells per pair
    positions, refined_labels = [], []
    for b, p in enumerate(pairs):
        pos = np.argwhere(y_row[b] > 0)
        if len(pos) == 0:
            continue
        take = pos[rng.choice(len(pos), size=min(train_config.refined_positives_per_pair, len(pos)), replace=False)]
        positions.extend((b, int(i), int(j)) for i, j in take)
        refined_labels.append(mask_labels(p.gt_mask, cfg, cfg.refined_mask_side, [tuple(ij) for ij in take]))
    if positions:
        refined_logits = net.refine(grid.features, pyramid, positions)
        refined_term = loss_mask(
            refined_logits,
            torch.from_numpy(np.concatenate(refined_labels)),
            torch.ones(len(positions), dtype=refined_logits.dtype),
        ) * (1.0 / len(pairs))
        components["mask"] = mask_term + refined_term
    else:
        components["mask"] = mask_term

    return total_loss(net.variant, components, train_config), components


def train(
    sequences,
    model_config: ModelConfig,
    train_config: TrainConfig,
    variant: str = "three_branch",
    out_dir=None,
    log_every: int = 0,
) -> tuple[SiameseTracker, list[dict]]:
    """SGD with linear-warmup / log-decay schedule over synthetic sequences.

    Deterministic under a fixed seed. Writes one checkpoint per epoch when
    ``out_dir`` is given. Raises ``TrainingDiverged`` on a non-finite loss.
    """
    if not sequences:
        raise ValueError("training needs at least one sequence")
    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    net = build_model(model_config, variant, seed=train_config.seed)
    net.train()
    anchors = anchor_grid(model_config) if variant == "three_branch" else None
    opt = torch.optim.SGD(net.parameters(), lr=train_config.lr_start, momentum=train_config.momentum)

    history: list[dict] = []
    steps = train_config.steps_per_epoch
    for epoch in range(train_config.total_epochs):
        for step in range(steps):
            lr = learning_rate(epoch + step / steps, train_config)
            for group in opt.param_groups:
                group["lr"] = lr
            pairs = [sample_pair(sequences, rng, model_config, train_config) for _ in range(train_config.batch_size)]
            loss, components = compute_batch_loss(net, pairs, anchors, train_config, rng)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {loss.item()}")
            opt.zero_grad()
            loss.backward()
            if train_config.grad_clip:
                torch.nn.utils.clip_grad_norm_(net.parameters(), train_config.grad_clip)
            opt.step()
            record = {"epoch": epoch, "step": step, "lr": lr, "loss": float(loss.item())}
            record.update({k: float(v.item()) for k, v in components.items()})
            history.append(record)
            if log_every and (step + 1) % log_every == 0:
                parts = " ".join(f"{k}={v:.4f}" for k, v in record.items() if k not in ("epoch", "step"))
                print(f"epoch {epoch} step {step + 1}/{steps} {parts}")
        if out_dir is not None:
            save_checkpoint(f"{out_dir}/checkpoint_epoch{epoch:03d}.npz", net)
    net.eval()
    return net, history
