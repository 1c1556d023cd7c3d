"""Square sub-window extraction and mask pasting.

A "window" is a square region of a source image described by its center and
side in continuous source coordinates (pixel-as-unit-cell convention, see
``geom``). Extraction resamples the window onto an ``out_side`` x ``out_side``
patch; regions falling outside the source are filled with a pad value.

These transforms are the glue between frame coordinates, the 255x255 search
patch, and the exemplar-scale candidate windows of individual response cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import AxisBox


@dataclass(frozen=True)
class WindowTransform:
    """Affine map from patch coordinates to source coordinates.

    src = origin + patch_coord * scale, applied per axis (no rotation).
    """

    origin_x: float
    origin_y: float
    scale: float

    def to_source(self, x, y):
        return self.origin_x + np.asarray(x) * self.scale, self.origin_y + np.asarray(y) * self.scale

    def to_patch(self, x, y):
        return (np.asarray(x) - self.origin_x) / self.scale, (np.asarray(y) - self.origin_y) / self.scale

    def box_to_source(self, box: AxisBox) -> AxisBox:
        x0, y0 = self.to_source(box.x_min, box.y_min)
        x1, y1 = self.to_source(box.x_max, box.y_max)
        return AxisBox(float(x0), float(y0), float(x1), float(y1))

    def box_to_patch(self, box: AxisBox) -> AxisBox:
        x0, y0 = self.to_patch(box.x_min, box.y_min)
        x1, y1 = self.to_patch(box.x_max, box.y_max)
        return AxisBox(float(x0), float(y0), float(x1), float(y1))


def window_transform(center_x: float, center_y: float, side: float, out_side: int) -> WindowTransform:
    scale = side / out_side
    return WindowTransform(center_x - side / 2.0, center_y - side / 2.0, scale)


def extract_window(
    image: np.ndarray,
    center: tuple[float, float],
    side: float,
    out_side: int,
    pad_value=0.0,
    interpolation: str = "bilinear",
) -> tuple[np.ndarray, WindowTransform]:
    """Resample a square window of ``image`` to ``out_side`` pixels per axis.

    ``image`` is HxW or HxWxC. Returns (patch, transform) where the transform
    maps patch coordinates back to source coordinates.
    """
    if side <= 0:
        raise ValueError(f"window side must be positive, got {side}")
    tf = window_transform(center[0], center[1], side, out_side)
    h, w = image.shape[:2]
    # Patch cell centers in source coordinates.
    coords = np.arange(out_side, dtype=np.float64) + 0.5
    sx, _ = tf.to_source(coords, 0.0)
    _, sy = tf.to_source(0.0, coords)

    if interpolation == "nearest":
        ix = np.floor(sx).astype(np.int64)
        iy = np.floor(sy).astype(np.int64)
        valid = (ix >= 0) & (ix < w)
        validy = (iy >= 0) & (iy < h)
        gx = np.clip(ix, 0, w - 1)
        gy = np.clip(iy, 0, h - 1)
        patch = image[gy[:, None], gx[None, :]]
        inside = validy[:, None] & valid[None, :]
        patch = _fill_outside(patch, inside, pad_value)
        return patch, tf

    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation {interpolation!r}")

    # Bilinear between cell centers; out-of-frame neighbors read the pad value.
    fx = sx - 0.5
    fy = sy - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    wx = (fx - x0)[None, :]
    wy = (fy - y0)[:, None]

    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
        squeeze = True
    else:
        squeeze = False

    def gather(yy, xx):
        ok = ((yy >= 0) & (yy < h))[:, None] & ((xx >= 0) & (xx < w))[None, :]
        vals = img[np.clip(yy, 0, h - 1)[:, None], np.clip(xx, 0, w - 1)[None, :]]
        return np.where(ok[:, :, None], vals, np.float64(pad_value))

    v00 = gather(y0, x0)
    v01 = gather(y0, x0 + 1)
    v10 = gather(y0 + 1, x0)
    v11 = gather(y0 + 1, x0 + 1)
    wx3 = wx[:, :, None]
    wy3 = wy[:, :, None]
    patch = (
        v00 * (1 - wx3) * (1 - wy3)
        + v01 * wx3 * (1 - wy3)
        + v10 * (1 - wx3) * wy3
        + v11 * wx3 * wy3
    )
    if squeeze:
        patch = patch[:, :, 0]
    return patch, tf


def _fill_outside(patch: np.ndarray, inside: np.ndarray, pad_value):
    if patch.dtype == bool:
        return patch & inside
    out = patch.copy()
    out[~inside] = pad_value
    return out


def warp_mask(mask: np.ndarray, tf: WindowTransform, out_side: int) -> np.ndarray:
    """Nearest-sample a source-coordinate boolean mask onto a patch grid."""
    coords = np.arange(out_side, dtype=np.float64) + 0.5
    sx, sy = tf.to_source(coords, coords)
    ix = np.floor(sx).astype(np.int64)
    iy = np.floor(sy).astype(np.int64)
    h, w = mask.shape
    okx = (ix >= 0) & (ix < w)
    oky = (iy >= 0) & (iy < h)
    out = mask[np.clip(iy, 0, h - 1)[:, None], np.clip(ix, 0, w - 1)[None, :]]
    return out & (oky[:, None] & okx[None, :])


def paste_mask(patch_mask: np.ndarray, window: AxisBox, frame_hw: tuple[int, int]) -> np.ndarray:
    """Paste a patch-resolution boolean mask into a frame-sized canvas.

    ``window`` is the patch footprint in frame coordinates; frame pixels whose
    centers fall inside it sample the patch with nearest interpolation, all
    other pixels stay background.
    """
    fh, fw = frame_hw
    out = np.zeros((fh, fw), dtype=bool)
    c0 = max(0, int(np.floor(window.x_min)))
    c1 = min(fw, int(np.ceil(window.x_max)))
    r0 = max(0, int(np.floor(window.y_min)))
    r1 = min(fh, int(np.ceil(window.y_max)))
    if c1 <= c0 or r1 <= r0:
        return out
    ph, pw = patch_mask.shape
    xs = np.arange(c0, c1) + 0.5
    ys = np.arange(r0, r1) + 0.5
    px = np.floor((xs - window.x_min) * pw / window.width).astype(np.int64)
    py = np.floor((ys - window.y_min) * ph / window.height).astype(np.int64)
    okx = (xs > window.x_min) & (xs < window.x_max)
    oky = (ys > window.y_min) & (ys < window.y_max)
    px = np.clip(px, 0, pw - 1)
    py = np.clip(py, 0, ph - 1)
    region = patch_mask[py[:, None], px[None, :]] & (oky[:, None] & okx[None, :])
    out[r0:r1, c0:c1] = region
    return out


def context_side(box_w: float, box_h: float, context_amount: float = 0.5) -> float:
    """Template crop side for a target of the given size.

    Pads width and height by ``context_amount`` times their sum, then takes
    the geometric mean so the crop is square.
    """
    margin = context_amount * (box_w + box_h)
    return float(np.sqrt((box_w + margin) * (box_h + margin)))
