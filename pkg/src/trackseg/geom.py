"""Geometry kernels: masks, boxes, IoU, box fitting, bipartite assignment.

Conventions used throughout the package:

* A binary mask is a 2-D boolean ``ndarray`` indexed ``[row, col]``.
* Pixel ``(row, col)`` occupies the unit cell ``[col, col+1] x [row, row+1]``
  in continuous coordinates, so its center sits at ``(col + 0.5, row + 0.5)``.
* Boxes live in continuous ``(x, y)`` coordinates under the same convention.

All functions are pure and never mutate their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import ConvexHull


class EmptyMaskError(ValueError):
    """Raised when an operation requires at least one foreground pixel."""


@dataclass(frozen=True)
class AxisBox:
    """Axis-aligned box, corners (x_min, y_min) / (x_max, y_max)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def corners(self) -> np.ndarray:
        """4x2 corner array, counter-clockwise in (x, y)."""
        return np.array(
            [
                [self.x_min, self.y_min],
                [self.x_max, self.y_min],
                [self.x_max, self.y_max],
                [self.x_min, self.y_max],
            ],
            dtype=float,
        )

    def to_rotated(self) -> "RotatedBox":
        cx, cy = self.center
        return RotatedBox(cx, cy, max(self.width, 1e-12), max(self.height, 1e-12), 0.0)


@dataclass(frozen=True)
class RotatedBox:
    """Rotated rectangle: center, size, rotation of the w-axis in radians.

    The angle is canonicalized into [0, pi/2) at construction by exploiting
    the rectangle symmetries (rotation by pi is the identity, rotation by
    pi/2 swaps width and height).
    """

    cx: float
    cy: float
    w: float
    h: float
    angle: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"non-positive rectangle size: w={self.w} h={self.h}")
        a = self.angle % math.pi
        w, h = self.w, self.h
        if a >= math.pi / 2:
            a -= math.pi / 2
            w, h = h, w
        object.__setattr__(self, "angle", a)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> np.ndarray:
        """4x2 corner array, counter-clockwise in (x, y)."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = np.array([c, s]) * (self.w / 2.0)
        v = np.array([-s, c]) * (self.h / 2.0)
        center = np.array([self.cx, self.cy])
        return np.stack([center - u - v, center + u - v, center + u + v, center - u + v])

    def enclosing_axis_box(self) -> AxisBox:
        pts = self.corners()
        return AxisBox(pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())


@dataclass(frozen=True)
class Assignment:
    """Solution of a max-affinity bipartite matching."""

    pairs: tuple[tuple[int, int], ...]
    total: float


def as_mask(values) -> np.ndarray:
    """Validate and normalize a binary mask to a read-only boolean array."""
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"mask must be a non-empty 2-D array, got shape {arr.shape}")
    out = arr.astype(bool, copy=True)
    out.flags.writeable = False
    return out


def iou_axis(a: AxisBox, b: AxisBox) -> float:
    """Intersection-over-union of two axis-aligned boxes (0 if both degenerate)."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_mask(a, b) -> float:
    """Mask IoU |a & b| / |a | b|; 0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _polygon_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon by a convex CCW polygon.

    A point is inside a directed CCW edge when it lies on or to the left of
    it, i.e. cross(edge, point - edge_start) >= 0.
    """
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inputs = output
        output = []
        prev = inputs[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inputs:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= 0:
                if prev_side < 0:
                    t = prev_side / (prev_side - cur_side)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif prev_side >= 0 and prev_side != cur_side:
                t = prev_side / (prev_side - cur_side)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, cur_side
    return np.array(output, dtype=float) if output else np.empty((0, 2))


def _ccw(pts: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0], pts[:, 1]
    signed = float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    return pts if signed >= 0 else pts[::-1]


def iou_rotated(a: RotatedBox, b: RotatedBox) -> float:
    """IoU of rotated rectangles via exact convex polygon clipping."""
    pa = _ccw(a.corners())
    pb = _ccw(b.corners())
    inter_poly = _clip_polygon(pa, pb)
    inter = _polygon_area(inter_poly) if len(inter_poly) >= 3 else 0.0
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def box_iou(a, b) -> float:
    """IoU between two boxes of any mix of AxisBox / RotatedBox (exact)."""
    if isinstance(a, AxisBox) and isinstance(b, AxisBox):
        return iou_axis(a, b)
    ra = a.to_rotated() if isinstance(a, AxisBox) else a
    rb = b.to_rotated() if isinstance(b, AxisBox) else b
    return iou_rotated(ra, rb)


def min_max_box(mask) -> AxisBox:
    """Tightest axis-aligned box containing every foreground pixel cell."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise EmptyMaskError("min_max_box of an empty mask")
    cols = np.flatnonzero(mask.any(axis=0))
    return AxisBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def _corner_points(mask: np.ndarray) -> np.ndarray:
    """Unique unit-cell corner points of all foreground pixels, as (x, y)."""
    rr, cc = np.nonzero(mask)
    if rr.size == 0:
        raise EmptyMaskError("geometry of an empty mask")
    xs = np.concatenate([cc, cc + 1, cc, cc + 1]).astype(float)
    ys = np.concatenate([rr, rr, rr + 1, rr + 1]).astype(float)
    return np.unique(np.stack([xs, ys], axis=1), axis=0)


def _hull_points(mask: np.ndarray) -> np.ndarray:
    pts = _corner_points(np.asarray(mask, dtype=bool))
    hull = ConvexHull(pts)
    return pts[hull.vertices]


def _min_area_rect(points: np.ndarray) -> RotatedBox:
    """Minimum-area enclosing rectangle of a point set (rotating calipers).

    Checks the rectangle aligned with every convex-hull edge; one of them is
    provably optimal.
    """
    hull = points if len(points) <= 2 else points[ConvexHull(points).vertices]
    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    keep = lengths > 1e-12
    dirs = edges[keep] / lengths[keep, None]
    normals = np.stack([-dirs[:, 1], dirs[:, 0]], axis=1)
    proj_u = hull @ dirs.T  # (n_pts, n_edges)
    proj_v = hull @ normals.T
    w = proj_u.max(axis=0) - proj_u.min(axis=0)
    h = proj_v.max(axis=0) - proj_v.min(axis=0)
    areas = w * h
    i = int(np.argmin(areas))
    cu = (proj_u[:, i].max() + proj_u[:, i].min()) / 2.0
    cv = (proj_v[:, i].max() + proj_v[:, i].min()) / 2.0
    center = cu * dirs[i] + cv * normals[i]
    angle = math.atan2(dirs[i, 1], dirs[i, 0])
    return RotatedBox(float(center[0]), float(center[1]), max(float(w[i]), 1e-9), max(float(h[i]), 1e-9), angle)


def mbr(mask) -> RotatedBox:
    """Minimum-area rotated rectangle enclosing all foreground pixel cells."""
    return _min_area_rect(_hull_points(mask))


def rasterize_box(box, height: int, width: int) -> np.ndarray:
    """Boolean mask of the pixels whose cell centers fall inside the box."""
    if isinstance(box, AxisBox):
        box = box.to_rotated()
    c, s = math.cos(box.angle), math.sin(box.angle)
    # Limit work to the enclosing axis-aligned window.
    ext = box.enclosing_axis_box()
    c0 = max(0, int(math.floor(ext.x_min)))
    c1 = min(width, int(math.ceil(ext.x_max)))
    r0 = max(0, int(math.floor(ext.y_min)))
    r1 = min(height, int(math.ceil(ext.y_max)))
    out = np.zeros((height, width), dtype=bool)
    if c1 <= c0 or r1 <= r0:
        return out
    xs = np.arange(c0, c1) + 0.5 - box.cx
    ys = np.arange(r0, r1) + 0.5 - box.cy
    gx, gy = np.meshgrid(xs, ys)
    u = gx * c + gy * s
    v = -gx * s + gy * c
    out[r0:r1, c0:c1] = (np.abs(u) <= box.w / 2.0) & (np.abs(v) <= box.h / 2.0)
    return out


def mask_box_iou(mask, box) -> float:
    """Fitting objective: mask IoU between a mask and a rasterized box."""
    mask = np.asarray(mask, dtype=bool)
    return iou_mask(mask, rasterize_box(box, mask.shape[0], mask.shape[1]))


def opt_box(
    mask,
    angle_step_deg: float = 1.0,
    scale_range: tuple[float, float] = (0.80, 1.20),
    scale_step: float = 0.02,
) -> RotatedBox:
    """Rotated rectangle maximizing mask IoU with its own rasterization.

    Search procedure (fixed, deterministic): sweep rectangle orientations over
    [0, 90) degrees at ``angle_step_deg`` resolution, seeded with the exact
    minimum-bounding-rectangle candidate; for each orientation take the
    minimum-area enclosing rectangle at that angle, then search a uniform
    scale factor over ``scale_range``. Ties on the objective are broken by
    smaller area. Because the MBR itself is in the candidate set, the result
    never scores below it.
    """
    mask = np.asarray(mask, dtype=bool)
    hull = _hull_points(mask)
    seed = _min_area_rect(hull)
    h, w = mask.shape

    angles = [seed.angle] + [math.radians(d) for d in np.arange(0.0, 90.0, angle_step_deg)]
    scales = np.arange(scale_range[0], scale_range[1] + 1e-9, scale_step)

    best: tuple[float, float, RotatedBox] | None = None
    for ang in angles:
        c, s = math.cos(ang), math.sin(ang)
        u = hull @ np.array([c, s])
        v = hull @ np.array([-s, c])
        bw = max(float(u.max() - u.min()), 1e-9)
        bh = max(float(v.max() - v.min()), 1e-9)
        cu, cv = (u.max() + u.min()) / 2.0, (v.max() + v.min()) / 2.0
        cx = cu * c - cv * s
        cy = cu * s + cv * c
        for k in scales:
            cand = RotatedBox(cx, cy, bw * k, bh * k, ang)
            score = mask_box_iou(mask, cand)
            key = (score, -cand.area)
            if best is None or key > (best[0], best[1]):
                best = (score, -cand.area, cand)
    assert best is not None
    return best[2]


def hungarian(affinity) -> Assignment:
    """Max-total-affinity one-to-one assignment for a (possibly rectangular) matrix.

    Pairs with zero affinity are dropped: they contribute nothing to the
    objective, so the returned total is still maximal.
    """
    aff = np.atleast_2d(np.asarray(affinity, dtype=float))
    if aff.size == 0:
        return Assignment(pairs=(), total=0.0)
    if not np.all(np.isfinite(aff)):
        raise ValueError("affinity matrix must be finite")
    rows, cols = linear_sum_assignment(aff, maximize=True)
    pairs = tuple((int(i), int(j)) for i, j in zip(rows, cols) if aff[i, j] > 0.0)
    total = float(sum(aff[i, j] for i, j in pairs))
    return Assignment(pairs=pairs, total=total)
