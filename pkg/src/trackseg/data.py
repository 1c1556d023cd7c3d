"""On-disk dataset layout, result streams, and their readers.

Dataset layout (shared by the generator, training, and evaluation):

    root/
      manifest.json                 sequence list, object ids, class tags
      <sequence>/frames/000000.png  RGB frames, zero-padded contiguous indices
      <sequence>/masks/000000.png   instance-id images, 0 = background

Track result stream:

    out/<sequence>/masks/000001.png   predicted binary mask per tracked frame
    out/<sequence>/boxes.txt          per frame: 4 (axis) or 8 (corner) numbers
                                      followed by the score
    out/<sequence>/run.json           config hash + options echo

Multi-object result stream replaces ``masks/`` with ``instances/`` holding
instance-id images keyed by stable track ids plus a ``mot.json`` manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geom import AxisBox, RotatedBox, mbr, min_max_box

MANIFEST_VERSION = 1


class DatasetError(ValueError):
    """Raised with an exhaustive list of dataset problems."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        preview = "; ".join(problems[:8])
        more = f" (+{len(problems) - 8} more)" if len(problems) > 8 else ""
        super().__init__(f"{len(problems)} dataset problem(s): {preview}{more}")


def _frame_name(t: int) -> str:
    return f"{t:06d}.png"


def save_dataset(sequences, path, names=None) -> None:
    """Write annotated sequences in the shared on-disk layout."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, seq in enumerate(sequences):
        name = names[idx] if names else f"seq{idx:03d}"
        seq_dir = root / name
        (seq_dir / "frames").mkdir(parents=True, exist_ok=True)
        (seq_dir / "masks").mkdir(parents=True, exist_ok=True)
        for t in range(seq.n_frames):
            Image.fromarray(seq.frames[t]).save(seq_dir / "frames" / _frame_name(t))
            ids = np.zeros(seq.frames[t].shape[:2], dtype=np.uint8)
            for k, mask in enumerate(seq.masks[t]):
                ids[np.asarray(mask, dtype=bool)] = k + 1
            Image.fromarray(ids).save(seq_dir / "masks" / _frame_name(t))
        entries.append(
            {
                "name": name,
                "n_frames": seq.n_frames,
                "objects": [
                    {"id": k + 1, "class_tag": seq.class_tags[k], "seen": bool(seq.seen_flags[k])}
                    for k in range(seq.n_objects)
                ],
            }
        )
    manifest = {"version": MANIFEST_VERSION, "sequences": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


class _LazyFrames:
    """Sequence of RGB frames decoded on demand."""

    def __init__(self, paths: list[Path]):
        self._paths = paths
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self._paths)

    def __getitem__(self, t: int) -> np.ndarray:
        if t not in self._cache:
            self._cache[t] = np.asarray(Image.open(self._paths[t]).convert("RGB"))
        return self._cache[t]


class _LazyMasks:
    """Per-frame tuples of per-object boolean masks, decoded on demand."""

    def __init__(self, paths: list[Path], object_ids: list[int]):
        self._paths = paths
        self._ids = object_ids
        self._cache: dict[int, tuple] = {}

    def __len__(self):
        return len(self._paths)

    def __getitem__(self, t: int):
        if t not in self._cache:
            ids_img = np.asarray(Image.open(self._paths[t]))
            self._cache[t] = tuple(ids_img == obj_id for obj_id in self._ids)
        return self._cache[t]


@dataclass
class LoadedSequence:
    """Duck-type compatible with the in-memory annotated sequences."""

    name: str
    frames: _LazyFrames
    masks: _LazyMasks
    class_tags: tuple[str, ...]
    seen_flags: tuple[bool, ...]

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_objects(self) -> int:
        return len(self.class_tags)

    @property
    def axis_boxes(self):
        return [[min_max_box(m) if m.any() else None for m in self.masks[t]] for t in range(self.n_frames)]

    @property
    def rotated_boxes(self):
        # ground truth stores only masks; the rotated box is the mask's MBR
        return [[mbr(m) if m.any() else None for m in self.masks[t]] for t in range(self.n_frames)]


def load_dataset(path) -> list[LoadedSequence]:
    """Validate the layout (collecting every problem) and open it lazily."""
    root = Path(path)
    problems: list[str] = []
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError([f"missing manifest: {manifest_path}"])
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError([f"unsupported manifest version {manifest.get('version')}"])

    sequences = []
    for entry in manifest["sequences"]:
        name = entry["name"]
        frame_paths, mask_paths = [], []
        for t in range(entry["n_frames"]):
            fp = root / name / "frames" / _frame_name(t)
            mp = root / name / "masks" / _frame_name(t)
            if not fp.exists():
                problems.append(f"{name}: missing frame {fp.name}")
            if not mp.exists():
                problems.append(f"{name}: missing mask {mp.name}")
            frame_paths.append(fp)
            mask_paths.append(mp)
        ids = [obj["id"] for obj in entry["objects"]]
        sequences.append(
            LoadedSequence(
                name=name,
                frames=_LazyFrames(frame_paths),
                masks=_LazyMasks(mask_paths, ids),
                class_tags=tuple(obj["class_tag"] for obj in entry["objects"]),
                seen_flags=tuple(bool(obj["seen"]) for obj in entry["objects"]),
            )
        )
    if problems:
        raise DatasetError(problems)
    return sequences


# ---------------------------------------------------------------------------
# result streams


def box_line(box, score: float) -> str:
    """4 numbers (axis box) or 8 corner numbers (rotated box), then the score."""
    if isinstance(box, AxisBox):
        nums = [box.x_min, box.y_min, box.x_max, box.y_max]
    else:
        nums = [v for pt in box.corners() for v in pt]
    return " ".join(f"{v:.4f}" for v in [*nums, score])


def parse_box_line(line: str):
    vals = [float(v) for v in line.split()]
    if len(vals) == 5:
        return AxisBox(*vals[:4]), vals[4]
    if len(vals) == 9:
        pts = np.array(vals[:8]).reshape(4, 2)
        center = pts.mean(axis=0)
        e1 = pts[1] - pts[0]
        e2 = pts[3] - pts[0]
        w = float(np.hypot(*e1))
        h = float(np.hypot(*e2))
        angle = float(np.arctan2(e1[1], e1[0]))
        return RotatedBox(float(center[0]), float(center[1]), max(w, 1e-9), max(h, 1e-9), angle), vals[8]
    raise ValueError(f"box line must have 5 or 9 numbers, got {len(vals)}")


def write_track_results(out_dir, seq_name: str, results, start_frame: int = 1, run_info: dict | None = None):
    """Per-frame mask images plus one box/score line per tracked frame."""
    seq_dir = Path(out_dir) / seq_name
    (seq_dir / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for t, res in enumerate(results, start=start_frame):
        Image.fromarray(res.mask.astype(np.uint8) * 255).save(seq_dir / "masks" / _frame_name(t))
        lines.append(box_line(res.box, res.score))
    (seq_dir / "boxes.txt").write_text("\n".join(lines) + "\n")
    if run_info is not None:
        (seq_dir / "run.json").write_text(json.dumps(run_info, indent=2, sort_keys=True))


def read_track_results(out_dir, seq_name: str):
    """Returns (masks, boxes, scores) for one tracked sequence."""
    seq_dir = Path(out_dir) / seq_name
    boxes, scores = [], []
    for line in (seq_dir / "boxes.txt").read_text().splitlines():
        if not line.strip():
            continue
        box, score = parse_box_line(line)
        boxes.append(box)
        scores.append(score)
    masks = []
    files = sorted(os.listdir(seq_dir / "masks"))
    for fname in files:
        masks.append(np.asarray(Image.open(seq_dir / "masks" / fname)) > 0)
    return masks, boxes, scores


def write_mot_results(out_dir, seq_name: str, frames_tracks, run_info: dict | None = None):
    """Instance-id images with stable track ids plus a run manifest.

    ``frames_tracks`` is a list (per tracked frame) of lists of
    (track_id, mask) pairs.
    """
    seq_dir = Path(out_dir) / seq_name
    (seq_dir / "instances").mkdir(parents=True, exist_ok=True)
    summary = []
    for t, tracks in enumerate(frames_tracks, start=1):
        ids = np.zeros(tracks[0][1].shape if tracks else (1, 1), dtype=np.uint16)
        for track_id, mask in tracks:
            ids[mask] = track_id + 1  # id 0 is background
        Image.fromarray(ids).save(seq_dir / "instances" / _frame_name(t))
        summary.append({"frame": t, "track_ids": [tid for tid, _ in tracks]})
    manifest = {"sequence": seq_name, "frames": summary}
    if run_info:
        manifest["run"] = run_info
    (seq_dir / "mot.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_mot_results(out_dir, seq_name: str):
    """Returns (per-frame {track_id: mask}, manifest dict)."""
    seq_dir = Path(out_dir) / seq_name
    manifest = json.loads((seq_dir / "mot.json").read_text())
    frames = []
    for entry in manifest["frames"]:
        ids_img = np.asarray(Image.open(seq_dir / "instances" / _frame_name(entry["frame"])))
        frames.append({int(v) - 1: ids_img == v for v in np.unique(ids_img) if v != 0})
    return frames, manifest
