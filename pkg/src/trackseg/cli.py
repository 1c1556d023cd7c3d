"""Command-line surface.

Every command takes a JSON run-config, echoes the resolved config to stdout,
and writes artifacts stamped with the config hash. Failures exit nonzero
after printing a single machine-readable JSON line on stderr.

Commands: gen-data, train, track, mot, eval, oracle-study, render.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as dataio
from .config import RunConfig, config_hash, dump_config, load_config
from .geom import min_max_box
from .metrics import MetricsReport, SequenceResult, evaluate_sequences, representation_oracles
from .model import load_checkpoint, save_checkpoint
from .mot import Detection, MultiObjectTracker, OracleDetector, read_detection_directory
from .synthdata import generate, oracle_study_scene, random_scene
from .track import Tracker
from .train import train as run_training


def _echo(config: RunConfig):
    print(dump_config(config))


def _run_info(config: RunConfig, command: str) -> dict:
    return {"command": command, "config_sha256": config_hash(config)}


def _load_config(args) -> RunConfig:
    if args.config:
        return load_config(args.config)
    return RunConfig()


def _scene_specs(config: RunConfig):
    g = config.gen
    for i in range(g.n_sequences):
        seed = config.seed + i
        if g.preset == "oracle-study":
            yield oracle_study_scene(seed, n_frames=g.n_frames)
        else:
            yield random_scene(
                seed=seed,
                n_objects=g.n_objects,
                n_frames=g.n_frames,
                canvas=g.canvas,
                shapes=g.shapes,
                size_range=g.size_range,
                aspect_range=g.aspect_range,
                speed_range=g.speed_range,
                rotation_rate=g.rotation_rate if g.rotation_rate != (0.0, 0.0) else 0.0,
                well_separated=g.well_separated,
                noise_sigma=g.noise_sigma,
            )


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    _echo(config)
    sequences = [generate(spec) for spec in _scene_specs(config)]
    dataio.save_dataset(sequences, args.out)
    Path(args.out, "run.json").write_text(json.dumps(_run_info(config, "gen-data"), indent=2, sort_keys=True))
    print(f"wrote {len(sequences)} sequence(s) to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    _echo(config)
    sequences = dataio.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net, history = run_training(sequences, config.model, config.train, variant=config.variant, out_dir=str(out), log_every=args.log_every)
    save_checkpoint(out / "model.npz", net)
    log = {"run": _run_info(config, "train"), "history": history}
    (out / "loss_log.json").write_text(json.dumps(log, indent=2, sort_keys=True))
    print(f"final loss {history[-1]['loss']:.4f}; checkpoint at {out / 'model.npz'}")
    return 0


def _select_sequences(sequences, name):
    if name is None:
        return sequences
    matches = [s for s in sequences if s.name == name]
    if not matches:
        raise ValueError(f"sequence {name!r} not in dataset")
    return matches


def cmd_track(args) -> int:
    config = _load_config(args)
    _echo(config)
    torch.set_num_threads(1)  # byte-reproducible outputs
    torch.manual_seed(config.seed)
    net = load_checkpoint(args.checkpoint, expected_config=config.model)
    if net.variant != config.variant:
        raise ValueError(f"checkpoint variant {net.variant} != config variant {config.variant}")
    sequences = _select_sequences(dataio.load_dataset(args.data), args.seq)
    info = _run_info(config, "track")
    for seq in sequences:
        tracker = Tracker(net, config.track)
        tracker.init(seq.frames[0], min_max_box(seq.masks[0][0]))
        results = [tracker.track_frame(seq.frames[t]) for t in range(1, seq.n_frames)]
        dataio.write_track_results(args.out, seq.name, results, run_info=info)
        mean_score = float(np.mean([r.score for r in results]))
        print(f"{seq.name}: {len(results)} frames, mean score {mean_score:.3f}")
    return 0


def cmd_mot(args) -> int:
    config = _load_config(args)
    _echo(config)
    torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    net = load_checkpoint(args.checkpoint, expected_config=config.model)
    sequences = _select_sequences(dataio.load_dataset(args.data), args.seq)
    info = _run_info(config, "mot")
    for seq in sequences:
        detector = (
            (lambda t: read_detection_directory(Path(args.detections) / seq.name, t))
            if args.detections
            else OracleDetector(seq, seed=config.seed)
        )
        mot = MultiObjectTracker(net, config.mot, config.track)
        mot.step(seq.frames[0], detector(0))
        frames_tracks = []
        for t in range(1, seq.n_frames):
            mot.step(seq.frames[t], detector(t))
            frames_tracks.append([(tr.id, tr.last_mask) for tr in mot.active_tracks])
        dataio.write_mot_results(args.out, seq.name, frames_tracks, run_info=info)
        print(f"{seq.name}: {len(mot.tracks)} live track(s) at the end")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    _echo(config)
    torch.set_num_threads(1)
    sequences = _select_sequences(dataio.load_dataset(args.data), args.seq)
    results, seen_flags, rows = [], [], []
    for seq in sequences:
        gt_masks = [seq.masks[t][0] for t in range(1, seq.n_frames)]
        gt_boxes = [seq.rotated_boxes[t][0] for t in range(1, seq.n_frames)]
        if args.gt_self:
            pred_masks = list(gt_masks)
            pred_boxes = list(gt_boxes)
        else:
            pred_masks, pred_boxes, _scores = dataio.read_track_results(args.results, seq.name)
            if len(pred_masks) != len(gt_masks):
                raise ValueError(f"{seq.name}: {len(pred_masks)} predictions for {len(gt_masks)} frames")
        results.append(
            SequenceResult(pred_masks=pred_masks, gt_masks=gt_masks, pred_boxes=pred_boxes, gt_boxes=gt_boxes)
        )
        seen_flags.append(bool(seq.seen_flags[0]))
    report = evaluate_sequences(results, seen_flags=seen_flags if len(set(seen_flags)) > 1 else None)
    report.config_echo = _run_info(config, "eval")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json())
    if args.per_sequence_csv:
        _write_per_sequence_csv(args.per_sequence_csv, sequences, results)
    print(f"mIoU {report.miou:.4f}  J_mean {report.j_mean:.4f}  F_mean {report.f_mean:.4f} -> {args.out}")
    return 0


def _write_per_sequence_csv(path, sequences, results):
    from .metrics import contour_stats, jaccard_stats

    lines = ["sequence,j_mean,j_recall,j_decay,f_mean,f_recall,f_decay"]
    for seq, res in zip(sequences, results):
        jm, jo, jd = jaccard_stats(res)
        fm, fo, fd = contour_stats(res)
        lines.append(f"{seq.name},{jm:.6f},{jo:.6f},{jd:.6f},{fm:.6f},{fo:.6f},{fd:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_oracle_study(args) -> int:
    config = _load_config(args)
    _echo(config)
    sequences = dataio.load_dataset(args.data)
    out = representation_oracles(sequences)
    payload = {"run": _run_info(config, "oracle-study"), "oracles": {
        name: {"miou": r["miou"], "map": {str(t): v for t, v in r["map"].items()}} for name, r in out.items()
    }}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True))
    order = " > ".join(f"{k}={out[k]['miou']:.4f}" for k in ("mbr", "min_max", "fixed"))
    print(f"oracle mIoU: {order} -> {args.out}")
    return 0


def cmd_render(args) -> int:
    from PIL import Image, ImageDraw

    config = _load_config(args)
    _echo(config)
    sequences = _select_sequences(dataio.load_dataset(args.data), args.seq)
    out_root = Path(args.out)
    for seq in sequences:
        masks, boxes, _ = dataio.read_track_results(args.results, seq.name)
        seq_out = out_root / seq.name
        seq_out.mkdir(parents=True, exist_ok=True)
        for t, (mask, box) in enumerate(zip(masks, boxes), start=1):
            frame = seq.frames[t].copy()
            overlay = frame.copy()
            overlay[mask] = (overlay[mask] * 0.4 + np.array([0, 200, 0]) * 0.6).astype(np.uint8)
            img = Image.fromarray(overlay)
            draw = ImageDraw.Draw(img)
            corners = (
                [(box.x_min, box.y_min), (box.x_max, box.y_min), (box.x_max, box.y_max), (box.x_min, box.y_max)]
                if hasattr(box, "x_min")
                else [tuple(p) for p in box.corners()]
            )
            draw.polygon(corners, outline=(255, 40, 40))
            img.save(seq_out / f"{t:06d}.png")
        print(f"{seq.name}: {len(masks)} overlay(s) -> {seq_out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trackseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="run-config JSON (defaults apply if omitted)")
        for flag, kw in flags.items():
            p.add_argument(flag, **kw)
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data, **{"--out": dict(required=True)})
    add(
        "train",
        cmd_train,
        **{"--data": dict(required=True), "--out": dict(required=True), "--log-every": dict(type=int, default=0)},
    )
    add(
        "track",
        cmd_track,
        **{
            "--data": dict(required=True),
            "--checkpoint": dict(required=True),
            "--out": dict(required=True),
            "--seq": dict(default=None),
        },
    )
    add(
        "mot",
        cmd_mot,
        **{
            "--data": dict(required=True),
            "--checkpoint": dict(required=True),
            "--out": dict(required=True),
            "--seq": dict(default=None),
            "--detections": dict(default=None, help="external per-frame instance-mask directory"),
        },
    )
    add(
        "eval",
        cmd_eval,
        **{
            "--data": dict(required=True),
            "--results": dict(default=None),
            "--out": dict(required=True),
            "--seq": dict(default=None),
            "--gt-self": dict(action="store_true", help="score ground truth against itself"),
            "--per-sequence-csv": dict(default=None),
        },
    )
    add("oracle-study", cmd_oracle_study, **{"--data": dict(required=True), "--out": dict(required=True)})
    add(
        "render",
        cmd_render,
        **{
            "--data": dict(required=True),
            "--results": dict(required=True),
            "--out": dict(required=True),
            "--seq": dict(default=None),
        },
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # single machine-readable error line
        print(json.dumps({"error": f"{type(e).__name__}: {e}"}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
