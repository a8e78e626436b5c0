"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .autodiff import NonFiniteError
from .checkpoint import CheckpointError
from .config import ConfigError, read_config
from .data import (DatasetError, SampleLoader, keyframe_filter, load_dataset, make_windows, read_depth_png, resize_depth,
                   write_depth_png)
from .evaluation import (EvaluationError, KITTI_LENGTHS, align, evaluate_depths, infer_scene,
                         odometry_metrics, read_trajectory, write_metrics_csv, write_trajectory)
from .train import TrainConfig, Trainer, TrainingDiverged, load_model

ENV_DATA_ROOT = "RNNVO_DATA_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("rnnvo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _data_root(args) -> Path:
    root = args.data_root or os.environ.get(ENV_DATA_ROOT)
    if not root:
        raise UsageError(f"no dataset root: pass --data-root or set {ENV_DATA_ROOT}")
    return Path(root)


def _write_manifest(path: Path, args, resolved: dict) -> None:
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {"version": __version__, "command": args.command, "arguments": argv, "resolved": resolved}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _lengths(text: Optional[str]) -> tuple:
    if not text:
        return KITTI_LENGTHS
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--lengths expects comma-separated numbers, got {text!r}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prepare_data(args) -> int:
    root = _data_root(args)
    if args.synthetic:
        from .synthetic import make_sequence, write_scene

        write_scene(root, args.synthetic_scene, make_sequence(args.synthetic))
    index = load_dataset(root)
    filtered = index if args.no_keyframes else keyframe_filter(index, args.sigma)
    windows = make_windows(filtered, args.window, args.stride)
    per_scene = {}
    for sid, scene in filtered.scenes.items():
        per_scene[sid] = {"frames": len(index.scenes[sid]), "keyframes": len(scene),
                          "windows": sum(1 for w in windows if w.scene_id == sid)}
    summary = {"root": str(root), "scenes": per_scene, "windows": len(windows),
               "unfiltered": filtered.unfiltered, "window": args.window, "stride": args.stride}
    for sid, row in per_scene.items():
        print(f"{sid}: {row['frames']} frames, {row['keyframes']} keyframes, {row['windows']} windows")
    print(f"total windows: {len(windows)}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "index.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        _write_manifest(out / "manifest.json", args, summary)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        cfg = TrainConfig.from_sections(read_config(args.config), cfg)
    net_kw, train_kw = {}, {}
    for flag, key in (("height", "height"), ("width", "width"), ("lstm_placement", "lstm_placement"),
                      ("width_scale", "width_scale")):
        if getattr(args, flag) is not None:
            net_kw[key] = getattr(args, flag)
    if args.seed is not None:
        net_kw["seed"] = args.seed
        train_kw["seed"] = args.seed
    for flag in ("lr", "epochs_stage1", "epochs_stage2", "repeats", "window", "stride", "precision"):
        if getattr(args, flag) is not None:
            train_kw[flag] = getattr(args, flag)
    if args.mode is not None:
        train_kw["supervised"] = args.mode == "supervised"
    return replace(cfg, net=replace(cfg.net, **net_kw), **train_kw)


def _load_samples(args, cfg: TrainConfig):
    index = load_dataset(_data_root(args))
    if not args.no_keyframes:
        index = keyframe_filter(index, args.sigma)
    windows = make_windows(index, cfg.window, cfg.stride)
    if not windows:
        raise DatasetError(f"{index.root}: no windows of {cfg.window} frames")
    loader = SampleLoader(index, (cfg.net.height, cfg.net.width))
    samples = [loader.sample(w) for w in windows]
    if cfg.supervised and any(s.gt_depths is None for s in samples):
        raise DatasetError("supervised mode needs depth maps for every scene")
    return samples


def _write_loss_csv(path: Path, history: List[dict]) -> None:
    if not history:
        return
    keys = list(history[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in history:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])


def cmd_train(args) -> int:
    out = Path(args.out)
    cfg = _train_config(args)
    samples = _load_samples(args, cfg)
    ckdir = out / "checkpoints"
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, samples, ckdir)
    else:
        trainer = Trainer(cfg, samples, ckdir)
    _write_manifest(out / "manifest.json", args, trainer.config.to_sections())
    try:
        result = trainer.run(on_epoch=lambda row: print(
            f"epoch {row['epoch']} stage {row['stage']} total {row['total']:.6f}", flush=True))
    finally:
        _write_loss_csv(out / "loss.csv", trainer.history)
    trainer.save(out / "final.ckpt")
    print(f"wrote {out / 'final.ckpt'}")
    return EXIT_OK


def _scene_frames(args, model):
    index = load_dataset(_data_root(args))
    if args.scene not in index.scenes:
        raise DatasetError(f"scene {args.scene!r} not found under {index.root}")
    loader = SampleLoader(index, (model.config.height, model.config.width))
    return loader.scene_frames(args.scene)


def cmd_infer(args) -> int:
    model = load_model(args.checkpoint)
    sample = _scene_frames(args, model)
    result = infer_scene(model, sample.frames)
    out = Path(args.out)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    for fid, depth in zip(sample.frame_ids, result.depths):
        write_depth_png(out / "depth" / f"{fid:06d}.png", depth)
    write_trajectory(out / "trajectory.txt", result.trajectory)
    _write_manifest(out / "manifest.json", args, {"frames": len(sample.frames)})
    print(f"wrote {len(result.depths)} depth maps and {out / 'trajectory.txt'}")
    return EXIT_OK


def _depth_pairs(args):
    if args.checkpoint:
        model = load_model(args.checkpoint)
        sample = _scene_frames(args, model)
        if sample.gt_depths is None:
            raise DatasetError(f"scene {args.scene!r} has no ground-truth depth")
        preds = infer_scene(model, sample.frames).depths
        return [f"{fid:06d}" for fid in sample.frame_ids], preds, sample.gt_depths, sample.gt_valid
    if not (args.pred and args.gt):
        raise UsageError("eval-depth needs --pred and --gt directories, or --checkpoint with --scene")
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in gt_dir.glob("*.png"))
    if not names:
        raise DatasetError(f"{gt_dir}: no depth maps")
    preds, gts, valids = [], [], []
    for name in names:
        if not (pred_dir / name).exists():
            raise DatasetError(f"{pred_dir / name}: missing prediction")
        p, pv = read_depth_png(pred_dir / name)
        g, gv = read_depth_png(gt_dir / name)
        # predictions come out at network resolution; compare at the ground-truth resolution
        p, pv = resize_depth(p, pv, g.shape)
        if np.any(gv & ~pv):
            raise DatasetError(f"{pred_dir / name}: prediction has zero depth where ground truth is valid")
        preds.append(np.where(pv, p, 1.0))
        gts.append(g)
        valids.append(gv)
    return [Path(n).stem for n in names], preds, gts, valids


def cmd_eval_depth(args) -> int:
    names, preds, gts, valids = _depth_pairs(args)
    rows, agg = evaluate_depths(preds, gts, valids, args.cap, args.scale_align)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out, [(n, r.as_dict()) for n, r in zip(names, rows)], agg.as_dict())
    _write_manifest(out.with_suffix(".manifest.json"), args, {"frames": len(rows)})
    print(" ".join(f"{k}={v:.4f}" for k, v in agg.as_dict().items()))
    return EXIT_OK


def cmd_eval_odom(args) -> int:
    lengths = _lengths(args.lengths)
    if args.checkpoint:
        model = load_model(args.checkpoint)
        sample = _scene_frames(args, model)
        index = load_dataset(_data_root(args))
        gt_abs = index.scenes[args.scene].poses
        if gt_abs is None:
            raise DatasetError(f"scene {args.scene!r} has no ground-truth poses")
        pairs = [(args.scene, infer_scene(model, sample.frames).trajectory, gt_abs)]
    else:
        if not (args.pred and args.gt) or len(args.pred) != len(args.gt):
            raise UsageError("eval-odom needs matching --pred and --gt trajectory files, or --checkpoint")
        pairs = [(Path(p).stem, read_trajectory(p), read_trajectory(g)) for p, g in zip(args.pred, args.gt)]
    rows, seg_t, seg_r = [], [], []
    for name, pred, gt in pairs:
        gt0 = np.linalg.inv(gt[0])
        gt = [gt0 @ m for m in gt]
        pred0 = np.linalg.inv(pred[0])
        pred = align([pred0 @ m for m in pred], gt, args.align)
        m = odometry_metrics(pred, gt, lengths)
        if m.empty:
            raise EvaluationError(f"{name}: trajectory shorter than the shortest sub-sequence length")
        rows.append((name, {"t_err": m.t_err, "r_err": m.r_err, "segments": len(m.segments)}))
        seg_t += [s.t_err for s in m.segments]
        seg_r += [s.r_err for s in m.segments]
    agg = {"t_err": 100.0 * float(np.mean(seg_t)), "r_err": float(np.degrees(np.mean(seg_r))),
           "segments": len(seg_t)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out, rows, agg)
    _write_manifest(out.with_suffix(".manifest.json"), args, {"lengths": list(lengths)})
    print(f"t_err={agg['t_err']:.4f}% r_err={agg['r_err']:.6f} deg/m over {agg['segments']} segments")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.loss_csv:
        with open(args.loss_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DatasetError(f"{args.loss_csv}: empty loss file")
        epochs = [int(r["epoch"]) for r in rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in ("total", "reprojection_fw", "reprojection_bw", "smoothness", "flow_consistency", "depth"):
            if key in rows[0]:
                vals = [float(r[key]) for r in rows]
                if any(vals):
                    ax.plot(epochs, vals, label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
    elif args.pred:
        fig, ax = plt.subplots(figsize=(5, 5))
        for path, label in ((args.gt, "ground truth"), (args.pred, "prediction")):
            if path is None:
                continue
            P = np.array([m[:3, 3] for m in read_trajectory(path)])
            ax.plot(P[:, 0], P[:, 2], label=label)
        ax.set_xlabel("x [m]")
        ax.set_ylabel("z [m]")
        ax.set_aspect("equal", adjustable="datalim")
        ax.legend()
    else:
        raise UsageError("plot needs --loss-csv or --pred (with optional --gt)")
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rnnvo", description="Recurrent monocular depth and visual odometry.")
    p.add_argument("--version", action="version", version=f"rnnvo {__version__}")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def data_args(sp):
        sp.add_argument("--data-root", help=f"dataset root (default ${ENV_DATA_ROOT})")
        sp.add_argument("--sigma", type=float, default=0.3, help="keyframe translation threshold in meters")
        sp.add_argument("--no-keyframes", action="store_true", help="use every frame")

    sp = sub.add_parser("prepare-data", help="index a dataset and report window counts")
    data_args(sp)
    sp.add_argument("--window", type=int, default=10)
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--out")
    sp.add_argument("--synthetic", type=int, default=0, metavar="N",
                    help="first write an N-frame synthetic scene into the root")
    sp.add_argument("--synthetic-scene", default="synthetic")
    sp.set_defaults(func=cmd_prepare_data)

    sp = sub.add_parser("train", help="run the two-stage schedule")
    data_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--mode", choices=("supervised", "unsupervised"))
    sp.add_argument("--window", type=int)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--lstm-placement", choices=("encoder", "decoder", "full"))
    sp.add_argument("--height", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--width-scale", type=float)
    sp.add_argument("--epochs-stage1", type=int)
    sp.add_argument("--epochs-stage2", type=int)
    sp.add_argument("--repeats", type=int, help="passes over the windows per epoch")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--precision", choices=("float32", "float64"))
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="run a checkpoint over a whole scene")
    sp.add_argument("--data-root")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval-depth", help="depth metrics CSV")
    sp.add_argument("--pred", help="directory of predicted 16-bit depth PNGs")
    sp.add_argument("--gt", help="directory of ground-truth 16-bit depth PNGs")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data-root")
    sp.add_argument("--scene")
    sp.add_argument("--cap", type=float, default=80.0)
    sp.add_argument("--scale-align", choices=("median", "none"), default="median")
    sp.add_argument("--out", required=True, help="CSV path")
    sp.set_defaults(func=cmd_eval_depth)

    sp = sub.add_parser("eval-odom", help="odometry metrics CSV")
    sp.add_argument("--pred", nargs="+", help="predicted trajectory files")
    sp.add_argument("--gt", nargs="+", help="ground-truth trajectory files")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data-root")
    sp.add_argument("--scene")
    sp.add_argument("--align", choices=("scale", "none"), default="scale")
    sp.add_argument("--lengths", help="comma-separated sub-sequence lengths in meters")
    sp.add_argument("--out", required=True, help="CSV path")
    sp.set_defaults(func=cmd_eval_odom)

    sp = sub.add_parser("plot", help="loss curves or trajectory overlays")
    sp.add_argument("--loss-csv")
    sp.add_argument("--pred", help="predicted trajectory file")
    sp.add_argument("--gt", help="ground-truth trajectory file")
    sp.add_argument("--out", required=True, help="image path")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("rnnvo: a subcommand is required (see --help)")
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "scene", None) is None and getattr(args, "checkpoint", None) and args.command != "infer":
            raise UsageError(f"{args.command} with --checkpoint needs --scene")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, ConfigError, EvaluationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
