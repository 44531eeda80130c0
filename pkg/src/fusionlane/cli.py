"""Command-line entry point tying the pipeline together for batch use.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import bev, dataset, pngio, pointcloud, trainer
from .metrics import ConfusionMatrix, write_report_csv
from .network import FusionLaneModel
from .tensor import no_grad


class UsageError(Exception):
    """Bad invocation: missing config/checkpoint/inputs."""


def _print_resolved(args: argparse.Namespace, cfg=None) -> None:
    print("resolved config:")
    for key in sorted(vars(args)):
        if key == "func":
            continue
        print(f"  {key} = {getattr(args, key)}")
    if cfg is not None:
        for line in trainer.format_config(cfg).splitlines():
            print(f"  {line}")


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory not found: {p}")
    return p


# ---------------------------------------------------------------------------
# subcommands


def _cmd_rasterize(args) -> int:
    _print_resolved(args)
    in_dir = _require_dir(args.in_dir, "input")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    homography = None
    if args.homography:
        homography = bev.load_homography(_require_file(args.homography, "homography file"))
        if args.camera:
            _require_dir(args.camera, "camera")

    bins = sorted(in_dir.glob("*.bin"))
    if not bins:
        print(f"error: no .bin frames in {in_dir}", file=sys.stderr)
        return 1
    done, timings = 0, []
    for path in bins:
        try:
            t0 = time.perf_counter()
            frame = pointcloud.read_velodyne_bin(path)
            frame = pointcloud.filter_roi(frame)
            image = bev.rasterize_lbev(frame)
            timings.append(time.perf_counter() - t0)
            pngio.write_rgb_png(out_dir / f"{path.stem}.png", image.pixels)
            if homography is not None and args.camera:
                cam_path = Path(args.camera) / f"{path.stem}.png"
                if cam_path.is_file():
                    front = pngio.read_rgb_png(cam_path)
                    cbev = bev.ipm_transform(front, homography, frame.frame_id)
                    pngio.write_rgb_png(out_dir / f"{path.stem}_cbev.png", cbev.pixels)
                else:
                    print(f"warning: no camera image for {path.stem}", file=sys.stderr)
            done += 1
        except Exception as exc:  # keep going; report at the end
            print(f"warning: skipping {path.name}: {exc}", file=sys.stderr)
    if timings:
        total = sum(timings)
        print(f"rasterized {done}/{len(bins)} frames in {total:.3f}s "
              f"({1000 * total / len(timings):.1f} ms/frame)")
    if done == 0:
        print("error: every frame failed", file=sys.stderr)
        return 1
    return 0


def _cmd_augment(args) -> int:
    _print_resolved(args)
    in_root = _require_dir(args.in_dir, "dataset")
    out_root = Path(args.out_dir)
    samples = dataset.load_dataset(in_root)
    if not samples:
        print(f"error: no samples under {in_root}", file=sys.stderr)
        return 1
    for sub in ("lbev", "cregion", "gt"):
        (out_root / sub).mkdir(parents=True, exist_ok=True)
    written = 0
    for sample in samples:
        for deg in dataset.AUGMENT_DEGREES:
            rotated = dataset.rotate_augment(sample, deg)
            stem = f"{rotated.frame_id:04d}{dataset.rotation_suffix(deg)}"
            pngio.write_rgb_png(out_root / "lbev" / f"{stem}.png", rotated.lbev)
            pngio.write_gray_png(out_root / "cregion" / f"{stem}.png", rotated.c_region)
            pngio.write_gray_png(out_root / "gt" / f"{stem}.png", rotated.gt)
            written += 1
    print(f"wrote {written} augmented samples ({len(samples)} x {len(dataset.AUGMENT_DEGREES)})")
    return 0


def _load_config(args) -> trainer.TrainConfig:
    path = _require_file(args.config, "config file")
    return trainer.parse_config(path)


def _consecutive_runs(samples):
    """Group samples into maximal consecutive-id runs within each rotation."""
    by_rotation: dict[int, list] = {}
    for s in samples:
        by_rotation.setdefault(s.rotation_deg, []).append(s)
    runs = []
    for rot in sorted(by_rotation):
        group = sorted(by_rotation[rot], key=lambda s: s.frame_id)
        current = [group[0]]
        for s in group[1:]:
            if s.frame_id == current[-1].frame_id + 1:
                current.append(s)
            else:
                runs.append(dataset.SequenceSample(current, rotation_deg=rot))
                current = [s]
        runs.append(dataset.SequenceSample(current, rotation_deg=rot))
    return runs


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    _print_resolved(args, cfg)
    data_root = _require_dir(args.data, "data")
    samples = dataset.load_dataset(data_root)
    if not samples:
        print(f"error: no samples under {data_root}", file=sys.stderr)
        return 1

    split = dataset.make_split({s.frame_id for s in samples})
    usable = [s for s in samples if s.frame_id not in split.test]
    originals = [s for s in usable if s.rotation_deg == 0]
    pre_rotated = [s for s in usable if s.rotation_deg != 0]
    if pre_rotated:
        train_samples = usable  # dataset was materialized by `augment` already
    else:
        train_samples = dataset.expand_training_set(originals)
    train_seqs = dataset.make_sequences(train_samples, cfg.time_step)
    val_seqs = dataset.make_sequences(originals, cfg.time_step)
    if not train_seqs:
        print("error: no training sequences (check time_step vs available frames)",
              file=sys.stderr)
        return 1
    print(f"{len(train_seqs)} training sequences, {len(val_seqs)} validation sequences")

    model = FusionLaneModel(
        mode=cfg.mode,
        width_multiplier=cfg.width_multiplier,
        input_size=cfg.crop if cfg.mode == "fusionlane" else None,
        seed=cfg.seed,
    )
    blob, log = trainer.train(model, train_seqs, val_seqs, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(blob)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    log.to_csv(log_path)
    best = max((r.val_miou for r in log.records), default=float("nan"))
    print(f"checkpoint: {out}\nlog: {log_path}\nbest val MIOU: {best:.4f}")
    return 0


def _eval_model_and_sequences(args, require_gt=True):
    cfg = _load_config(args)
    _print_resolved(args, cfg)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    data_root = _require_dir(args.data, "data")
    model = trainer.load_checkpoint(ckpt)
    samples = dataset.load_dataset(data_root, require_gt=require_gt)
    if not samples:
        raise UsageError(f"no samples under {data_root}")
    runs = _consecutive_runs(samples)
    size = model.input_size if model.input_size is not None else min(
        cfg.crop, samples[0].size)
    runs = [dataset.center_crop_sequence(r, size) for r in runs]
    return cfg, model, runs


def _cmd_eval(args) -> int:
    _, model, runs = _eval_model_and_sequences(args)
    cm = ConfusionMatrix(model.num_classes)
    for run in runs:
        cm.merge(trainer.evaluate_sequences(model, [run]))
    write_report_csv(cm, args.out)
    print(f"MIOU: {cm.miou():.4f}  pixel accuracy: {cm.pixel_accuracy():.4f}")
    print(f"report: {args.out}")
    return 0


def _cmd_predict(args) -> int:
    _, model, runs = _eval_model_and_sequences(args, require_gt=False)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    with no_grad():
        for run in runs:
            lbev_frames, c_frames = [], []
            for frame in run.frames:
                lbev, creg = dataset.to_network_inputs(frame)
                lbev_frames.append(lbev[None])
                c_frames.append(creg[None])
            logits = model.forward_sequence(lbev_frames, c_frames, train=False)
            for frame, lg in zip(run.frames, logits):
                pred = np.argmax(lg.data, axis=1)[0].astype(np.uint8)
                stem = f"{frame.frame_id:04d}{dataset.rotation_suffix(frame.rotation_deg)}"
                pngio.write_gray_png(out_dir / f"{stem}.png", pred)
                pngio.write_rgb_png(out_dir / f"{stem}_color.png", bev.colorize_labels(pred))
                count += 1
    print(f"wrote {count} predictions to {out_dir}")
    return 0


def _cmd_inspect(args) -> int:
    _print_resolved(args)
    in_dir = _require_dir(args.in_dir, "input")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(in_dir.glob("*.png"))
    done = 0
    for path in files:
        labels = pngio.read_gray_png(path)
        pngio.write_rgb_png(out_dir / f"{path.stem}_color.png", bev.colorize_labels(labels))
        done += 1
    if done == 0:
        print(f"error: no label maps in {in_dir}", file=sys.stderr)
        return 1
    print(f"rendered {done} label maps to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionlane",
        description="LIDAR-camera fusion lane marking segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rasterize", help="convert velodyne .bin frames to BEV PNGs")
    p.add_argument("--in", dest="in_dir", required=True, help="directory of .bin frames")
    p.add_argument("--out", dest="out_dir", required=True, help="output PNG directory")
    p.add_argument("--homography", help="3x3 homography text file (9 numbers)")
    p.add_argument("--camera", help="directory of front camera PNGs")
    p.set_defaults(func=_cmd_rasterize)

    p = sub.add_parser("augment", help="materialize the 40x rotation-augmented dataset")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="CSV training log path (default: alongside checkpoint)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, write per-class IOU CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="write per-frame label maps and color renderings")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("inspect", help="render label maps with the class palette")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own message
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
