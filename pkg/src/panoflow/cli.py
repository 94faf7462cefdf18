"""Command-line entry point: forward, fuse, evaluate, colorize.

Exit codes: 0 on success, 2 for usage/config/schema problems (including
dimension mismatches), 3 for missing or corrupt data files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import ftns
from .checkpoint import Checkpoint, seeded_checkpoint
from .config import apply_overrides, load_config
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    PanoflowError,
    SchemaError,
    ShapeError,
)
from .fusion import colorize
from .panoptic import PanopticMap, SegmentInfo
from .panoptic_io import decode_id_raster, encode_png, encode_rgb_png, save_archive
from .pipeline import format_report, model_entries, run_forward, run_fuse, run_evaluate, write_dumps
from .subnets import FLOW_NAMES, loss_compose

USAGE_EXIT = 2
DATA_EXIT = 3


def _parse_stages(values: list[str]) -> dict[str, int]:
    stages = {}
    for item in values:
        task, sep, count = item.partition("=")
        if not sep or not count.lstrip("-").isdigit():
            raise ConfigError(f"--stages expects task=<n>, got {item!r}")
        stages[task] = int(count)
    return stages


def _workers(args: argparse.Namespace, cfg_workers: int) -> int:
    if getattr(args, "workers", None) is not None:
        return args.workers
    env = os.environ.get("PANOFLOW_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"PANOFLOW_WORKERS must be an integer, got {env!r}") from None
    return cfg_workers


def _load_run_config(args: argparse.Namespace):
    cfg = load_config(getattr(args, "config", None))
    return apply_overrides(
        cfg,
        seed=getattr(args, "seed", None),
        size=getattr(args, "size", None),
        lambda_stuff=getattr(args, "lambda_stuff", None),
        disable_flows=getattr(args, "disable_flow", None),
        stages=_parse_stages(getattr(args, "stages", None) or []),
    )


def cmd_forward(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args)
    image = None
    if args.image is not None:
        image = ftns.read_tensor(args.image)
        if image.ndim != 4:
            raise ShapeError(f"input image tensor must be rank 4, got rank {image.ndim}")
    ckpt = None
    if args.checkpoint is not None:
        ckpt = Checkpoint.load(args.checkpoint)
    result = run_forward(cfg, image=image, ckpt=ckpt)
    print(format_report(result))
    if args.losses is not None:
        try:
            parts = [float(v) for v in args.losses.split(",")]
            l_cls, l_reg, l_thing, l_stuff = parts
        except ValueError:
            raise ConfigError(
                f"--losses expects four comma-separated numbers, got {args.losses!r}"
            ) from None
        total = loss_compose(l_cls, l_reg, l_thing, l_stuff, cfg.lambda_stuff)
        print(f"total_loss={total!r} (lambda={cfg.lambda_stuff!r})")
    if args.out is not None:
        written = write_dumps(result, args.out)
        if args.save_checkpoint:
            ckpt = ckpt or seeded_checkpoint(model_entries(cfg), cfg.seed)
            manifest = os.path.join(args.out, "checkpoint.json")
            ckpt.save(manifest)
            written.append(manifest)
        print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_fuse(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args)
    panoptic = run_fuse(cfg, args.instances, args.masks, args.stuff, args.detections)
    os.makedirs(args.out, exist_ok=True)
    png_path = os.path.join(args.out, "panoptic.png")
    with open(png_path, "wb") as fh:
        fh.write(encode_png(panoptic))
    save_archive(
        os.path.join(args.out, "panoptic.json"),
        args.out,
        [(args.image_id, panoptic)],
        categories=cfg.category_table(),
    )
    void = float((panoptic.id_raster == 0).mean())
    print(f"segments: {len(panoptic.segments)}")
    print(f"void fraction: {void:.6f}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = load_config(getattr(args, "config", None))
    workers = _workers(args, cfg.workers)
    report = run_evaluate(args.gt_json, args.gt_dir, args.pred_json, args.pred_dir, workers)
    print(report.format_table())
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(), fh, indent=1)
            fh.write("\n")
        print(f"wrote {args.out}")
    return 0


def cmd_colorize(args: argparse.Namespace) -> int:
    try:
        with open(args.png, "rb") as fh:
            raster = decode_id_raster(fh.read())
    except FileNotFoundError:
        raise DataError(f"panoptic PNG {args.png!r} not found") from None
    if args.segments is not None:
        try:
            with open(args.segments, "r", encoding="utf-8") as fh:
                rows = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"segments file {args.segments!r} not found") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"segments file {args.segments!r}: {exc}") from None
        segments = [
            SegmentInfo(
                id=int(r["id"]),
                category_id=int(r.get("category_id", 0)),
                isthing=bool(r.get("isthing", False)),
                area=int(r.get("area", 0)) or 1,
            )
            for r in rows
        ]
    else:
        ids, counts = np.unique(raster, return_counts=True)
        segments = [
            SegmentInfo(id=int(i), category_id=0, isthing=False, area=int(c))
            for i, c in zip(ids, counts)
            if i != 0
        ]
    rgb = colorize(PanopticMap(raster, segments), args.seed or 0)
    with open(args.out, "wb") as fh:
        fh.write(encode_rgb_png(rgb))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panoflow",
        description="Panoptic segmentation toolkit: forward pass, fusion, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fwd = sub.add_parser("forward", help="run the seeded forward pass and report tensors")
    fwd.add_argument("--config", help="JSON config file")
    fwd.add_argument("--seed", type=int, help="override the seed")
    fwd.add_argument("--size", type=int, help="square input size (multiple of 128)")
    fwd.add_argument("--image", help="FTNS image tensor instead of the seeded input")
    fwd.add_argument("--checkpoint", help="checkpoint manifest instead of seeded weights")
    fwd.add_argument("--lambda", dest="lambda_stuff", type=float, help="stuff loss weight")
    fwd.add_argument(
        "--disable-flow", action="append", choices=FLOW_NAMES, help="turn one flow off"
    )
    fwd.add_argument("--stages", action="append", help="override stage count, task=<n>")
    fwd.add_argument("--losses", help="four comma-separated loss values to compose")
    fwd.add_argument("--out", help="directory for FTNS/JSON dumps")
    fwd.add_argument(
        "--save-checkpoint", action="store_true", help="also dump the weights used"
    )
    fwd.set_defaults(func=cmd_forward)

    fus = sub.add_parser("fuse", help="merge instances, stuff map, and detections")
    fus.add_argument("--config", help="JSON config file")
    fus.add_argument("--instances", required=True, help="instances.json")
    fus.add_argument("--masks", required=True, help="instance_masks.ftns")
    fus.add_argument("--stuff", required=True, help="stuff_probs.ftns")
    fus.add_argument("--detections", required=True, help="detections.json")
    fus.add_argument("--image-id", type=int, default=0, help="image id for the output JSON")
    fus.add_argument("--out", required=True, help="output directory")
    fus.set_defaults(func=cmd_fuse)

    ev = sub.add_parser("evaluate", help="panoptic quality of predictions vs ground truth")
    ev.add_argument("--config", help="JSON config file")
    ev.add_argument("--gt-json", required=True)
    ev.add_argument("--gt-dir", required=True)
    ev.add_argument("--pred-json", required=True)
    ev.add_argument("--pred-dir", required=True)
    ev.add_argument("--workers", type=int, help="parallel image workers")
    ev.add_argument("--out", help="write the report JSON here")
    ev.set_defaults(func=cmd_evaluate)

    col = sub.add_parser("colorize", help="render a panoptic PNG as a color image")
    col.add_argument("--png", required=True, help="id-encoded panoptic PNG")
    col.add_argument("--segments", help="optional segments_info JSON")
    col.add_argument("--seed", type=int, help="palette seed")
    col.add_argument("--out", required=True)
    col.set_defaults(func=cmd_colorize)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except PanoflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
