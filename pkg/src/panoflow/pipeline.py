"""End-to-end orchestration: forward pass, fusion inputs, evaluation.

Everything here is glue over the core modules: it owns the checkpoint
entry registry, the seeded input image, the tensor report, the dump file
layout consumed by the fuse subcommand, and the parallel evaluation
driver whose result is bitwise independent of worker count.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ftns
from .checkpoint import Checkpoint, seeded_checkpoint, uniform_stream
from .config import RunConfig
from .detection import Detection, load_detections, save_detections, select_detections
from .errors import ConfigError, DataError, SchemaError
from .fusion import InstanceMask, fuse, paste_mask
from .heads import RoiMask, head_entries, run_cls_reg_heads, run_stuff_head, run_thing_head
from .panoptic import PanopticMap
from .panoptic_io import PanopticArchive, decode_png, load_archive
from .pq import PQReport, PQStats, compute_pq, match_segments, reduce_stats
from .pyramid import PYRAMID_CHANNELS, FeaturePyramid, build_pyramid, pyramid_entries
from .subnets import SubnetFeatures, run_subnets, subnet_entries


def model_entries(cfg: RunConfig) -> dict[str, tuple[int, ...]]:
    """Every checkpoint entry the full forward pass needs."""
    if cfg.subnet.channels != PYRAMID_CHANNELS:
        raise ConfigError(
            f"full pipeline requires subnet channels == {PYRAMID_CHANNELS}, "
            f"got {cfg.subnet.channels}"
        )
    entries = pyramid_entries()
    entries.update(subnet_entries(cfg.subnet))
    entries.update(head_entries(cfg.subnet.channels, cfg.num_things, cfg.num_stuff))
    return entries


def seeded_image(cfg: RunConfig) -> np.ndarray:
    """Deterministic uniform [0, 1) input image, (1, 3, size, size)."""
    size = cfg.image_size
    values = uniform_stream("input.image", cfg.seed, 3 * size * size)
    return values.astype(np.float32).reshape(1, 3, size, size)


@dataclass
class ForwardResult:
    pyramid: FeaturePyramid
    features: SubnetFeatures
    cls_logits: dict[int, np.ndarray]
    box_deltas: dict[int, np.ndarray]
    stuff_probs: np.ndarray
    detections: list[Detection]
    roi_masks: list[RoiMask]
    instances: list[InstanceMask] = field(default_factory=list)


def run_forward(
    cfg: RunConfig, image: np.ndarray | None = None, ckpt: Checkpoint | None = None
) -> ForwardResult:
    """Pyramid, sub-networks, heads, detection stage, and mask pasting."""
    if image is None:
        image = seeded_image(cfg)
    if ckpt is None:
        ckpt = seeded_checkpoint(model_entries(cfg), cfg.seed)
    image_size = (image.shape[2], image.shape[3])
    pyramid = build_pyramid(image, ckpt)
    features = run_subnets(pyramid, cfg.subnet, ckpt)
    cls_logits, box_deltas = run_cls_reg_heads(features, ckpt)
    stuff_probs = run_stuff_head(features, ckpt)
    detections = select_detections(
        cls_logits,
        box_deltas,
        image_size,
        score_thresh=cfg.score_thresh,
        pre_nms_top=cfg.pre_nms_top,
        iou_threshold=cfg.nms_iou,
        keep_top=cfg.top_k,
    )
    roi_masks = run_thing_head(features, detections, ckpt)
    instances = [paste_mask(roi, image_size) for roi in roi_masks]
    return ForwardResult(
        pyramid=pyramid,
        features=features,
        cls_logits=cls_logits,
        box_deltas=box_deltas,
        stuff_probs=stuff_probs,
        detections=detections,
        roi_masks=roi_masks,
        instances=instances,
    )


def report_rows(result: ForwardResult) -> list[tuple[str, tuple[int, ...], float, float]]:
    """(name, shape, mean, max) for every reported tensor, in a fixed order."""
    rows = []

    def add(name: str, tensor: np.ndarray) -> None:
        arr = np.asarray(tensor)
        rows.append((name, tuple(arr.shape), float(arr.mean()), float(arr.max())))

    for level in sorted(result.pyramid.levels):
        add(f"pyramid.P{level}", result.pyramid[level])
    for task in ("cls", "reg", "thing", "stuff"):
        tensors = getattr(result.features, task)
        for level in sorted(tensors):
            add(f"subnet.{task}.P{level}", tensors[level])
    for level in sorted(result.cls_logits):
        add(f"head.cls.P{level}", result.cls_logits[level])
    for level in sorted(result.box_deltas):
        add(f"head.reg.P{level}", result.box_deltas[level])
    add("head.stuff_probs", result.stuff_probs)
    return rows


def format_report(result: ForwardResult) -> str:
    lines = [
        f"{name}  shape={'x'.join(str(d) for d in shape)}  mean={mean:.9e}  max={mx:.9e}"
        for name, shape, mean, mx in report_rows(result)
    ]
    lines.append(f"detections: {len(result.detections)}")
    lines.append(f"instance masks: {len(result.instances)}")
    return "\n".join(lines)


def write_dumps(result: ForwardResult, out_dir: str) -> list[str]:
    """Write the FTNS/JSON files the fuse subcommand consumes.

    Layout: subnet_{cls|stuff}_P{level}.ftns, stuff_probs.ftns,
    detections.json, instances.json, instance_masks.ftns (one 0/1 layer
    per instance, matching instances.json order).
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def dump(name: str, tensor: np.ndarray) -> None:
        path = os.path.join(out_dir, name)
        ftns.write_tensor(path, tensor)
        written.append(path)

    for task in ("cls", "stuff"):
        tensors = getattr(result.features, task)
        for level in sorted(tensors):
            dump(f"subnet_{task}_P{level}.ftns", tensors[level])
    dump("stuff_probs.ftns", result.stuff_probs)
    det_path = os.path.join(out_dir, "detections.json")
    save_detections(det_path, result.detections)
    written.append(det_path)
    rows = [
        {
            "category_id": inst.class_id,
            "score": inst.score,
            "detection_index": inst.detection_index,
        }
        for inst in result.instances
    ]
    inst_path = os.path.join(out_dir, "instances.json")
    with open(inst_path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=1)
        fh.write("\n")
    written.append(inst_path)
    if result.instances:
        stack = np.stack([inst.mask.astype(np.float32) for inst in result.instances])
    else:
        h, w = result.stuff_probs.shape[-2:]
        stack = np.zeros((0, h, w), dtype=np.float32)
    dump("instance_masks.ftns", stack)
    return written


def load_instances(instances_json: str, masks_path: str) -> list[InstanceMask]:
    """Rebuild InstanceMask objects from instances.json + instance_masks.ftns."""
    try:
        with open(instances_json, "r", encoding="utf-8") as fh:
            rows = json.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"instances file {instances_json!r} not found") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"instances file {instances_json!r}: {exc}") from None
    if not isinstance(rows, list):
        raise SchemaError(f"instances file {instances_json!r}: expected a JSON list")
    stack = ftns.read_tensor(masks_path)
    if stack.ndim != 3:
        raise SchemaError(
            f"instance masks {masks_path!r} must be rank 3, got rank {stack.ndim}"
        )
    if len(rows) != stack.shape[0]:
        raise SchemaError(
            f"{instances_json!r} lists {len(rows)} instances but {masks_path!r} "
            f"holds {stack.shape[0]} masks"
        )
    out = []
    for i, row in enumerate(rows):
        try:
            det_idx = row.get("detection_index")
            out.append(
                InstanceMask(
                    class_id=int(row["category_id"]),
                    score=float(row["score"]),
                    mask=stack[i] > 0.5,
                    detection_index=None if det_idx is None else int(det_idx),
                )
            )
        except (KeyError, TypeError, ValueError):
            raise SchemaError(
                f"instances file {instances_json!r}: malformed entry {i}"
            ) from None
    return out


def run_fuse(
    cfg: RunConfig,
    instances_json: str,
    masks_path: str,
    stuff_path: str,
    detections_json: str,
) -> PanopticMap:
    """Load the three prediction streams from disk and fuse them."""
    instances = load_instances(instances_json, masks_path)
    stuff_probs = ftns.read_tensor(stuff_path)
    detections = load_detections(detections_json)
    return fuse(instances, stuff_probs, detections, cfg.fusion)


def _paired_annotations(
    gt: PanopticArchive, pred: PanopticArchive
) -> list[tuple[dict, dict]]:
    gt_ids = [ann["image_id"] for ann in gt.annotations]
    pred_by_id = {ann["image_id"]: ann for ann in pred.annotations}
    missing = [i for i in gt_ids if i not in pred_by_id]
    extra = sorted(set(pred_by_id) - set(gt_ids))
    if missing or extra:
        raise SchemaError(
            f"image_id mismatch between archives: missing predictions for "
            f"{missing}, unexpected predictions for {extra}"
        )
    return [(ann, pred_by_id[ann["image_id"]]) for ann in gt.annotations]


def run_evaluate(
    gt_json: str, gt_dir: str, pred_json: str, pred_dir: str, workers: int = 1
) -> PQReport:
    """Evaluate a prediction archive against ground truth.

    Images are matched in ascending image_id order and the per-image stats
    are reduced in that same order, so any worker count produces the same
    report bit for bit.
    """
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    gt_arch = load_archive(gt_json, gt_dir)
    pred_arch = load_archive(pred_json, pred_dir)
    pairs = _paired_annotations(gt_arch, pred_arch)
    gt_isthing = {cid: bool(row.get("isthing")) for cid, row in gt_arch.categories.items()}
    pred_isthing = {
        cid: bool(row.get("isthing")) for cid, row in pred_arch.categories.items()
    }

    def one(pair: tuple[dict, dict]) -> PQStats:
        gt_ann, pred_ann = pair
        gt_map = _load_map(gt_dir, gt_ann, gt_isthing)
        pred_map = _load_map(pred_dir, pred_ann, pred_isthing)
        return match_segments(gt_map, pred_map)

    if workers == 1:
        per_image = [one(pair) for pair in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_image = list(pool.map(one, pairs))
    return compute_pq(reduce_stats(per_image), gt_arch.thing_ids)


def _load_map(png_dir: str, ann: dict, isthing: dict[int, bool]) -> PanopticMap:
    path = os.path.join(png_dir, ann["file_name"])
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise DataError(f"panoptic PNG {path!r} not found") from None
    return decode_png(data, ann["segments_info"], isthing)
