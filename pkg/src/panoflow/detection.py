"""Anchor generation, box decoding, score filtering, and per-class NMS.

Anchor layout is fixed: locations in row-major order, and within each
location nine anchors ordered scale-major (2^0, 2^(1/3), 2^(2/3)) then
ratio (0.5, 1, 2).  Boxes are (x1, y1, x2, y2) in image pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .kernels import sigmoid
from .pyramid import LEVEL_STRIDES

ANCHOR_SCALES = (2.0 ** 0.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))
ANCHOR_RATIOS = (0.5, 1.0, 2.0)
# exp clamp for size deltas: log(1000/16)
DELTA_CLAMP = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Detection:
    """A scored, class-labeled box."""

    box: tuple[float, float, float, float]
    class_id: int
    score: float


def generate_anchors(level: int, h: int, w: int) -> np.ndarray:
    """All anchors for a level's h x w grid, shape (9*h*w, 4) float64."""
    if level not in LEVEL_STRIDES:
        raise ShapeError(f"anchor level must be in {sorted(LEVEL_STRIDES)}, got {level}")
    stride = LEVEL_STRIDES[level]
    base = 4.0 * (2.0 ** level)
    shapes = np.empty((9, 2), dtype=np.float64)
    i = 0
    for scale in ANCHOR_SCALES:
        size = base * scale
        for ratio in ANCHOR_RATIOS:
            shapes[i, 0] = size / math.sqrt(ratio)
            shapes[i, 1] = size * math.sqrt(ratio)
            i += 1
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx = (xs.reshape(-1, 1) + 0.5) * stride
    cy = (ys.reshape(-1, 1) + 0.5) * stride
    half_w = shapes[:, 0] / 2.0
    half_h = shapes[:, 1] / 2.0
    out = np.empty((h * w, 9, 4), dtype=np.float64)
    out[:, :, 0] = cx - half_w
    out[:, :, 1] = cy - half_h
    out[:, :, 2] = cx + half_w
    out[:, :, 3] = cy + half_h
    return out.reshape(-1, 4)


def decode_boxes(
    anchors: np.ndarray, deltas: np.ndarray, image_size: tuple[int, int]
) -> np.ndarray:
    """Apply (dx, dy, dw, dh) deltas to anchors and clip to the image.

    Center shifts scale by the anchor size; size deltas are exponentiated
    with dw, dh clamped to log(1000/16).
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if anchors.shape != deltas.shape or anchors.ndim != 2 or anchors.shape[1] != 4:
        raise ShapeError(
            f"decode_boxes needs matching (n, 4) arrays, got {anchors.shape} and {deltas.shape}"
        )
    if np.isnan(deltas).any():
        raise DataError("decode_boxes: deltas contain NaN")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2.0
    acy = anchors[:, 1] + ah / 2.0
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], DELTA_CLAMP))
    h = ah * np.exp(np.minimum(deltas[:, 3], DELTA_CLAMP))
    img_h, img_w = image_size
    out = np.empty_like(anchors)
    out[:, 0] = np.clip(cx - w / 2.0, 0.0, img_w)
    out[:, 1] = np.clip(cy - h / 2.0, 0.0, img_h)
    out[:, 2] = np.clip(cx + w / 2.0, 0.0, img_w)
    out[:, 3] = np.clip(cy + h / 2.0, 0.0, img_h)
    return out


def box_iou(a: tuple[float, ...], b: tuple[float, ...]) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _nms_indices(boxes: np.ndarray, scores: np.ndarray, thr: float) -> list[int]:
    """Greedy NMS over one class; returns kept indices in keep order."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        iw = np.minimum(boxes[:, 2], boxes[i, 2]) - np.maximum(boxes[:, 0], boxes[i, 0])
        ih = np.minimum(boxes[:, 3], boxes[i, 3]) - np.maximum(boxes[:, 1], boxes[i, 1])
        inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
        union = areas + areas[i] - inter
        iou = np.divide(inter, union, out=np.zeros(n), where=union > 0)
        alive &= ~(iou > thr)
    return keep


def nms_per_class(
    detections: list[Detection], iou_threshold: float = 0.4, keep_top: int = 100
) -> list[Detection]:
    """Greedy per-class NMS, then a global sort and truncation to keep_top.

    Within a class, candidates are visited by descending score with ties
    broken by lower input index; a candidate is suppressed when its IoU
    with a kept box is strictly above the threshold.  The merged survivors
    are sorted the same way before truncation.
    """
    by_class: dict[int, list[int]] = {}
    for idx, det in enumerate(detections):
        if not math.isfinite(det.score):
            raise DataError(f"detection {idx} has non-finite score {det.score}")
        by_class.setdefault(det.class_id, []).append(idx)
    survivors: list[int] = []
    for class_id in sorted(by_class):
        indices = by_class[class_id]
        boxes = np.array([detections[i].box for i in indices], dtype=np.float64)
        scores = np.array([detections[i].score for i in indices], dtype=np.float64)
        survivors.extend(indices[i] for i in _nms_indices(boxes, scores, iou_threshold))
    survivors.sort(key=lambda i: (-detections[i].score, i))
    return [detections[i] for i in survivors[:keep_top]]


def select_detections(
    cls_logits: dict[int, np.ndarray],
    box_deltas: dict[int, np.ndarray],
    image_size: tuple[int, int],
    score_thresh: float = 0.05,
    pre_nms_top: int = 1000,
    iou_threshold: float = 0.4,
    keep_top: int = 100,
) -> list[Detection]:
    """Full detection stage: score filter, decode, per-class NMS, top-k.

    Per level: sigmoid scores strictly above score_thresh survive, the best
    pre_nms_top of them (ties by lower anchor index, then class) are
    decoded and clipped, and boxes of area < 1 px are dropped.  All levels
    merge into one per-class NMS with a global keep_top cut.
    """
    candidates: list[Detection] = []
    for level in sorted(cls_logits):
        logits = cls_logits[level]
        deltas = box_deltas[level]
        if logits.shape[0] != 1 or deltas.shape[0] != 1:
            raise ShapeError("select_detections supports batch size 1")
        h, w = logits.shape[2], logits.shape[3]
        num_classes = logits.shape[1] // 9
        scores = sigmoid(logits[0]).reshape(9, num_classes, h, w)
        scores = scores.transpose(2, 3, 0, 1).reshape(-1, num_classes).astype(np.float64)
        dmat = deltas[0].reshape(9, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
        anchor_idx, class_idx = np.nonzero(scores > score_thresh)
        if len(anchor_idx) == 0:
            continue
        cand_scores = scores[anchor_idx, class_idx]
        order = np.lexsort((class_idx, anchor_idx, -cand_scores))[:pre_nms_top]
        anchor_idx = anchor_idx[order]
        class_idx = class_idx[order]
        cand_scores = cand_scores[order]
        anchors = generate_anchors(level, h, w)
        boxes = decode_boxes(anchors[anchor_idx], dmat[anchor_idx], image_size)
        for box, cid, score in zip(boxes, class_idx, cand_scores):
            if (box[2] - box[0]) * (box[3] - box[1]) < 1.0:
                continue
            candidates.append(
                Detection(box=tuple(box.tolist()), class_id=int(cid) + 1, score=float(score))
            )
    return nms_per_class(candidates, iou_threshold, keep_top)


def save_detections(path: str, detections: list[Detection]) -> None:
    """Write detections as JSON [{bbox, category_id, score}]."""
    rows = [
        {"bbox": list(det.box), "category_id": det.class_id, "score": det.score}
        for det in detections
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=1)
        fh.write("\n")


def load_detections(path: str) -> list[Detection]:
    """Read a detections JSON file, validating its schema."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            rows = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"detections file {path!r} not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"detections file {path!r}: {exc}") from None
    if not isinstance(rows, list):
        raise DataError(f"detections file {path!r}: expected a JSON list")
    out = []
    for i, row in enumerate(rows):
        try:
            bbox = row["bbox"]
            x1, y1, x2, y2 = (float(v) for v in bbox)
            out.append(
                Detection(
                    box=(x1, y1, x2, y2),
                    class_id=int(row["category_id"]),
                    score=float(row["score"]),
                )
            )
        except (KeyError, TypeError, ValueError):
            raise DataError(f"detections file {path!r}: malformed entry {i}") from None
    return out
