"""Merge instance masks, the stuff map, and leftover detection boxes.

The merge is greedy and score-ordered, in four steps: confident instance
masks claim free pixels first, surviving stuff classes fill large enough
regions next, unrepresented high-scoring detection boxes may fill what is
left, and all remaining pixels stay void.  Thresholds live in FusionConfig.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import splitmix64
from .errors import ConfigError, ShapeError
from .heads import MASK_SIZE, RoiMask
from .kernels import bilinear_resize
from .panoptic import PanopticMap, SegmentInfo


@dataclass(frozen=True)
class FusionConfig:
    """Merge thresholds and the stuff channel/category bookkeeping.

    ``other_class_id`` is the stuff-probability channel treated as 'other'
    (None means the last channel); that channel never produces a segment.
    ``stuff_category_base`` maps stuff channel c to category id base + c + 1
    so stuff categories can sit after the thing categories.
    """

    score_thresh: float = 0.37
    overlap_thresh: float = 0.37
    stuff_area_limit: int = 4900
    box_fill_overlap: float = 0.6
    other_class_id: int | None = None
    stuff_category_base: int = 0

    def __post_init__(self) -> None:
        for name in ("score_thresh", "overlap_thresh", "box_fill_overlap"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.stuff_area_limit < 0:
            raise ConfigError(f"stuff_area_limit must be >= 0, got {self.stuff_area_limit}")


@dataclass(frozen=True)
class InstanceMask:
    """A full-image boolean mask with its class, score, and source detection."""

    class_id: int
    score: float
    mask: np.ndarray
    detection_index: int | None = None


def paste_mask(roi: RoiMask, image_size: tuple[int, int]) -> InstanceMask:
    """Expand a 28x28 soft mask to a full-image boolean mask.

    The box is rasterized with round-half-up corners, the soft mask is
    bilinearly resized to the box size, pixels strictly above 0.5 are set,
    and only the part inside the image is kept.
    """
    img_h, img_w = image_size
    x1, y1, x2, y2 = roi.box
    xi1 = int(np.floor(x1 + 0.5))
    yi1 = int(np.floor(y1 + 0.5))
    xi2 = int(np.floor(x2 + 0.5))
    yi2 = int(np.floor(y2 + 0.5))
    out = np.zeros((img_h, img_w), dtype=bool)
    box_w = xi2 - xi1
    box_h = yi2 - yi1
    cx1, cy1 = max(0, xi1), max(0, yi1)
    cx2, cy2 = min(img_w, xi2), min(img_h, yi2)
    if box_w < 1 or box_h < 1 or cx1 >= cx2 or cy1 >= cy2:
        return InstanceMask(roi.class_id, roi.score, out, roi.detection_index)
    soft = np.asarray(roi.mask, dtype=np.float32)
    if soft.shape != (MASK_SIZE, MASK_SIZE):
        raise ShapeError(f"roi mask must be {MASK_SIZE}x{MASK_SIZE}, got {soft.shape}")
    resized = bilinear_resize(soft[None, None], box_h, box_w)[0, 0]
    window = resized[cy1 - yi1 : cy2 - yi1, cx1 - xi1 : cx2 - xi1]
    out[cy1:cy2, cx1:cx2] = window > 0.5
    return InstanceMask(roi.class_id, roi.score, out, roi.detection_index)


def fuse(
    instances: list[InstanceMask],
    stuff_probs: np.ndarray,
    detections,
    config: FusionConfig,
) -> PanopticMap:
    """Produce one panoptic map from the three prediction streams.

    (a) Instances with score >= score_thresh, by descending score (ties by
    input order), claim their still-free pixels unless the already-claimed
    fraction of their mask exceeds overlap_thresh or nothing is free.
    (b) Stuff channels in ascending order ('other' skipped) claim argmax
    pixels that are still free, if at least stuff_area_limit remain.
    (c) Detections with score >= score_thresh, by descending score, that
    did not source a surviving instance segment fill box-shaped holes when
    the unassigned fraction u of their rasterized box is >= box_fill_overlap;
    the new segment is box-intersect-unassigned.  (d) The rest stays void.
    """
    probs = np.asarray(stuff_probs)
    if probs.ndim == 4:
        if probs.shape[0] != 1:
            raise ShapeError(f"stuff probabilities must have batch 1, got {probs.shape}")
        probs = probs[0]
    if probs.ndim != 3:
        raise ShapeError(f"stuff probabilities must be (C, H, W), got {probs.shape}")
    num_channels = probs.shape[0]
    h, w = probs.shape[1], probs.shape[2]
    for inst in instances:
        if inst.mask.shape != (h, w):
            raise ShapeError(
                f"instance mask {inst.mask.shape} does not match stuff map {h}x{w}"
            )
    other_channel = num_channels - 1 if config.other_class_id is None else config.other_class_id

    raster = np.zeros((h, w), dtype=np.int32)
    segments: list[SegmentInfo] = []
    represented: set[int] = set()

    order = sorted(range(len(instances)), key=lambda i: -instances[i].score)
    for idx in order:
        inst = instances[idx]
        if inst.score < config.score_thresh:
            continue
        mask_area = int(inst.mask.sum())
        if mask_area == 0:
            continue
        free = inst.mask & (raster == 0)
        free_area = int(free.sum())
        claimed = (mask_area - free_area) / mask_area
        if claimed > config.overlap_thresh or free_area == 0:
            continue
        sid = len(segments) + 1
        raster[free] = sid
        segments.append(
            SegmentInfo(
                id=sid,
                category_id=inst.class_id,
                isthing=True,
                area=free_area,
                score=inst.score,
            )
        )
        if inst.detection_index is not None:
            represented.add(inst.detection_index)

    labels = probs.argmax(axis=0)
    for channel in range(num_channels):
        if channel == other_channel:
            continue
        region = (labels == channel) & (raster == 0)
        area = int(region.sum())
        if area < config.stuff_area_limit:
            continue
        sid = len(segments) + 1
        raster[region] = sid
        segments.append(
            SegmentInfo(
                id=sid,
                category_id=config.stuff_category_base + channel + 1,
                isthing=False,
                area=area,
            )
        )

    det_order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    for idx in det_order:
        det = detections[idx]
        if det.score < config.score_thresh or idx in represented:
            continue
        x1, y1, x2, y2 = det.box
        xi1 = max(0, int(np.floor(x1 + 0.5)))
        yi1 = max(0, int(np.floor(y1 + 0.5)))
        xi2 = min(w, int(np.floor(x2 + 0.5)))
        yi2 = min(h, int(np.floor(y2 + 0.5)))
        box_area = (xi2 - xi1) * (yi2 - yi1)
        if box_area < 1:
            continue
        window = raster[yi1:yi2, xi1:xi2]
        hole = window == 0
        hole_area = int(hole.sum())
        if hole_area / box_area < config.box_fill_overlap:
            continue
        sid = len(segments) + 1
        window[hole] = sid
        segments.append(
            SegmentInfo(
                id=sid,
                category_id=det.class_id,
                isthing=True,
                area=hole_area,
                score=det.score,
            )
        )

    result = PanopticMap(raster, segments)
    result.validate(sequential=True)
    return result


def colorize(panoptic: PanopticMap, palette_seed: int = 0) -> np.ndarray:
    """Deterministic (h, w, 3) uint8 visualization; void is black.

    Each id hashes to a 24-bit color; collisions (including black) fall
    back to a linear probe over the color space, in ascending id order.
    """
    used = {0}
    palette = {0: 0}
    seed = np.uint64(palette_seed & 0xFFFFFFFFFFFFFFFF)
    for seg in sorted(panoptic.segments, key=lambda s: s.id):
        bits = splitmix64(np.array([seed + np.uint64(seg.id)], dtype=np.uint64))
        color = int(bits[0]) & 0xFFFFFF
        while color in used:
            color = (color + 1) & 0xFFFFFF
        used.add(color)
        palette[seg.id] = color
    max_id = max(max(palette), int(panoptic.id_raster.max(initial=0)))
    lut = np.zeros((max_id + 1, 3), dtype=np.uint8)
    for sid, color in palette.items():
        lut[sid] = ((color >> 16) & 0xFF, (color >> 8) & 0xFF, color & 0xFF)
    return lut[panoptic.id_raster]
