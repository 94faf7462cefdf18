"""Output heads: box classification, box regression, RoI masks, stuff map.

The cls and reg heads are one 3x3 conv per level with level-shared weights.
The thing head crops 14x14 windows from the thing features (level picked by
box size), runs four 3x3 conv + ReLU stages, a 2x upsampling deconv + ReLU,
and a 1x1 conv to per-class mask logits.  The stuff head upsamples each
segmentation level to 1/4 scale with conv + group norm + ReLU + 2x bilinear
blocks, sums them, projects to S+1 channels ('other' is the last channel),
upsamples 4x, and applies a channel softmax.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .errors import ShapeError
from .kernels import (
    bilinear_resize,
    conv2d,
    deconv2x,
    group_norm,
    relu,
    roi_align,
    sigmoid,
    softmax_channel,
)
from .pyramid import LEVEL_STRIDES
from .subnets import SubnetFeatures

logger = logging.getLogger(__name__)

ANCHORS_PER_LOCATION = 9
ROI_SIZE = 14
MASK_SIZE = 28
_STUFF_BLOCKS = {3: 1, 4: 2, 5: 3}


@dataclass(frozen=True)
class RoiMask:
    """A 28x28 soft mask for one detection, tagged with its source index."""

    box: tuple[float, float, float, float]
    class_id: int
    score: float
    mask: np.ndarray
    detection_index: int


def head_entries(
    channels: int, num_things: int, num_stuff: int, anchors: int = ANCHORS_PER_LOCATION
) -> dict[str, tuple[int, ...]]:
    """Checkpoint entry shapes for all four heads."""
    c = channels
    entries: dict[str, tuple[int, ...]] = {
        "head.cls.conv": (anchors * num_things, c, 3, 3),
        "head.cls.bias": (anchors * num_things,),
        "head.reg.conv": (anchors * 4, c, 3, 3),
        "head.reg.bias": (anchors * 4,),
        "head.thing.deconv.conv": (c, c, 2, 2),
        "head.thing.deconv.bias": (c,),
        "head.thing.mask.conv": (num_things, c, 1, 1),
        "head.thing.mask.bias": (num_things,),
        "head.stuff.out.conv": (num_stuff + 1, c, 1, 1),
        "head.stuff.out.bias": (num_stuff + 1,),
    }
    for j in range(1, 5):
        entries[f"head.thing.stage{j}.conv"] = (c, c, 3, 3)
        entries[f"head.thing.stage{j}.bias"] = (c,)
    for level, blocks in _STUFF_BLOCKS.items():
        for n in range(1, blocks + 1):
            prefix = f"head.stuff.level{level}.block{n}"
            entries[f"{prefix}.conv"] = (c, c, 3, 3)
            entries[f"{prefix}.bias"] = (c,)
            entries[f"{prefix}.gamma"] = (c,)
            entries[f"{prefix}.beta"] = (c,)
    return entries


def run_cls_reg_heads(
    features: SubnetFeatures, ckpt: Checkpoint
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Per-level classification logits and box deltas from one shared conv each."""
    cls_params = ckpt.conv("head.cls")
    reg_params = ckpt.conv("head.reg")
    cls_logits: dict[int, np.ndarray] = {}
    box_deltas: dict[int, np.ndarray] = {}
    for level in (3, 4, 5, 6, 7):
        if level not in features.cls or level not in features.reg:
            raise ShapeError(f"cls/reg heads need features for level {level}")
        cls_logits[level] = conv2d(features.cls[level], cls_params, padding=1)
        box_deltas[level] = conv2d(features.reg[level], reg_params, padding=1)
    return cls_logits, box_deltas


def assign_level(box: tuple[float, float, float, float]) -> int:
    """Pyramid level for an RoI: clamp(floor(4 + log2(sqrt(area)/224)), 3, 5)."""
    area = (box[2] - box[0]) * (box[3] - box[1])
    k = math.floor(4.0 + math.log2(math.sqrt(area) / 224.0))
    return min(5, max(3, k))


def run_thing_head(features: SubnetFeatures, detections, ckpt: Checkpoint) -> list[RoiMask]:
    """Predict a 28x28 soft mask for each detection.

    Detections with a degenerate box (area < 1 px) are skipped and logged.
    Output order follows input order.
    """
    for level in (3, 4, 5):
        if level not in features.thing:
            raise ShapeError(f"thing head needs features for level {level}")
        if features.thing[level].shape[0] != 1:
            raise ShapeError("thing head supports batch size 1")
    by_level: dict[int, list[int]] = {3: [], 4: [], 5: []}
    for idx, det in enumerate(detections):
        x1, y1, x2, y2 = det.box
        if (x2 - x1) * (y2 - y1) < 1.0:
            logger.warning(
                "skipping degenerate box %s (area < 1 px) for detection %d", det.box, idx
            )
            continue
        by_level[assign_level(det.box)].append(idx)
    stage_params = [ckpt.conv(f"head.thing.stage{j}") for j in range(1, 5)]
    deconv_params = ckpt.conv("head.thing.deconv")
    mask_params = ckpt.conv("head.thing.mask")
    results: dict[int, RoiMask] = {}
    for level, indices in by_level.items():
        if not indices:
            continue
        boxes = np.array([detections[i].box for i in indices], dtype=np.float64)
        x = roi_align(
            features.thing[level][0], boxes, 1.0 / LEVEL_STRIDES[level], ROI_SIZE
        )
        for params in stage_params:
            x = relu(conv2d(x, params, padding=1))
        x = relu(deconv2x(x, deconv_params))
        probs = sigmoid(conv2d(x, mask_params))
        num_things = probs.shape[1]
        for row, idx in enumerate(indices):
            det = detections[idx]
            channel = det.class_id - 1
            if not 0 <= channel < num_things:
                raise ShapeError(
                    f"detection class {det.class_id} outside the {num_things} mask channels"
                )
            results[idx] = RoiMask(
                box=det.box,
                class_id=det.class_id,
                score=det.score,
                mask=probs[row, channel],
                detection_index=idx,
            )
    return [results[idx] for idx in sorted(results)]


def run_stuff_head(features: SubnetFeatures, ckpt: Checkpoint) -> np.ndarray:
    """Full-resolution stuff probabilities, (b, S+1, H, W), channel-summing to 1."""
    maps = []
    for level, blocks in _STUFF_BLOCKS.items():
        if level not in features.stuff:
            raise ShapeError(f"stuff head needs features for level {level}")
        x = features.stuff[level]
        for n in range(1, blocks + 1):
            prefix = f"head.stuff.level{level}.block{n}"
            x = conv2d(x, ckpt.conv(prefix), padding=1)
            x = group_norm(x, ckpt.get(f"{prefix}.gamma"), ckpt.get(f"{prefix}.beta"))
            x = relu(x)
            x = bilinear_resize(x, 2 * x.shape[2], 2 * x.shape[3])
        maps.append(x)
    if not (maps[0].shape == maps[1].shape == maps[2].shape):
        raise ShapeError(
            "stuff head level maps disagree after upsampling: "
            f"{maps[0].shape}, {maps[1].shape}, {maps[2].shape}"
        )
    summed = (maps[0] + maps[1]) + maps[2]
    logits = conv2d(summed, ckpt.conv("head.stuff.out"))
    full = bilinear_resize(logits, 4 * logits.shape[2], 4 * logits.shape[3])
    return softmax_channel(full)
