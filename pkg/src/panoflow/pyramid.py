"""Feature pyramid: a small convolutional stem plus the top-down merge.

The stem is an eight-layer CNN (3x3 convs, ReLU after each) that tapers
spatially to strides 8, 16, and 32; a 1x1 lateral plus nearest-neighbour
top-down pathway and 3x3 smoothing produce P3..P5, and stride-2 3x3 convs
extend to P6 and P7.  Every level carries 256 channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError, ShapeError
from .kernels import conv2d, nearest_upsample2x, relu

PYRAMID_CHANNELS = 256
LEVEL_STRIDES = {3: 8, 4: 16, 5: 32, 6: 64, 7: 128}

# (out_ch, in_ch, stride) per stem layer; layers 5, 6, 8 feed the laterals.
_STEM_PLAN = [
    (32, 3, 2),
    (32, 32, 1),
    (64, 32, 2),
    (64, 64, 1),
    (96, 64, 2),
    (128, 96, 2),
    (160, 128, 2),
    (160, 160, 1),
]
_LATERAL_TAPS = {3: 5, 4: 6, 5: 8}


@dataclass(frozen=True)
class FeaturePyramid:
    """Levels 3..7 keyed by level index, each (b, 256, H/2^i, W/2^i)."""

    levels: dict[int, np.ndarray]

    def __getitem__(self, level: int) -> np.ndarray:
        try:
            return self.levels[level]
        except KeyError:
            raise ShapeError(
                f"pyramid has levels {sorted(self.levels)}, level {level} requested"
            ) from None

    def __contains__(self, level: int) -> bool:
        return level in self.levels


def pyramid_entries() -> dict[str, tuple[int, ...]]:
    """Checkpoint entry shapes for the stem and FPN."""
    entries: dict[str, tuple[int, ...]] = {}
    for idx, (out_ch, in_ch, _) in enumerate(_STEM_PLAN, start=1):
        entries[f"stem.layer{idx}.conv"] = (out_ch, in_ch, 3, 3)
        entries[f"stem.layer{idx}.bias"] = (out_ch,)
    for level, tap in _LATERAL_TAPS.items():
        in_ch = _STEM_PLAN[tap - 1][0]
        entries[f"fpn.lateral{level}.conv"] = (PYRAMID_CHANNELS, in_ch, 1, 1)
        entries[f"fpn.lateral{level}.bias"] = (PYRAMID_CHANNELS,)
        entries[f"fpn.smooth{level}.conv"] = (PYRAMID_CHANNELS, PYRAMID_CHANNELS, 3, 3)
        entries[f"fpn.smooth{level}.bias"] = (PYRAMID_CHANNELS,)
    for level in (6, 7):
        entries[f"fpn.down{level}.conv"] = (PYRAMID_CHANNELS, PYRAMID_CHANNELS, 3, 3)
        entries[f"fpn.down{level}.bias"] = (PYRAMID_CHANNELS,)
    return entries


def build_pyramid(image: np.ndarray, ckpt: Checkpoint) -> FeaturePyramid:
    """Run the stem and top-down merge on a (b, 3, H, W) image tensor."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"build_pyramid expects (b, 3, H, W), got {image.shape}")
    h, w = image.shape[2], image.shape[3]
    if h % 128 != 0 or w % 128 != 0:
        raise ShapeError(
            f"input {h}x{w} is not divisible by 128; pad the image so every "
            "pyramid level has an exact integer size"
        )
    x = np.ascontiguousarray(image, dtype=np.float32)
    taps: dict[int, np.ndarray] = {}
    for idx, (_, _, stride) in enumerate(_STEM_PLAN, start=1):
        x = relu(conv2d(x, ckpt.conv(f"stem.layer{idx}"), stride=stride, padding=1))
        taps[idx] = x
    laterals = {
        level: conv2d(taps[tap], ckpt.conv(f"fpn.lateral{level}"))
        for level, tap in _LATERAL_TAPS.items()
    }
    merged = {5: laterals[5]}
    for level in (4, 3):
        merged[level] = laterals[level] + nearest_upsample2x(merged[level + 1])
    levels = {
        level: conv2d(merged[level], ckpt.conv(f"fpn.smooth{level}"), padding=1)
        for level in (3, 4, 5)
    }
    levels[6] = conv2d(levels[5], ckpt.conv("fpn.down6"), stride=2, padding=1)
    levels[7] = conv2d(relu(levels[6]), ckpt.conv("fpn.down7"), stride=2, padding=1)
    return FeaturePyramid(levels)


def select_levels(pyramid: FeaturePyramid, task: str) -> list[int]:
    """Levels consumed by a task: detection uses 3..7, segmentation 3..5."""
    if task == "detection":
        wanted = [3, 4, 5, 6, 7]
    elif task == "segmentation":
        wanted = [3, 4, 5]
    else:
        raise ConfigError(f"unknown task {task!r}: expected 'detection' or 'segmentation'")
    for level in wanted:
        if level not in pyramid:
            raise ShapeError(f"pyramid is missing level {level} required by {task}")
    return wanted
