"""Four parallel per-level sub-networks bridged by additive feature flows.

Each sub-network is a chain of stages; a stage is a 3x3 conv + ReLU on the
previous stage's output.  The reg chain feeds adapter convs (3x3, no ReLU)
into the cls and stuff chains stage-by-stage, and the final reg and stuff
tensors feed the first thing stage.  Disabled flows simply skip their
additive term, and zeroed adapters are bitwise equivalent to disabling.
Weights are shared across pyramid levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError, DataError
from .kernels import conv2d, relu
from .pyramid import FeaturePyramid, select_levels

FLOW_NAMES = ("reg_to_cls", "reg_to_stuff", "reg_to_thing", "stuff_to_thing")


@dataclass(frozen=True)
class SubnetConfig:
    """Stage counts, flow switches, and channel width for the sub-networks."""

    cls_stages: int = 4
    reg_stages: int = 4
    stuff_stages: int = 4
    thing_stages: int = 1
    reg_to_cls: bool = True
    reg_to_stuff: bool = True
    reg_to_thing: bool = True
    stuff_to_thing: bool = True
    channels: int = 256

    def __post_init__(self) -> None:
        for task in ("cls", "reg", "stuff", "thing"):
            n = getattr(self, f"{task}_stages")
            if n < 0:
                raise ConfigError(f"{task} stage count must be >= 0, got {n}")
        if self.channels < 1:
            raise ConfigError(f"subnet channels must be >= 1, got {self.channels}")

    def stages(self) -> dict[str, int]:
        return {
            "cls": self.cls_stages,
            "reg": self.reg_stages,
            "stuff": self.stuff_stages,
            "thing": self.thing_stages,
        }


@dataclass(frozen=True)
class SubnetFeatures:
    """Final stage tensor per task and pyramid level."""

    cls: dict[int, np.ndarray] = field(default_factory=dict)
    reg: dict[int, np.ndarray] = field(default_factory=dict)
    thing: dict[int, np.ndarray] = field(default_factory=dict)
    stuff: dict[int, np.ndarray] = field(default_factory=dict)


def subnet_entries(cfg: SubnetConfig) -> dict[str, tuple[int, ...]]:
    """Checkpoint entry shapes for all stages and flow adapters.

    Adapter entries exist whenever the source stage exists, regardless of
    the flow switches, so a seeded checkpoint is identical across ablations.
    """
    c = cfg.channels
    conv_shape = (c, c, 3, 3)
    entries: dict[str, tuple[int, ...]] = {}
    for task, count in cfg.stages().items():
        for j in range(1, count + 1):
            entries[f"subnet.{task}.stage{j}.conv"] = conv_shape
            entries[f"subnet.{task}.stage{j}.bias"] = (c,)
    for dst in ("cls", "stuff"):
        depth = min(getattr(cfg, f"{dst}_stages"), cfg.reg_stages)
        for j in range(1, depth + 1):
            entries[f"flow.reg_{dst}.stage{j}.conv"] = conv_shape
            entries[f"flow.reg_{dst}.stage{j}.bias"] = (c,)
    if cfg.thing_stages >= 1:
        for src in ("reg", "stuff"):
            entries[f"flow.{src}_thing.stage1.conv"] = conv_shape
            entries[f"flow.{src}_thing.stage1.bias"] = (c,)
    return entries


def _run_chain(
    base: np.ndarray,
    task: str,
    stages: int,
    ckpt: Checkpoint,
    flow_from: list[np.ndarray] | None,
    flow_prefix: str | None,
) -> list[np.ndarray]:
    """Stage tensors [stage 0 .. stage n]; stage 0 is the input level.

    When a flow source list is given, stage j adds the adapter conv of the
    source's stage-j tensor before its own conv, for every j the source has.
    """
    seq = [base]
    x = base
    for j in range(1, stages + 1):
        inp = x
        if flow_from is not None and j < len(flow_from):
            adapter = conv2d(flow_from[j], ckpt.conv(f"{flow_prefix}.stage{j}"), padding=1)
            inp = inp + adapter
        x = relu(conv2d(inp, ckpt.conv(f"subnet.{task}.stage{j}"), padding=1))
        seq.append(x)
    return seq


def run_subnets(
    pyramid: FeaturePyramid, cfg: SubnetConfig, ckpt: Checkpoint
) -> SubnetFeatures:
    """Run all four sub-networks; cls/reg on levels 3..7, thing/stuff on 3..5.

    The first thing stage adds its flow terms to the level input in a fixed
    order: stuff adapter first, then reg adapter.
    """
    det_levels = select_levels(pyramid, "detection")
    seg_levels = select_levels(pyramid, "segmentation")
    out = SubnetFeatures()
    for level in det_levels:
        base = pyramid[level]
        reg_seq = _run_chain(base, "reg", cfg.reg_stages, ckpt, None, None)
        cls_flow = reg_seq if cfg.reg_to_cls else None
        cls_seq = _run_chain(base, "cls", cfg.cls_stages, ckpt, cls_flow, "flow.reg_cls")
        out.reg[level] = reg_seq[-1]
        out.cls[level] = cls_seq[-1]
        if level not in seg_levels:
            continue
        stuff_flow = reg_seq if cfg.reg_to_stuff else None
        stuff_seq = _run_chain(
            base, "stuff", cfg.stuff_stages, ckpt, stuff_flow, "flow.reg_stuff"
        )
        out.stuff[level] = stuff_seq[-1]
        x = base
        for j in range(1, cfg.thing_stages + 1):
            inp = x
            if j == 1:
                if cfg.stuff_to_thing:
                    inp = inp + conv2d(
                        stuff_seq[-1], ckpt.conv("flow.stuff_thing.stage1"), padding=1
                    )
                if cfg.reg_to_thing:
                    inp = inp + conv2d(
                        reg_seq[-1], ckpt.conv("flow.reg_thing.stage1"), padding=1
                    )
            x = relu(conv2d(inp, ckpt.conv(f"subnet.thing.stage{j}"), padding=1))
        out.thing[level] = x
    return out


def loss_compose(
    l_cls: float, l_reg: float, l_thing: float, l_stuff: float, lam: float = 0.25
) -> float:
    """Total loss (l_cls + l_reg + l_thing) + lam * l_stuff."""
    parts = {"l_cls": l_cls, "l_reg": l_reg, "l_thing": l_thing, "l_stuff": l_stuff}
    for name, value in parts.items():
        if not math.isfinite(value) or value < 0:
            raise DataError(f"loss component {name} must be finite and >= 0, got {value}")
    if not math.isfinite(lam) or lam < 0:
        raise ConfigError(f"stuff loss weight must be finite and >= 0, got {lam}")
    return (l_cls + l_reg + l_thing) + lam * l_stuff
