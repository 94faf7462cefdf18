"""Run configuration: one JSON file plus flag overrides (flags win).

Defaults mirror the published setup: stages (4, 4, 4, 1) with every flow
on, fusion thresholds 0.37 / 0.37 / 4900 / 0.6, NMS 0.4 with top-100, and
stuff loss weight 0.25.  Category convention: thing categories are 1..K,
stuff categories K+1..K+S, and the stuff head's extra 'other' channel maps
to no category.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .fusion import FusionConfig
from .subnets import FLOW_NAMES, SubnetConfig


@dataclass(frozen=True)
class RunConfig:
    image_size: int = 256
    seed: int = 0
    num_things: int = 8
    num_stuff: int = 6
    lambda_stuff: float = 0.25
    workers: int = 1
    score_thresh: float = 0.05
    pre_nms_top: int = 1000
    nms_iou: float = 0.4
    top_k: int = 100
    subnet: SubnetConfig = field(default_factory=SubnetConfig)
    fusion: FusionConfig | None = None

    def __post_init__(self) -> None:
        if self.image_size < 128:
            raise ConfigError(f"image_size must be >= 128, got {self.image_size}")
        if self.num_things < 1 or self.num_stuff < 1:
            raise ConfigError(
                f"need at least one thing and one stuff class, got "
                f"{self.num_things}/{self.num_stuff}"
            )
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not 0.0 <= self.score_thresh <= 1.0:
            raise ConfigError(f"score_thresh must be in [0, 1], got {self.score_thresh}")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ConfigError(f"nms_iou must be in [0, 1], got {self.nms_iou}")
        if self.pre_nms_top < 1 or self.top_k < 1:
            raise ConfigError("pre_nms_top and top_k must be >= 1")
        if self.lambda_stuff < 0:
            raise ConfigError(f"lambda_stuff must be >= 0, got {self.lambda_stuff}")
        if self.fusion is None:
            object.__setattr__(
                self, "fusion", FusionConfig(stuff_category_base=self.num_things)
            )

    @property
    def thing_ids(self) -> set[int]:
        return set(range(1, self.num_things + 1))

    @property
    def stuff_ids(self) -> set[int]:
        return set(range(self.num_things + 1, self.num_things + self.num_stuff + 1))

    def category_table(self) -> list[dict]:
        """COCO-style categories rows for the configured classes."""
        rows = [
            {"id": cid, "name": f"thing_{cid}", "isthing": 1}
            for cid in sorted(self.thing_ids)
        ]
        rows += [
            {"id": cid, "name": f"stuff_{cid - self.num_things}", "isthing": 0}
            for cid in sorted(self.stuff_ids)
        ]
        return rows


_TOP_KEYS = {
    "image_size", "seed", "num_things", "num_stuff", "lambda_stuff", "workers",
    "score_thresh", "pre_nms_top", "nms_iou", "top_k", "subnet", "fusion",
}
_SUBNET_KEYS = {
    "cls_stages", "reg_stages", "stuff_stages", "thing_stages", "channels",
    *FLOW_NAMES,
}
_FUSION_KEYS = {
    "score_thresh", "overlap_thresh", "stuff_area_limit", "box_fill_overlap",
    "other_class_id", "stuff_category_base",
}


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} config keys: {sorted(unknown)}")


def load_config(path: str | None) -> RunConfig:
    """Build a RunConfig from a JSON file, or the defaults when no path."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path!r}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path!r}: expected a JSON object")
    _check_keys(doc, _TOP_KEYS, "top-level")
    kwargs = {k: v for k, v in doc.items() if k not in ("subnet", "fusion")}
    try:
        if "subnet" in doc:
            _check_keys(doc["subnet"], _SUBNET_KEYS, "subnet")
            kwargs["subnet"] = SubnetConfig(**doc["subnet"])
        if "fusion" in doc:
            _check_keys(doc["fusion"], _FUSION_KEYS, "fusion")
            fusion = dict(doc["fusion"])
            fusion.setdefault(
                "stuff_category_base", int(doc.get("num_things", RunConfig.num_things))
            )
            kwargs["fusion"] = FusionConfig(**fusion)
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"config file {path!r}: {exc}") from None


def apply_overrides(
    cfg: RunConfig,
    seed: int | None = None,
    size: int | None = None,
    workers: int | None = None,
    lambda_stuff: float | None = None,
    disable_flows: list[str] | None = None,
    stages: dict[str, int] | None = None,
) -> RunConfig:
    """Apply command-line overrides on top of a loaded config."""
    updates: dict = {}
    if seed is not None:
        updates["seed"] = seed
    if size is not None:
        updates["image_size"] = size
    if workers is not None:
        updates["workers"] = workers
    if lambda_stuff is not None:
        updates["lambda_stuff"] = lambda_stuff
    subnet_updates: dict = {}
    for name in disable_flows or []:
        if name not in FLOW_NAMES:
            raise ConfigError(f"unknown flow {name!r}: expected one of {FLOW_NAMES}")
        subnet_updates[name] = False
    for task, count in (stages or {}).items():
        if task not in ("cls", "reg", "stuff", "thing"):
            raise ConfigError(f"unknown stage task {task!r}")
        subnet_updates[f"{task}_stages"] = count
    if subnet_updates:
        updates["subnet"] = dataclasses.replace(cfg.subnet, **subnet_updates)
    return dataclasses.replace(cfg, **updates) if updates else cfg
