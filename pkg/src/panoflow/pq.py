"""Panoptic/segmentation/recognition quality with reducible statistics.

Matching is computed in one pass over the pixel grid by encoding each
(gt id, pred id) pair as gt * 256^3 + pred and counting unique values.
A pair matches when categories agree and IoU > 0.5 (strict); the union
excludes the predicted segment's overlap with ground-truth void.  Crowd
ground-truth segments never match and never count as FN, and an unmatched
prediction is not an FP when more than half of it lies on void or on crowd
regions of its own class.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .panoptic import PanopticMap

_OFFSET = 256 ** 3


@dataclass
class ClassStats:
    """Accumulators for one category."""

    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "ClassStats") -> None:
        self.iou_sum += other.iou_sum
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn


class PQStats:
    """Per-category statistics, mergeable across images."""

    def __init__(self) -> None:
        self.per_class: dict[int, ClassStats] = {}

    def __getitem__(self, category_id: int) -> ClassStats:
        return self.per_class.setdefault(category_id, ClassStats())

    def merge(self, other: "PQStats") -> "PQStats":
        for category_id in sorted(other.per_class):
            self[category_id].add(other.per_class[category_id])
        return self


def reduce_stats(stats: list[PQStats]) -> PQStats:
    """Fieldwise sum, folded left in list order (order-stable float sums)."""
    total = PQStats()
    for s in stats:
        total.merge(s)
    return total


def match_segments(gt: PanopticMap, pred: PanopticMap) -> PQStats:
    """Per-image TP/FP/FN and IoU sums from one pixel pass."""
    if gt.shape != pred.shape:
        raise ShapeError(f"gt raster {gt.shape} and pred raster {pred.shape} differ")
    gt_table = gt.segment_by_id()
    pred_table = pred.segment_by_id()
    pairs, counts = np.unique(
        gt.id_raster.astype(np.int64) * _OFFSET + pred.id_raster.astype(np.int64),
        return_counts=True,
    )
    inter: dict[tuple[int, int], int] = {}
    gt_areas: dict[int, int] = {}
    pred_areas: dict[int, int] = {}
    for pair, count in zip(pairs.tolist(), counts.tolist()):
        gid, pid = divmod(pair, _OFFSET)
        inter[(gid, pid)] = count
        gt_areas[gid] = gt_areas.get(gid, 0) + count
        pred_areas[pid] = pred_areas.get(pid, 0) + count
    for gid in gt_areas:
        if gid != 0 and gid not in gt_table:
            raise DataError(f"gt raster id {gid} has no segment record")
    for pid in pred_areas:
        if pid != 0 and pid not in pred_table:
            raise DataError(f"pred raster id {pid} has no segment record")

    stats = PQStats()
    matched_gt: set[int] = set()
    matched_pred: set[int] = set()
    for (gid, pid), count in inter.items():
        if gid == 0 or pid == 0:
            continue
        g = gt_table[gid]
        p = pred_table[pid]
        if g.iscrowd or g.category_id != p.category_id:
            continue
        union = gt_areas[gid] + pred_areas[pid] - count - inter.get((0, pid), 0)
        iou = count / union
        if iou > 0.5:
            cs = stats[g.category_id]
            cs.tp += 1
            cs.iou_sum += iou
            matched_gt.add(gid)
            matched_pred.add(pid)

    crowd_by_cat: dict[int, list[int]] = {}
    for gid, g in gt_table.items():
        if g.iscrowd:
            crowd_by_cat.setdefault(g.category_id, []).append(gid)
        elif gid not in matched_gt:
            stats[g.category_id].fn += 1
    for pid, p in pred_table.items():
        if pid in matched_pred:
            continue
        ignored = inter.get((0, pid), 0)
        for gid in crowd_by_cat.get(p.category_id, ()):
            ignored += inter.get((gid, pid), 0)
        if ignored / pred_areas.get(pid, 1) > 0.5:
            continue
        stats[p.category_id].fp += 1
    return stats


@dataclass(frozen=True)
class ClassScores:
    pq: float
    sq: float
    rq: float


@dataclass(frozen=True)
class GroupScores:
    pq: float
    sq: float
    rq: float
    n: int


@dataclass(frozen=True)
class PQReport:
    """Fraction-valued scores; serialization scales by 100."""

    all: GroupScores
    things: GroupScores
    stuff: GroupScores
    per_class: dict[int, ClassScores] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        def group(g: GroupScores) -> dict:
            return {"pq": g.pq * 100.0, "sq": g.sq * 100.0, "rq": g.rq * 100.0, "n": g.n}

        return {
            "All": group(self.all),
            "Things": group(self.things),
            "Stuff": group(self.stuff),
            "per_class": {
                str(cid): {
                    "pq": cs.pq * 100.0,
                    "sq": cs.sq * 100.0,
                    "rq": cs.rq * 100.0,
                }
                for cid, cs in sorted(self.per_class.items())
            },
        }

    def format_table(self) -> str:
        rows = [f"{'':>10} {'PQ':>6} {'SQ':>6} {'RQ':>6} {'N':>4}"]
        for label, g in (("All", self.all), ("Things", self.things), ("Stuff", self.stuff)):
            rows.append(
                f"{label:>10} {g.pq * 100:6.1f} {g.sq * 100:6.1f} {g.rq * 100:6.1f} {g.n:4d}"
            )
        return "\n".join(rows)


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def compute_pq(stats: PQStats, thing_ids: set[int] | None = None) -> PQReport:
    """Scores per class and unweighted means over classes that appear.

    Per class: SQ = iou_sum / tp (0 when tp = 0), RQ = tp / (tp + fp/2 +
    fn/2), and PQ = SQ * RQ through the same float path, so the identity
    holds exactly.  Classes with tp = fp = fn = 0 are excluded everywhere.
    """
    thing_ids = thing_ids or set()
    per_class: dict[int, ClassScores] = {}
    for category_id in sorted(stats.per_class):
        cs = stats.per_class[category_id]
        if cs.tp + cs.fp + cs.fn == 0:
            continue
        sq = cs.iou_sum / cs.tp if cs.tp > 0 else 0.0
        rq = cs.tp / (cs.tp + cs.fp / 2 + cs.fn / 2)
        per_class[category_id] = ClassScores(pq=sq * rq, sq=sq, rq=rq)

    def group(ids: list[int]) -> GroupScores:
        return GroupScores(
            pq=_mean([per_class[c].pq for c in ids]),
            sq=_mean([per_class[c].sq for c in ids]),
            rq=_mean([per_class[c].rq for c in ids]),
            n=len(ids),
        )

    present = sorted(per_class)
    things = [c for c in present if c in thing_ids]
    stuff = [c for c in present if c not in thing_ids]
    return PQReport(
        all=group(present), things=group(things), stuff=group(stuff), per_class=per_class
    )


def evaluate_pairs(
    pairs: list[tuple[PanopticMap, PanopticMap]], workers: int = 1
) -> PQStats:
    """Match every (gt, pred) pair and reduce; worker count never changes bits.

    Per-pair statistics are collected in list order and folded left, so the
    result is identical for any worker count.
    """
    if workers < 1:
        raise DataError(f"worker count must be >= 1, got {workers}")
    if workers == 1:
        per_image = [match_segments(g, p) for g, p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_image = list(pool.map(lambda gp: match_segments(gp[0], gp[1]), pairs))
    return reduce_stats(per_image)
