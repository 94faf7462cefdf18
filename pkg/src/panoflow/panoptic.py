"""Panoptic map container: a segment-id raster plus a segment table."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError


@dataclass(frozen=True)
class SegmentInfo:
    """One segment: raster id, category, thing/stuff flag, pixel area."""

    id: int
    category_id: int
    isthing: bool
    area: int
    iscrowd: bool = False
    score: float | None = None


@dataclass(frozen=True)
class PanopticMap:
    """Per-pixel segment ids (0 = void) with their segment records."""

    id_raster: np.ndarray
    segments: list[SegmentInfo] = field(default_factory=list)

    def __post_init__(self) -> None:
        raster = np.asarray(self.id_raster)
        if raster.ndim != 2:
            raise ShapeError(f"id raster must be 2-D, got shape {raster.shape}")
        object.__setattr__(self, "id_raster", np.ascontiguousarray(raster, dtype=np.int32))

    @property
    def shape(self) -> tuple[int, int]:
        return self.id_raster.shape

    def segment_by_id(self) -> dict[int, SegmentInfo]:
        table: dict[int, SegmentInfo] = {}
        for seg in self.segments:
            if seg.id in table:
                raise DataError(f"duplicate segment id {seg.id}")
            table[seg.id] = seg
        return table

    def validate(self, sequential: bool = False) -> None:
        """Check id uniqueness, area bookkeeping, and raster/table agreement.

        With ``sequential``, segment ids must be exactly 1..n in order (the
        fusion output convention).
        """
        table = self.segment_by_id()
        ids, counts = np.unique(self.id_raster, return_counts=True)
        raster_area = dict(zip(ids.tolist(), counts.tolist()))
        for seg in self.segments:
            if seg.id == 0:
                raise DataError("segment id 0 is reserved for void")
            if seg.area < 1:
                raise DataError(f"segment {seg.id} has area {seg.area} < 1")
            if raster_area.get(seg.id, 0) != seg.area:
                raise DataError(
                    f"segment {seg.id} lists area {seg.area} but the raster has "
                    f"{raster_area.get(seg.id, 0)} pixels"
                )
        for rid in raster_area:
            if rid != 0 and rid not in table:
                raise DataError(f"raster id {rid} has no segment record")
        if sequential:
            expected = list(range(1, len(self.segments) + 1))
            if [seg.id for seg in self.segments] != expected:
                raise DataError("segment ids must be sequential from 1")
