"""Bit-exact COCO panoptic readers and writers.

Segment ids are encoded in RGB as id = R + 256*G + 256^2*B, void black.
PNGs are written with fixed settings (filter 0, zlib level 6) so identical
maps always serialize to identical bytes; decoding uses Pillow and accepts
any conforming PNG.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib

import numpy as np
from PIL import Image

from .errors import DataError, SchemaError
from .panoptic import PanopticMap, SegmentInfo

MAX_ID = 256 ** 3 - 1
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def id_to_rgb(ids: np.ndarray) -> np.ndarray:
    """Map an id raster to an (h, w, 3) uint8 image."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) > MAX_ID:
        raise DataError(
            f"segment ids must be in [0, {MAX_ID}], got range "
            f"[{ids.min()}, {ids.max()}]"
        )
    out = np.empty(ids.shape + (3,), dtype=np.uint8)
    out[..., 0] = ids % 256
    out[..., 1] = (ids // 256) % 256
    out[..., 2] = ids // 65536
    return out


def rgb_to_id(rgb: np.ndarray) -> np.ndarray:
    """Inverse of :func:`id_to_rgb`, returning int32."""
    rgb = np.asarray(rgb).astype(np.int32)
    return rgb[..., 0] + 256 * rgb[..., 1] + 65536 * rgb[..., 2]


def _chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def encode_rgb_png(rgb: np.ndarray) -> bytes:
    """Serialize an (h, w, 3) uint8 image as a deterministic truecolor PNG."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"expected (h, w, 3) uint8 image, got shape {rgb.shape}")
    h, w = rgb.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    rows = np.zeros((h, 1 + w * 3), dtype=np.uint8)
    rows[:, 1:] = rgb.reshape(h, w * 3)
    idat = zlib.compress(rows.tobytes(), 6)
    return (
        _PNG_SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", idat)
        + _chunk(b"IEND", b"")
    )


def encode_png(panoptic: PanopticMap) -> bytes:
    """Serialize a panoptic map's id raster as PNG bytes."""
    return encode_rgb_png(id_to_rgb(panoptic.id_raster))


def decode_rgb_png(data: bytes) -> np.ndarray:
    """Decode PNG bytes to an (h, w, 3) uint8 array."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise DataError(f"cannot decode PNG: {exc}") from None
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.uint8)


def decode_id_raster(data: bytes) -> np.ndarray:
    """Decode PNG bytes straight to an int32 id raster."""
    return rgb_to_id(decode_rgb_png(data))


def decode_png(
    data: bytes,
    segments_info: list[dict],
    categories: dict[int, bool] | None = None,
) -> PanopticMap:
    """Decode a panoptic PNG and cross-check it against its segment records.

    ``categories`` maps category_id to isthing for labeling the segments;
    unknown categories default to stuff.  Listed ids missing from the PNG,
    unlisted ids present in it, and area mismatches all raise SchemaError.
    """
    raster = decode_id_raster(data)
    ids, counts = np.unique(raster, return_counts=True)
    raster_area = dict(zip(ids.tolist(), counts.tolist()))
    categories = categories or {}
    segments = []
    listed = set()
    for i, row in enumerate(segments_info):
        try:
            sid = int(row["id"])
            category_id = int(row["category_id"])
            iscrowd = bool(row.get("iscrowd", 0))
            area = row.get("area")
        except (KeyError, TypeError, ValueError):
            raise SchemaError(f"segments_info entry {i} is malformed: {row!r}") from None
        if sid in listed:
            raise SchemaError(f"segments_info lists id {sid} twice")
        listed.add(sid)
        actual = raster_area.get(sid, 0)
        if actual == 0:
            raise SchemaError(f"segments_info id {sid} does not appear in the PNG")
        if area is not None and int(area) != actual:
            raise SchemaError(
                f"segment {sid} lists area {area} but the PNG has {actual} pixels"
            )
        segments.append(
            SegmentInfo(
                id=sid,
                category_id=category_id,
                isthing=categories.get(category_id, False),
                area=actual,
                iscrowd=iscrowd,
            )
        )
    for rid in raster_area:
        if rid != 0 and rid not in listed:
            raise SchemaError(f"PNG id {rid} is not listed in segments_info")
    return PanopticMap(raster, segments)


class PanopticArchive:
    """A categories table plus lazy (image_id, PanopticMap) iteration."""

    def __init__(self, annotations: list[dict], categories: dict[int, dict], png_dir: str):
        self.annotations = annotations
        self.categories = categories
        self.png_dir = png_dir

    @property
    def thing_ids(self) -> set[int]:
        return {cid for cid, row in self.categories.items() if row.get("isthing")}

    def __len__(self) -> int:
        return len(self.annotations)

    def __iter__(self):
        isthing = {cid: bool(row.get("isthing")) for cid, row in self.categories.items()}
        for ann in self.annotations:
            path = os.path.join(self.png_dir, ann["file_name"])
            try:
                with open(path, "rb") as fh:
                    data = fh.read()
            except FileNotFoundError:
                raise DataError(f"panoptic PNG {path!r} not found") from None
            yield ann["image_id"], decode_png(data, ann["segments_info"], isthing)


def load_archive(json_path: str, png_dir: str) -> PanopticArchive:
    """Open a COCO panoptic annotation JSON with its PNG directory.

    Annotations are ordered by ascending image_id; PNGs decode lazily
    during iteration.
    """
    try:
        with open(json_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"annotation file {json_path!r} not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"annotation file {json_path!r}: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("annotations"), list):
        raise SchemaError(f"annotation file {json_path!r}: missing 'annotations' list")
    annotations = []
    for i, ann in enumerate(doc["annotations"]):
        if not isinstance(ann, dict) or not {"image_id", "file_name", "segments_info"} <= set(ann):
            raise SchemaError(
                f"annotation file {json_path!r}: entry {i} needs image_id, "
                "file_name, segments_info"
            )
        annotations.append(ann)
    seen_ids = [ann["image_id"] for ann in annotations]
    if len(set(seen_ids)) != len(seen_ids):
        raise SchemaError(f"annotation file {json_path!r}: duplicate image_id values")
    annotations.sort(key=lambda ann: ann["image_id"])
    categories = {}
    for row in doc.get("categories", []):
        if not isinstance(row, dict) or "id" not in row:
            raise SchemaError(f"annotation file {json_path!r}: malformed category {row!r}")
        categories[int(row["id"])] = row
    return PanopticArchive(annotations, categories, png_dir)


def save_archive(
    json_path: str,
    png_dir: str,
    items: list[tuple[int, PanopticMap]],
    categories: list[dict] | None = None,
) -> None:
    """Write maps as <image_id>.png files plus the annotation JSON."""
    os.makedirs(png_dir, exist_ok=True)
    annotations = []
    for image_id, panoptic in sorted(items, key=lambda pair: pair[0]):
        file_name = f"{image_id:012d}.png"
        with open(os.path.join(png_dir, file_name), "wb") as fh:
            fh.write(encode_png(panoptic))
        annotations.append(
            {
                "image_id": image_id,
                "file_name": file_name,
                "segments_info": [
                    {
                        "id": seg.id,
                        "category_id": seg.category_id,
                        "iscrowd": int(seg.iscrowd),
                        "area": seg.area,
                    }
                    for seg in panoptic.segments
                ],
            }
        )
    doc = {"annotations": annotations, "categories": categories or []}
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
