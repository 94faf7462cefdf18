"""Named weight storage plus counter-based seeded initialization.

A checkpoint is a flat map of entry name to float32 array, saved as a JSON
manifest [{name, dims, byte_offset}] next to a contiguous little-endian
float32 blob.  Seeded initialization draws every entry from its own
splitmix64 stream keyed by the entry name, so values do not depend on
platform, entry order, or how many other entries exist.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import CheckpointError
from .kernels import ConvParams

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of the UTF-8 bytes of ``text``."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def splitmix64(counters: np.ndarray) -> np.ndarray:
    """Apply the splitmix64 finalizer to an array of uint64 counters."""
    z = counters.astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def uniform_stream(name: str, seed: int, count: int) -> np.ndarray:
    """``count`` float64 values in [0, 1) from the stream keyed by ``name``.

    Value i is splitmix64(stream_seed + (i+1) * golden) scaled by 2^-53,
    where stream_seed = seed XOR fnv1a64(name).  Pure counter-based: any
    prefix of the stream is independent of the requested length.
    """
    stream_seed = np.uint64((seed & 0xFFFFFFFFFFFFFFFF) ^ fnv1a64(name))
    idx = np.arange(1, count + 1, dtype=np.uint64)
    bits = splitmix64(stream_seed + idx * _GOLDEN)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


class Checkpoint:
    """Flat name -> float32 array store with structured missing-entry errors."""

    def __init__(self, entries: dict[str, np.ndarray] | None = None) -> None:
        self._entries: dict[str, np.ndarray] = {}
        if entries:
            for name, arr in entries.items():
                self.put(name, arr)

    def put(self, name: str, array: np.ndarray) -> None:
        self._entries[name] = np.ascontiguousarray(array, dtype=np.float32)

    def get(self, name: str) -> np.ndarray:
        try:
            return self._entries[name]
        except KeyError:
            raise CheckpointError(f"checkpoint entry {name!r} is missing") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return sorted(self._entries)

    def conv(self, prefix: str) -> ConvParams:
        """Bundle ``<prefix>.conv`` and ``<prefix>.bias`` into ConvParams."""
        return ConvParams(self.get(prefix + ".conv"), self.get(prefix + ".bias"))

    def save(self, manifest_path: str) -> None:
        """Write the JSON manifest and the sibling ``.bin`` float32 blob."""
        blob_path = os.path.splitext(manifest_path)[0] + ".bin"
        manifest = []
        offset = 0
        chunks = []
        for name in self.names():
            arr = self._entries[name]
            manifest.append(
                {"name": name, "dims": list(arr.shape), "byte_offset": offset}
            )
            data = arr.astype("<f4").tobytes()
            chunks.append(data)
            offset += len(data)
        with open(blob_path, "wb") as fh:
            fh.write(b"".join(chunks))
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, manifest_path: str) -> "Checkpoint":
        blob_path = os.path.splitext(manifest_path)[0] + ".bin"
        try:
            with open(manifest_path, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except FileNotFoundError:
            raise CheckpointError(f"checkpoint manifest {manifest_path!r} not found") from None
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"checkpoint manifest {manifest_path!r}: {exc}") from None
        try:
            with open(blob_path, "rb") as fh:
                blob = fh.read()
        except FileNotFoundError:
            raise CheckpointError(f"checkpoint blob {blob_path!r} not found") from None
        ckpt = cls()
        for row in manifest:
            try:
                name = row["name"]
                dims = tuple(int(d) for d in row["dims"])
                offset = int(row["byte_offset"])
            except (KeyError, TypeError, ValueError):
                raise CheckpointError(
                    f"checkpoint manifest {manifest_path!r}: malformed row {row!r}"
                ) from None
            count = 1
            for d in dims:
                count *= d
            end = offset + 4 * count
            if offset < 0 or end > len(blob):
                raise CheckpointError(
                    f"checkpoint entry {name!r} spans bytes {offset}:{end} "
                    f"but blob has {len(blob)}"
                )
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            ckpt.put(name, arr.reshape(dims))
        return ckpt


def seeded_checkpoint(shapes: dict[str, tuple[int, ...]], seed: int) -> Checkpoint:
    """Deterministic weights for every named entry.

    ``.conv`` entries draw He-uniform values with bound sqrt(6 / fan_in)
    where fan_in is the product of all non-leading weight dims; ``.gamma``
    entries are ones; ``.bias`` and ``.beta`` entries are zeros.
    """
    ckpt = Checkpoint()
    for name, shape in shapes.items():
        count = 1
        for d in shape:
            count *= d
        if name.endswith(".conv"):
            fan_in = count // shape[0]
            bound = np.sqrt(6.0 / fan_in)
            u = uniform_stream(name, seed, count)
            vals = ((u * 2.0 - 1.0) * bound).astype(np.float32)
        elif name.endswith(".gamma"):
            vals = np.ones(count, dtype=np.float32)
        elif name.endswith((".bias", ".beta")):
            vals = np.zeros(count, dtype=np.float32)
        else:
            raise CheckpointError(
                f"checkpoint entry {name!r} has no init rule "
                "(expected .conv, .bias, .gamma, or .beta suffix)"
            )
        ckpt.put(name, vals.reshape(shape))
    return ckpt
