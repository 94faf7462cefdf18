"""Flat tensor container used for every tensor dump and checkpoint blob.

Layout: 4-byte magic ``FTNS``, one little-endian uint32 rank, ``rank``
little-endian uint32 dims, then the float32 payload in row-major order.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

MAGIC = b"FTNS"


def write_tensor(path: str, tensor: np.ndarray) -> None:
    """Serialize ``tensor`` as float32 to ``path``."""
    arr = np.ascontiguousarray(tensor, dtype=np.float32)
    if arr.ndim < 1:
        arr = arr.reshape(1)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path: str) -> np.ndarray:
    """Load a float32 tensor written by :func:`write_tensor`."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise DataError(f"tensor file {path!r} not found") from None
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise DataError(f"{path}: not a tensor file (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 4)
    header_end = 8 + 4 * rank
    if rank < 1 or len(blob) < header_end:
        raise DataError(f"{path}: truncated tensor header")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = 1
    for d in dims:
        count *= d
    expected = header_end + 4 * count
    if len(blob) != expected:
        raise DataError(
            f"{path}: payload is {len(blob) - header_end} bytes, "
            f"dims {tuple(dims)} require {4 * count}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=header_end, count=count)
    return data.reshape(dims).copy()
