"""Weight snapshot files.

Layout (little-endian)::

    b"FCAW" | version u32 | count u32 | { rank u32 | dims u32 * rank | f32 payload } * count
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"FCAW"
VERSION = 1


class SnapshotFormatError(ValueError):
    pass


def encode_weights(arrays: Sequence[np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for arr in arrays:
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def _take(buf: memoryview, pos: int, n: int) -> tuple[memoryview, int]:
    if pos + n > len(buf):
        raise SnapshotFormatError(f"truncated snapshot: need {n} bytes at offset {pos}")
    return buf[pos : pos + n], pos + n


def decode_weights(data: bytes) -> tuple[list[np.ndarray], int]:
    """Parse one weight block; returns the arrays and the bytes consumed."""
    buf = memoryview(data)
    head, pos = _take(buf, 0, 12)
    if bytes(head[:4]) != MAGIC:
        raise SnapshotFormatError(f"bad magic {bytes(head[:4])!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", head[4:])
    if version != VERSION:
        raise SnapshotFormatError(f"unsupported snapshot version {version}")
    arrays = []
    for _ in range(count):
        raw, pos = _take(buf, pos, 4)
        (rank,) = struct.unpack("<I", raw)
        raw, pos = _take(buf, pos, 4 * rank)
        dims = struct.unpack(f"<{rank}I", raw)
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw, pos = _take(buf, pos, 4 * n)
        arrays.append(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims))
    return arrays, pos


def save_weights(path, arrays: Sequence[np.ndarray]) -> None:
    Path(path).write_bytes(encode_weights(arrays))


def load_weights(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    arrays, used = decode_weights(data)
    if used != len(data):
        raise SnapshotFormatError(f"{path}: {len(data) - used} trailing bytes after weights")
    return arrays
