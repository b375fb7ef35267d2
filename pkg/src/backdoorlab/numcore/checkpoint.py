"""Portable binary checkpoint container for named tensor segments.

Layout (little-endian throughout):
  magic   4 bytes  b"BERS"
  version u32      currently 1
  count   u32      number of segments
  per segment:
    name_len u32, name UTF-8 bytes,
    rank u32, dims u32 each,
    values: rank-product float64 IEEE-754 values, row-major.

Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import DTYPE
from .params import ParamVector

MAGIC = b"BERS"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def save_segments(path: str | Path, segments: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(segments)))
        for name, arr in segments:
            arr = np.ascontiguousarray(arr, dtype=DTYPE)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f8", copy=False).tobytes())


def load_segments(path: str | Path) -> list[tuple[str, np.ndarray]]:
    blob = Path(path).read_bytes()

    def take(n: int, off: int) -> tuple[bytes, int]:
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        return blob[off:off + n], off + n

    raw, off = take(4, 0)
    if raw != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw!r}, expected {MAGIC!r}")
    raw, off = take(8, off)
    version, count = struct.unpack("<II", raw)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    segments: list[tuple[str, np.ndarray]] = []
    for _ in range(count):
        raw, off = take(4, off)
        (name_len,) = struct.unpack("<I", raw)
        raw, off = take(name_len, off)
        name = raw.decode("utf-8")
        raw, off = take(4, off)
        (rank,) = struct.unpack("<I", raw)
        raw, off = take(4 * rank, off)
        dims = struct.unpack(f"<{rank}I", raw) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        raw, off = take(8 * n, off)
        arr = np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(dims)
        segments.append((name, arr))
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return segments


def save_params(path: str | Path, params: ParamVector) -> None:
    save_segments(path, [(n, t.data) for n, t in params.segments])


def load_params(path: str | Path) -> ParamVector:
    pv = ParamVector()
    for name, arr in load_segments(path):
        pv.add(name, arr)
    return pv
