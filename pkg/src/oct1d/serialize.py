"""Flat binary parameter snapshots.

Layout (all integers little-endian ``uint32``)::

    magic  b"OC1D"
    version
    count
    count x { name_len, name (utf-8), rank, dims[rank], values (float64 LE) }
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"OC1D"
VERSION = 1


class SnapshotError(ValueError):
    pass


def write_snapshot(fh: BinaryIO, arrays: Mapping[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_snapshot(fh: BinaryIO) -> dict[str, np.ndarray]:
    if fh.read(4) != MAGIC:
        raise SnapshotError("not a parameter snapshot (bad magic)")
    version, count = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8")
        out[name] = values.reshape(shape).astype(np.float64)
    return out


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise SnapshotError("truncated snapshot")
    return buf


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    with open(Path(path), "wb") as fh:
        write_snapshot(fh, arrays)


def load(path) -> dict[str, np.ndarray]:
    with open(Path(path), "rb") as fh:
        return read_snapshot(fh)
