"""Weights file: a little-endian list of named 4-D arrays.

Layout::

    magic   b"IVCW"
    version u16
    count   u32
    entry * count:
        name_len u16, name (utf-8)
        dtype    u8   (0 = float32, 1 = float64, 2 = uint8, 3 = int64)
        extents  4 x u32
        values   little-endian, C order

Arrays of rank < 4 are stored with leading unit extents and reshaped on load
by the consumer. Round trips are bit-exact.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IVCW"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}


class WeightsFormatError(ValueError):
    pass


def _tag(arr: np.ndarray) -> int:
    for tag, dt in _DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return tag
    raise WeightsFormatError(f"unsupported dtype {arr.dtype}")


def dumps(entries: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HI", VERSION, len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.ndim > 4:
            raise WeightsFormatError(f"{name}: rank {arr.ndim} > 4")
        extents = (1,) * (4 - arr.ndim) + arr.shape
        raw = name.encode("utf-8")
        tag = _tag(arr)
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B4I", tag, *extents))
        out.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return out.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise WeightsFormatError("bad magic")
    version, count = struct.unpack_from("<HI", view, 4)
    if version != VERSION:
        raise WeightsFormatError(f"unsupported version {version}")
    pos = 10
    entries: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            tag, *extents = struct.unpack_from("<B4I", view, pos)
            pos += 17
            dt = _DTYPES[tag]
            size = int(np.prod(extents)) * dt.itemsize
            if pos + size > len(view):
                raise WeightsFormatError(f"{name}: truncated")
            arr = np.frombuffer(view[pos:pos + size], dtype=dt).reshape(extents)
            pos += size
            entries[name] = arr.astype(dt.newbyteorder("="))
    except (struct.error, KeyError) as exc:
        raise WeightsFormatError(f"corrupt weights file: {exc}") from exc
    if pos != len(view):
        raise WeightsFormatError("trailing bytes after last entry")
    return entries


def save(path: str | Path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
