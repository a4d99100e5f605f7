"""Bitstream container.

All integers are little-endian::

    magic      4 bytes  b"IVCS"
    version    u8
    flags      u8       reserved, must be zero
    orig_w     u16
    orig_h     u16
    pad_w      u16
    pad_h      u16
    q          u32      unsigned 16.16 fixed point
    config     u64      model configuration hash
    n_scales   u8
    per scale, coarsest first:
        length u32      payload bytes
        crc    u32      CRC-32 of the decoded symbols (int32 little-endian)
    payloads, concatenated in the same order
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"IVCS"
VERSION = 1
_FIXED = struct.Struct("<4sBBHHHHIQB")
_CHUNK = struct.Struct("<II")
Q_ONE = 1 << 16
MAX_DIM = 0xFFFF


class ContainerError(ValueError):
    pass


def q_to_fixed(q: float) -> int:
    f = int(round(float(q) * Q_ONE))
    if not 0 <= f <= 0xFFFFFFFF:
        raise ValueError(f"quality {q} not representable")
    return f


def fixed_to_q(f: int) -> float:
    return f / Q_ONE


def symbols_crc(symbols: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(symbols, dtype="<i4").tobytes())


@dataclass
class Container:
    orig_w: int
    orig_h: int
    pad_w: int
    pad_h: int
    q_fixed: int
    config_hash: int
    payloads: list[bytes] = field(default_factory=list)
    crcs: list[int] = field(default_factory=list)
    flags: int = 0

    @property
    def q(self) -> float:
        return fixed_to_q(self.q_fixed)

    def header_size(self) -> int:
        return _FIXED.size + _CHUNK.size * len(self.payloads)

    def to_bytes(self) -> bytes:
        for name in ("orig_w", "orig_h", "pad_w", "pad_h"):
            v = getattr(self, name)
            if not 1 <= v <= MAX_DIM:
                raise ContainerError(f"{name}={v} outside 1..{MAX_DIM}")
        if len(self.payloads) != len(self.crcs):
            raise ContainerError("one CRC per payload required")
        parts = [_FIXED.pack(MAGIC, VERSION, self.flags, self.orig_w, self.orig_h, self.pad_w,
                             self.pad_h, self.q_fixed, self.config_hash, len(self.payloads))]
        parts += [_CHUNK.pack(len(p), c) for p, c in zip(self.payloads, self.crcs)]
        parts += self.payloads
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Container":
        if len(blob) < _FIXED.size:
            raise ContainerError("stream shorter than its header")
        magic, version, flags, ow, oh, pw, ph, qf, chash, n = _FIXED.unpack_from(blob, 0)
        if magic != MAGIC:
            raise ContainerError("not a compressed image (bad magic)")
        if version != VERSION:
            raise ContainerError(f"unsupported stream version {version}")
        if flags != 0:
            raise ContainerError(f"unknown flags {flags:#x}")
        pos = _FIXED.size
        if len(blob) < pos + n * _CHUNK.size:
            raise ContainerError("truncated chunk table")
        table = [_CHUNK.unpack_from(blob, pos + k * _CHUNK.size) for k in range(n)]
        pos += n * _CHUNK.size
        payloads = []
        for k, (length, _) in enumerate(table):
            if pos + length > len(blob):
                raise ContainerError(f"chunk {k} truncated")
            payloads.append(bytes(blob[pos:pos + length]))
            pos += length
        if pos != len(blob):
            raise ContainerError(f"{len(blob) - pos} trailing bytes after last chunk")
        return cls(ow, oh, pw, ph, qf, chash, payloads, [c for _, c in table], flags)
