"""Carry-propagating byte-oriented range coder.

The state is a 32-bit range and a low value with one extra carry bit; bytes
that may still receive a carry are held back (one cached byte plus a run of
0xFF bytes). Frequencies use a fixed power-of-two total.

Symbols outside a table's alphabet are sent as an escape bucket followed by
an Exp-Golomb code of the excess magnitude, written as raw equiprobable bits.
The Exp-Golomb order is a property of the table.
"""

from __future__ import annotations

from bisect import bisect_right

import numpy as np

from .cdf import PRECISION, TOTAL, Table, TableBank

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
MAX_GOLOMB_PREFIX = 40


class DecodeError(ValueError):
    """Corrupt or truncated stream; carries the symbol index and byte offset."""

    def __init__(self, message: str, symbol_index: int | None = None, byte_offset: int | None = None):
        where = []
        if symbol_index is not None:
            where.append(f"symbol {symbol_index}")
        if byte_offset is not None:
            where.append(f"byte {byte_offset}")
        super().__init__(message + (f" (at {', '.join(where)})" if where else ""))
        self.symbol_index = symbol_index
        self.byte_offset = byte_offset


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._first = True
        self._done = False

    def _shift_low(self) -> None:
        low = self.low
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            temp = self.cache
            while True:
                if self._first:
                    # the very first held byte is provably zero; drop it
                    self._first = False
                else:
                    self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, start: int, size: int) -> None:
        """Narrow to ``[start, start + size)`` out of ``TOTAL``."""
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * size
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value: int, nbits: int) -> None:
        """Raw bits, most significant first, each with probability 1/2."""
        for i in range(nbits - 1, -1, -1):
            self.range >>= 1
            if (value >> i) & 1:
                self.low += self.range
            while self.range < TOP:
                self.range <<= 8
                self._shift_low()

    def encode_golomb(self, m: int, k: int = 0) -> None:
        """Order-k Exp-Golomb code of ``m >= 0``."""
        m1 = (m >> k) + 1
        n = m1.bit_length()
        if n - 1 > MAX_GOLOMB_PREFIX:
            raise ValueError(f"escape magnitude {m} too large")
        self.encode_bits(0, n - 1)
        self.encode_bits(m1, n)
        self.encode_bits(m & ((1 << k) - 1), k)

    def encode_symbol(self, table: Table, v: int) -> None:
        """Code integer ``v``; values outside the table alphabet take the escape path."""
        cdf = table.cdf
        if v < table.v_min:
            self.encode(cdf[0], cdf[1] - cdf[0])
            self.encode_golomb(table.v_min - 1 - v, table.order)
        elif v > table.v_max:
            i = table.high_escape
            self.encode(cdf[i], cdf[i + 1] - cdf[i])
            self.encode_golomb(v - table.v_max - 1, table.order)
        else:
            i = v - table.v_min + 1
            self.encode(cdf[i], cdf[i + 1] - cdf[i])

    def finish(self) -> bytes:
        if not self._done:
            for _ in range(5):
                self._shift_low()
            self._done = True
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.range = MASK32
        self.code = 0
        self.symbol_index = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        p = self.pos
        self.pos = p + 1
        if p < len(self.data):
            return self.data[p]
        # the encoder flush emits exactly the bytes the decoder will pull
        raise DecodeError("read past end of stream", self.symbol_index, p)

    def _normalize(self) -> None:
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next_byte()) & MASK32

    def decode_bucket(self, cdf: list[int]) -> int:
        r = self.range >> PRECISION
        target = self.code // r
        if target >= TOTAL:
            raise DecodeError("code value outside the coding interval", self.symbol_index, self.pos)
        i = bisect_right(cdf, target) - 1
        start = cdf[i]
        self.code -= r * start
        self.range = r * (cdf[i + 1] - start)
        self._normalize()
        return i

    def decode_bits(self, nbits: int) -> int:
        value = 0
        for _ in range(nbits):
            self.range >>= 1
            bit = 0
            if self.code >= self.range:
                self.code -= self.range
                bit = 1
            value = (value << 1) | bit
            self._normalize()
        return value

    def decode_golomb(self, k: int = 0) -> int:
        zeros = 0
        while True:
            self.range >>= 1
            if self.code >= self.range:
                self.code -= self.range
                self._normalize()
                break
            self._normalize()
            zeros += 1
            if zeros > MAX_GOLOMB_PREFIX:
                raise DecodeError("escape prefix too long", self.symbol_index, self.pos)
        high = ((1 << zeros) | self.decode_bits(zeros)) - 1
        return (high << k) | self.decode_bits(k)

    def decode_symbol(self, table: Table) -> int:
        i = self.decode_bucket(table.cdf)
        if i == 0:
            v = table.v_min - 1 - self.decode_golomb(table.order)
        elif i == table.high_escape:
            v = table.v_max + 1 + self.decode_golomb(table.order)
        else:
            v = i - 1 + table.v_min
        self.symbol_index += 1
        return v

    def check_consumed(self) -> None:
        """Every byte of the stream must have been needed by the decoder.

        The flush writes the final ``low`` verbatim, so an intact stream leaves
        the code register at exactly zero; this also catches damage confined to
        the flush bytes, which never influence a decoded symbol.
        """
        if self.pos < len(self.data):
            raise DecodeError(f"{len(self.data) - self.pos} unread trailing bytes",
                              self.symbol_index, self.pos)
        if self.code != 0:
            raise DecodeError("stream tail does not match the coder state", self.symbol_index, self.pos)


def encode_symbols(symbols, levels, bank: TableBank) -> bytes:
    """Code a flat symbol sequence; ``levels[j]`` selects the grid table for symbol j."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    levels = np.asarray(levels, dtype=np.int64).ravel()
    if symbols.shape != levels.shape:
        raise ValueError("symbols and levels differ in length")
    bank.ensure(levels)
    enc = RangeEncoder()
    lo, hi = bank.v_min[levels], bank.v_max[levels]
    idx = np.clip(symbols, lo - 1, hi + 1) - lo + 1
    starts = bank.padded[levels, idx]
    sizes = (bank.padded[levels, idx + 1] - starts).tolist()
    starts = starts.tolist()
    escapes = set(np.flatnonzero((symbols < lo) | (symbols > hi)).tolist())
    sym_list = symbols.tolist() if escapes else None
    lv_list = levels.tolist() if escapes else None
    encode = enc.encode
    for j, (start, size) in enumerate(zip(starts, sizes)):
        encode(start, size)
        if escapes and j in escapes:
            t = bank.tables[lv_list[j]]
            v = sym_list[j]
            enc.encode_golomb(t.v_min - 1 - v if v < t.v_min else v - t.v_max - 1, t.order)
    return enc.finish()


def decode_symbols(dec: RangeDecoder, levels, bank: TableBank) -> np.ndarray:
    levels = np.asarray(levels, dtype=np.int64).ravel()
    bank.ensure(levels)
    tables = bank.tables
    out = [0] * levels.size
    decode = dec.decode_symbol
    for j, lv in enumerate(levels.tolist()):
        out[j] = decode(tables[lv])
    return np.asarray(out, dtype=np.int64)
