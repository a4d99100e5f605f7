"""Quantized cumulative frequency tables for zero-mean discretized Gaussians.

A table covers an alphabet ``[v_min, v_max]``. Bucket 0 is the low escape,
buckets 1..n are the alphabet and bucket n+1 is the high escape.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy import special

PRECISION = 16
TOTAL = 1 << PRECISION
V_MIN = -128
V_MAX = 127

SIGMA_MIN = 0.04
SIGMA_MAX = 256.0
LEVELS_PER_OCTAVE = 64
NUM_LEVELS = int(math.ceil(math.log2(SIGMA_MAX / SIGMA_MIN) * LEVELS_PER_OCTAVE)) + 1
# grid tables stop at this many standard deviations; anything further escapes
ALPHABET_SIGMAS = 10.0


def gaussian_masses(sigma: float, v_min: int = V_MIN, v_max: int = V_MAX) -> np.ndarray:
    """Bucket probabilities in float64; the two tails are folded into the escapes."""
    if not SIGMA_MIN <= sigma <= SIGMA_MAX:
        raise ValueError(f"sigma {sigma} outside [{SIGMA_MIN}, {SIGMA_MAX}]")
    if v_min > 0 or v_max < 0:
        raise ValueError("alphabet must contain 0")
    v = np.abs(np.arange(v_min, v_max + 1, dtype=np.float64))
    masses = np.empty(v.size + 2)
    masses[1:-1] = special.ndtr((0.5 - v) / sigma) - special.ndtr((-0.5 - v) / sigma)
    masses[0] = special.ndtr((v_min - 0.5) / sigma)
    masses[-1] = special.ndtr(-(v_max + 0.5) / sigma)
    return masses


def quantize_masses(masses: np.ndarray) -> np.ndarray:
    """Integer frequencies, each >= 1, summing to exactly ``TOTAL``."""
    n = masses.size
    freq = np.rint(masses / masses.sum() * (TOTAL - n)).astype(np.int64) + 1
    # the rounding residue goes to the largest bucket, which can always absorb it
    freq[int(np.argmax(freq))] += TOTAL - int(freq.sum())
    if freq.min() < 1:
        raise ArithmeticError("frequency table underflow")
    return freq


def build_cdf(sigma: float, v_min: int = V_MIN, v_max: int = V_MAX) -> np.ndarray:
    """Cumulative table of length (v_max - v_min + 3) + 1: cdf[0] = 0, cdf[-1] = TOTAL."""
    freq = quantize_masses(gaussian_masses(float(sigma), v_min, v_max))
    cdf = np.zeros(freq.size + 1, dtype=np.int64)
    np.cumsum(freq, out=cdf[1:])
    return cdf


def alphabet_for(sigma: float) -> tuple[int, int]:
    w = int(math.ceil(ALPHABET_SIGMAS * sigma))
    if w >= -V_MIN:
        return V_MIN, V_MAX
    w = max(w, 2)
    return -w, w


def sigma_level(sigma) -> np.ndarray:
    """Index of the nearest grid scale (log-spaced, LEVELS_PER_OCTAVE per octave)."""
    s = np.clip(np.asarray(sigma, dtype=np.float64), SIGMA_MIN, SIGMA_MAX)
    idx = np.rint(np.log2(s / SIGMA_MIN) * LEVELS_PER_OCTAVE).astype(np.int64)
    return np.clip(idx, 0, NUM_LEVELS - 1)


def level_sigma(level) -> np.ndarray:
    return np.minimum(SIGMA_MIN * np.exp2(np.asarray(level, dtype=np.float64) / LEVELS_PER_OCTAVE),
                      SIGMA_MAX)


def golomb_order(sigma: float) -> int:
    """Exp-Golomb order for escaped magnitudes: about log2(sigma) - 2."""
    return max(0, int(round(math.log2(sigma))) - 2)


@dataclass(frozen=True)
class Table:
    cdf: list[int]
    v_min: int
    v_max: int
    order: int

    @classmethod
    def gaussian(cls, sigma: float) -> "Table":
        lo, hi = alphabet_for(sigma)
        return cls(build_cdf(sigma, lo, hi).tolist(), lo, hi, golomb_order(sigma))

    @property
    def high_escape(self) -> int:
        return self.v_max - self.v_min + 2


class TableBank:
    """Lazily built tables for every grid scale.

    ``padded`` holds all cumulative rows in one array (short rows repeat
    TOTAL) so the encoder can look up many symbols at once.
    """

    def __init__(self):
        self._lock = threading.Lock()
        width = V_MAX - V_MIN + 4
        self.padded = np.full((NUM_LEVELS, width), TOTAL, dtype=np.int64)
        self.v_min = np.zeros(NUM_LEVELS, dtype=np.int64)
        self.v_max = np.zeros(NUM_LEVELS, dtype=np.int64)
        self.built = np.zeros(NUM_LEVELS, dtype=bool)
        self.tables: list[Table | None] = [None] * NUM_LEVELS

    def ensure(self, levels: np.ndarray) -> None:
        levels = np.asarray(levels, dtype=np.int64)
        missing = np.unique(levels[~self.built[levels]])
        if missing.size == 0:
            return
        with self._lock:
            for lv in missing.tolist():
                if self.built[lv]:
                    continue
                t = Table.gaussian(float(level_sigma(lv)))
                self.padded[lv, :len(t.cdf)] = t.cdf
                self.v_min[lv], self.v_max[lv] = t.v_min, t.v_max
                self.tables[lv] = t
                self.built[lv] = True


_BANK = TableBank()


def table_bank() -> TableBank:
    return _BANK
