"""Rate-distortion evaluation and the repeated re-encoding harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from . import pipeline
from .imageio import read_ppm
from .model import CodecModel

PSNR_CAP = 99.0
EVAL_COLUMNS = ("file", "q", "bpp", "psnr", "error")
REENCODE_COLUMNS = ("iteration", "bpp", "psnr")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB between two 8-bit images; identical images report PSNR_CAP."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(255.0 ** 2 / mse)))


@dataclass
class EvalRow:
    file: str
    q: float
    bpp: float | None
    psnr: float | None
    error: str = ""

    def as_list(self) -> list:
        fmt = (lambda v: "" if v is None else f"{v:.6f}")
        return [self.file, f"{self.q:g}", fmt(self.bpp), fmt(self.psnr), self.error]


def evaluate_image(model: CodecModel, image: np.ndarray, q: float) -> tuple[float, float]:
    """(bpp, PSNR) from a real encode and decode."""
    enc = pipeline.encode(model, image, q)
    dec = pipeline.decode(model, enc.stream)
    return enc.bpp, psnr(dec.image, image)


def evaluate(model: CodecModel, folder: str | Path, qs: Iterable[float]) -> list[EvalRow]:
    """Every .ppm in ``folder`` at every quality; a failing file yields error rows."""
    qs = list(qs)
    rows = []
    files = sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in (".ppm", ".pnm"))
    for path in files:
        try:
            image = read_ppm(path)
        except (OSError, ValueError) as exc:
            rows.extend(EvalRow(path.name, q, None, None, f"unreadable: {exc}") for q in qs)
            continue
        for q in qs:
            try:
                bpp, p = evaluate_image(model, image, q)
                rows.append(EvalRow(path.name, q, bpp, p))
            except (ValueError, RuntimeError) as exc:
                rows.append(EvalRow(path.name, q, None, None, str(exc)))
    return rows


def write_csv(out: TextIO, columns, rows) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(row)


@dataclass
class ReencodeStep:
    iteration: int
    bpp: float
    psnr: float


def reencode_loop(model: CodecModel, image: np.ndarray, q: float, n: int) -> list[ReencodeStep]:
    """Decode and re-encode ``n`` times at fixed quality; PSNR is against the original."""
    if n < 1:
        raise ValueError("need at least one iteration")
    out = []
    current = image
    for i in range(1, n + 1):
        enc = pipeline.encode(model, current, q)
        current = pipeline.decode(model, enc.stream).image
        out.append(ReencodeStep(i, enc.bpp, psnr(current, image)))
    return out
