"""Rate-distortion training at desk scale."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .core import ops
from .core.optim import adam_step
from .core.rng import Rng
from .core.tensor import NonFiniteError, Tape, Tensor
from .model import CodecModel
from .pipeline import Quantizer, walk
from .transform import SingularWeightError

log = logging.getLogger(__name__)

# distortion is MSE on [0, 1] pixels scaled to 8-bit units
DISTORTION_SCALE = 255.0 ** 2
DEFAULT_LR = 1e-3


class TrainingDiverged(ArithmeticError):
    """A step produced a non-finite value or a singular weight; weights were restored."""


class TrainingQuantizer(Quantizer):
    """Differentiable stand-in for rounding.

    The rate sees the gained residual plus uniform noise. The reconstruction
    sees the straight-through rounded residual (``mixed``) or the same noisy
    residual (``noise``).
    """

    def __init__(self, ys: list[Tensor], rng: np.random.Generator, mode: str = "mixed"):
        self.ys = ys
        self.rng = rng
        self.mode = mode
        self.bits: Tensor | None = None        # (B,) total bits per image

    def code(self, scale, positions, mu, gain, sigma):
        y = self.ys[scale - 1]
        r = ops.mul(ops.sub(y, mu), gain)
        noise = self.rng.uniform(-0.5, 0.5, size=r.shape).astype(r.data.dtype)
        noisy = ops.add(r, noise)
        mask = Tensor(positions.astype(r.data.dtype)[None, None])
        bits = ops.mul(ops.gaussian_bits(noisy, sigma), mask)
        per_image = ops.sum(bits, axis=(1, 2, 3))
        self.bits = per_image if self.bits is None else ops.add(self.bits, per_image)
        return ops.ste_round(r) if self.mode == "mixed" else noisy


@dataclass
class StepStats:
    loss: float
    bpp: float
    mse: float
    lam: float
    psnr: float


def _snapshot(model: CodecModel) -> list[tuple]:
    return [(p, p.data.copy(), p.version, None if p.adam_m is None else (p.adam_m.copy(), p.adam_v.copy()),
             p.adam_step) for p in model.parameters()]


def _restore(snap) -> None:
    for p, data, version, moments, step in snap:
        p.data = data
        p.version = version + 1
        p.grad = None
        if moments is None:
            p.adam_m = p.adam_v = None
        else:
            p.adam_m, p.adam_v = moments
        p.adam_step = step


def loss_terms(model: CodecModel, x: np.ndarray, q: np.ndarray, rng: np.random.Generator,
               init: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Per-image (bpp, mse) tensors and the scalar loss. Call inside a Tape to train."""
    cfg = model.config
    b, _, hgt, wid = x.shape
    xt = Tensor(x.astype(model.dtype))
    lat = model.transform.forward(xt, init=init, training=True)
    quant = TrainingQuantizer(lat.ys, rng, cfg.quantizer)
    res = walk(model, q, quant, b, hgt, wid, use_lrp=cfg.use_lrp)
    x_hat = model.post(res.x_tilde) if cfg.use_postprocess else res.x_tilde
    mse = ops.mean(ops.square(ops.sub(x_hat, xt)), axis=(1, 2, 3))
    bpp = ops.scale(quant.bits, 1.0 / (hgt * wid))
    lam = Tensor((model.lam(q) * DISTORTION_SCALE).astype(model.dtype))
    loss = ops.mean(ops.add(bpp, ops.mul(mse, lam)))
    return loss, bpp, mse


def train_step(model: CodecModel, x: np.ndarray, rng: np.random.Generator, lr: float,
               q: np.ndarray | None = None) -> StepStats:
    """One Adam step on a batch of (B, 3, H, W) patches in [0, 1].

    ``q`` defaults to one integer quality per image, drawn uniformly.
    The first call on a fresh model performs the data-dependent actnorm init.
    """
    cfg = model.config
    if q is None:
        q = rng.integers(0, cfg.q_max + 1, size=x.shape[0]).astype(np.float64)
    q = np.asarray(q, dtype=np.float64)
    snap = _snapshot(model)
    init = any(not a.is_initialized for a in _actnorms(model))
    try:
        with Tape() as tape:
            loss, bpp, mse = loss_terms(model, x, q, rng, init=init)
            tape.backward(loss)
        for p in model.parameters():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"gradient of {p.name} is not finite")
        adam_step(model.parameters(), lr)
        for unit in model.transform.units():
            unit.inv1x1.check_det()
    except (NonFiniteError, SingularWeightError) as exc:
        _restore(snap)
        raise TrainingDiverged(f"step aborted, weights restored: {exc}") from exc
    m = float(np.mean(mse.data))
    return StepStats(loss=float(loss.data), bpp=float(np.mean(bpp.data)), mse=m,
                     lam=float(np.mean(model.lam(q))), psnr=psnr_from_mse(m))


def _actnorms(model: CodecModel):
    return [u.actnorm for u in model.transform.units()]


def psnr_from_mse(mse: float, peak: float = 1.0, cap: float = 99.0) -> float:
    if mse <= 0:
        return cap
    return float(min(cap, 10.0 * np.log10(peak * peak / mse)))


# ---------------------------------------------------------------- data

def synthetic_patches(n: int, size: int, seed: int) -> np.ndarray:
    """(n, 3, size, size) patches in [0, 1]: colour gradients, sinusoids and noise."""
    rng = Rng(seed).stream("synthetic")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    out = np.empty((n, 3, size, size))
    for i in range(n):
        base = rng.uniform(0.1, 0.9, size=3)[:, None, None]
        grad = rng.uniform(-0.4, 0.4, size=(3, 2))
        img = base + grad[:, :1, None] * (xx - 0.5) + grad[:, 1:, None] * (yy - 0.5)
        for _ in range(rng.integers(1, 4)):
            freq = rng.uniform(1.0, 8.0)
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.05, 0.25) * rng.uniform(0.3, 1.0, size=3)[:, None, None]
            wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
            img = img + amp * wave
        img = img + rng.normal(0.0, rng.uniform(0.0, 0.03), size=img.shape)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def quantize_patches(x: np.ndarray) -> np.ndarray:
    """Snap [0, 1] patches to the 8-bit grid, as a real image would be."""
    return np.round(x * 255.0) / 255.0


def synthetic_images(n: int, size: int, seed: int) -> list[np.ndarray]:
    """The synthetic generator as (H, W, 3) uint8 images."""
    x = synthetic_patches(n, size, seed)
    return [np.round(p * 255.0).astype(np.uint8).transpose(1, 2, 0) for p in x]


def load_patch_folder(folder: str | Path, size: int, seed: int, per_image: int = 4) -> np.ndarray:
    """Random crops from the P6 images in a folder."""
    from .imageio import read_ppm
    rng = Rng(seed).stream("crops")
    crops = []
    for path in sorted(Path(folder).iterdir()):
        if path.suffix.lower() not in (".ppm", ".pnm"):
            continue
        img = read_ppm(path)
        h, w = img.shape[:2]
        if h < size or w < size:
            continue
        for _ in range(per_image):
            r = rng.integers(0, h - size + 1)
            c = rng.integers(0, w - size + 1)
            crops.append(img[r:r + size, c:c + size].transpose(2, 0, 1) / 255.0)
    if not crops:
        raise FileNotFoundError(f"no usable .ppm images of at least {size}x{size} in {folder}")
    return np.stack(crops)


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    losses: list[float]
    stats: list[StepStats]
    steps: int


def train(model: CodecModel, data: np.ndarray, steps: int, seed: int, lr: float = DEFAULT_LR,
          batch_size: int | None = None, start_step: int = 0, log_every: int = 100,
          callback: Callable[[int, StepStats], None] | None = None,
          checkpoint: Callable[[int], None] | None = None, checkpoint_every: int = 0) -> TrainResult:
    """Adam on ``data`` (N, 3, H, W); the whole set forms one batch unless ``batch_size`` is given.

    Randomness at step k depends only on (seed, k), so resuming from a
    checkpoint taken at step k continues the same trajectory.
    """
    root = Rng(seed)
    n = data.shape[0]
    bs = n if batch_size is None else min(batch_size, n)
    losses, stats = [], []
    for k in range(start_step, start_step + steps):
        rng = root.stream(f"step{k}")
        if bs < n:
            batch = data[np.sort(rng.choice(n, size=bs, replace=False))]
        else:
            batch = data
        st = train_step(model, batch, rng, lr)
        losses.append(st.loss)
        stats.append(st)
        if callback is not None:
            callback(k, st)
        if log_every and (k + 1) % log_every == 0:
            log.info("step %d loss %.4f bpp %.4f mse %.3g lambda %.4g", k + 1, st.loss, st.bpp, st.mse, st.lam)
        if checkpoint is not None and checkpoint_every and (k + 1) % checkpoint_every == 0:
            checkpoint(k + 1)
    return TrainResult(losses, stats, start_step + steps)


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.array([])
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window
