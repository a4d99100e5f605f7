"""Encoding and decoding.

Both directions run the same scale walker, coarsest scale first. The walker
asks a *quantizer* for the integer gained residual of each checkerboard pass;
the encoder's quantizer computes it from the true latents, the decoder's
reads it from the bitstream, and the training quantizer builds a
differentiable surrogate. Sharing the walker keeps the encoder's mirrored
reconstruction identical to the decoder's.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coder import Container, ContainerError, DecodeError, RangeDecoder, table_bank
from .coder.cdf import sigma_level
from .coder.container import q_to_fixed, symbols_crc
from .coder.rangecoder import decode_symbols, encode_symbols
from .core import ops
from .core.tensor import Tensor
from .entropy import anchor_mask, discretized_gaussian_pmf, gained_sigma
from .model import CodecModel


class ConfigMismatchError(ValueError):
    pass


class VerificationError(RuntimeError):
    """Decoded symbols disagree with the checksum stored in the stream."""


# ---------------------------------------------------------------- images

def to_unit(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) uint8 -> (1, 3, H, W) in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    return (image.astype(dtype) / 255.0).transpose(2, 0, 1)[None]


def from_unit(x: np.ndarray) -> np.ndarray:
    """(1, 3, H, W) float -> (H, W, 3) uint8, clamped and rounded half away from zero."""
    v = np.clip(np.asarray(x, dtype=np.float64)[0] * 255.0, 0.0, 255.0)
    return ops.round_half_away(v).astype(np.uint8).transpose(1, 2, 0)


def padded_size(height: int, width: int, multiple: int) -> tuple[int, int]:
    return -(-height // multiple) * multiple, -(-width // multiple) * multiple


def pad_to_multiple(x: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Replicate the last row/column of an (N, C, H, W) array up to a multiple."""
    h, w = x.shape[-2:]
    ph, pw = padded_size(h, w, multiple)
    if (ph, pw) == (h, w):
        return x, (h, w)
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph - h), (0, pw - w)]
    return np.pad(x, pad, mode="edge"), (h, w)


def unpad(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return x[..., :size[0], :size[1]]


# ---------------------------------------------------------------- walker

@dataclass
class ScaleTrace:
    """What the walker saw at one scale (batch element 0 for the codec paths)."""

    sigma: list[np.ndarray] = field(default_factory=list)   # gained scale per pass
    mu: list[np.ndarray] = field(default_factory=list)      # predicted mean per pass
    y_quantized: Tensor | None = None        # dequantized latent before correction
    y_hat: Tensor | None = None              # after latent residual prediction


@dataclass
class WalkResult:
    x_tilde: Tensor                          # reversed image before post-processing
    scales: dict[int, ScaleTrace]


class Quantizer:
    """Supplies integer gained residuals for one checkerboard pass.

    ``positions`` is a boolean (H, W) mask of the positions coded in the pass;
    the returned tensor only needs to be meaningful there.
    """

    def code(self, scale: int, positions: np.ndarray, mu: Tensor, gain: Tensor,
             sigma: Tensor) -> Tensor:
        raise NotImplementedError


def pass_order(grid: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Values of one batch element at ``positions``, channel-major then raster."""
    return grid[0][:, positions].ravel()


def walk(model: CodecModel, q, quantizer: Quantizer, batch: int, height: int, width: int,
         use_lrp: bool = True) -> WalkResult:
    """Reconstruct every scale, coarsest first, for images of the given padded size."""
    cfg = model.config
    ent = model.entropy
    tr = model.transform
    dt = model.dtype
    n_sc = cfg.num_scales
    shapes = cfg.latent_shapes(height, width)
    scales: dict[int, ScaleTrace] = {}
    h = None
    for s in range(n_sc, 0, -1):
        c, hs, ws = shapes[s - 1]
        trace = scales.setdefault(s, ScaleTrace())
        ch = ent.channel_features(s, h, (batch, c, hs, ws))
        gain, inv_gain = ent.gains(s, q)
        mu_a, sig_a = ent.entropy_params(s, ch, None)
        sp_a = gained_sigma(sig_a, gain)
        anchors = anchor_mask(hs, ws)
        if ent.has_spatial:
            am = Tensor(anchors.astype(dt)[None, None])
            r_a = quantizer.code(s, anchors, mu_a, gain, sp_a)
            yq_a = ops.mul(ops.add(ops.mul(r_a, inv_gain), mu_a), am)
            mu_n, sig_n = ent.entropy_params(s, ch, ent.spatial_features(s, yq_a))
            sp_n = gained_sigma(sig_n, gain)
            r_n = quantizer.code(s, ~anchors, mu_n, gain, sp_n)
            nm = Tensor((~anchors).astype(dt)[None, None])
            yq = ops.add(yq_a, ops.mul(ops.add(ops.mul(r_n, inv_gain), mu_n), nm))
            trace.sigma = [sp_a.data, sp_n.data]
            trace.mu = [mu_a.data, mu_n.data]
        else:
            everywhere = np.ones((hs, ws), dtype=bool)
            r = quantizer.code(s, everywhere, mu_a, gain, sp_a)
            yq = ops.add(ops.mul(r, inv_gain), mu_a)
            trace.sigma = [sp_a.data]
            trace.mu = [mu_a.data]
        y_hat = ent.correct(s, h, yq, inv_gain) if use_lrp else yq
        trace.y_quantized, trace.y_hat = yq, y_hat
        h = y_hat if s == n_sc else tr.reverse_block(s, y_hat, h)
    return WalkResult(h, scales)


class EncoderQuantizer(Quantizer):
    """Rounds the true gained residual and records the symbol stream per scale."""

    def __init__(self, ys: list[Tensor]):
        self.ys = ys
        self.symbols: dict[int, list[np.ndarray]] = {}
        self.levels: dict[int, list[np.ndarray]] = {}
        self.estimate: dict[int, float] = {}

    def code(self, scale, positions, mu, gain, sigma):
        y = self.ys[scale - 1].data
        r = ops.round_half_away(gain.data * (y - mu.data))
        sym = pass_order(r, positions).astype(np.int64)
        sig = pass_order(sigma.data, positions)
        self.symbols.setdefault(scale, []).append(sym)
        self.levels.setdefault(scale, []).append(sigma_level(sig))
        p = discretized_gaussian_pmf(sym, sig)
        self.estimate[scale] = self.estimate.get(scale, 0.0) + float(-np.log2(np.maximum(p, 1e-300)).sum())
        return Tensor(r.astype(y.dtype))


class StreamQuantizer(Quantizer):
    """Reads symbols from per-scale range decoders."""

    def __init__(self, payloads: dict[int, bytes], dtype):
        self.decoders = {s: RangeDecoder(p) for s, p in payloads.items()}
        self.dtype = dtype
        self.symbols: dict[int, list[np.ndarray]] = {}

    def code(self, scale, positions, mu, gain, sigma):
        levels = sigma_level(pass_order(sigma.data, positions))
        try:
            sym = decode_symbols(self.decoders[scale], levels, table_bank())
        except DecodeError as exc:
            raise DecodeError(f"scale {scale}: {exc}") from exc
        self.symbols.setdefault(scale, []).append(sym)
        grid = np.zeros(mu.shape, dtype=self.dtype)
        grid[0][:, positions] = sym.reshape(mu.shape[1], -1)
        return Tensor(grid)


class ReplayQuantizer(Quantizer):
    """Feeds back previously decoded per-pass symbol sequences."""

    def __init__(self, symbols: dict[int, list[np.ndarray]], dtype):
        self.symbols = symbols
        self.dtype = dtype
        self._next: dict[int, int] = {}

    def code(self, scale, positions, mu, gain, sigma):
        k = self._next.get(scale, 0)
        self._next[scale] = k + 1
        sym = self.symbols[scale][k]
        grid = np.zeros(mu.shape, dtype=self.dtype)
        grid[0][:, positions] = sym.reshape(mu.shape[1], -1)
        return Tensor(grid)


# ---------------------------------------------------------------- codec

@dataclass
class EncodeResult:
    stream: bytes
    bpp: float
    q: float
    scale_bits: dict[int, int]               # actual payload bits per scale
    estimated_bits: dict[int, float]         # ideal code length per scale
    header_bits: int
    symbols: dict[int, list[np.ndarray]]
    y_hat: dict[int, np.ndarray]             # encoder-side mirrored latents
    x_hat: np.ndarray | None = None          # reconstruction as the decoder will produce it


@dataclass
class DecodeResult:
    image: np.ndarray
    q: float
    symbols: dict[int, list[np.ndarray]]
    y_hat: dict[int, np.ndarray]


def _prepare(model: CodecModel, image: np.ndarray):
    x = to_unit(image, model.dtype)
    xp, size = pad_to_multiple(x, model.config.multiple)
    return xp, size


def check_quality(model: CodecModel, q) -> float:
    q = float(q)
    if not np.isfinite(q) or not 0.0 <= q <= model.config.q_max:
        raise ValueError(f"quality {q} outside [0, {model.config.q_max}]")
    return q


def finish_image(model: CodecModel, x_tilde: Tensor, size: tuple[int, int], use_post: bool) -> np.ndarray:
    x = model.post(x_tilde) if (use_post and model.config.use_postprocess) else x_tilde
    return from_unit(unpad(x.data, size))


def encode(model: CodecModel, image: np.ndarray, q: float, reconstruct: bool = False) -> EncodeResult:
    q = check_quality(model, q)
    q_fixed = q_to_fixed(q)
    qc = q_fixed / 65536.0
    xp, size = _prepare(model, image)
    if max(xp.shape[2:]) > 0xFFFF:
        raise ValueError(f"image {size} too large for the container")
    lat = model.transform.forward(xp)
    quant = EncoderQuantizer(lat.ys)
    res = walk(model, qc, quant, 1, xp.shape[2], xp.shape[3], use_lrp=model.config.use_lrp)
    order = range(model.config.num_scales, 0, -1)
    payloads, crcs = [], []
    bank = table_bank()
    for s in order:
        sym = np.concatenate(quant.symbols[s])
        payloads.append(encode_symbols(sym, np.concatenate(quant.levels[s]), bank))
        crcs.append(symbols_crc(sym))
    cont = Container(size[1], size[0], xp.shape[3], xp.shape[2], q_fixed, model.config_hash, payloads, crcs)
    stream = cont.to_bytes()
    x_hat = finish_image(model, res.x_tilde, size, True) if reconstruct else None
    return EncodeResult(
        stream=stream,
        bpp=8.0 * len(stream) / (size[0] * size[1]),
        q=qc,
        scale_bits={s: 8 * len(p) for s, p in zip(order, payloads)},
        estimated_bits=dict(quant.estimate),
        header_bits=8 * cont.header_size(),
        symbols=quant.symbols,
        y_hat={s: t.y_hat.data for s, t in res.scales.items()},
        x_hat=x_hat,
    )


def parse(model: CodecModel, stream: bytes) -> Container:
    cont = Container.from_bytes(stream)
    if cont.config_hash != model.config_hash:
        raise ConfigMismatchError(
            f"stream was made by model config {cont.config_hash:016x}, this model is {model.config_hash:016x}")
    if len(cont.payloads) != model.config.num_scales:
        raise ContainerError(f"stream has {len(cont.payloads)} scales, model has {model.config.num_scales}")
    m = model.config.multiple
    if cont.pad_w % m or cont.pad_h % m or cont.pad_w < cont.orig_w or cont.pad_h < cont.orig_h \
            or cont.pad_w - cont.orig_w >= m or cont.pad_h - cont.orig_h >= m:
        raise ContainerError("inconsistent image dimensions in header")
    check_quality(model, cont.q)
    return cont


def decode(model: CodecModel, stream: bytes, use_lrp: bool = True, use_post: bool = True) -> DecodeResult:
    cont = parse(model, stream)
    order = list(range(model.config.num_scales, 0, -1))
    quant = StreamQuantizer(dict(zip(order, cont.payloads)), model.dtype)
    res = walk(model, cont.q, quant, 1, cont.pad_h, cont.pad_w,
               use_lrp=use_lrp and model.config.use_lrp)
    for s, crc in zip(order, cont.crcs):
        quant.decoders[s].check_consumed()
        if symbols_crc(np.concatenate(quant.symbols[s])) != crc:
            raise VerificationError(f"scale {s}: symbol checksum mismatch")
    image = finish_image(model, res.x_tilde, (cont.orig_h, cont.orig_w), use_post)
    return DecodeResult(image, cont.q, quant.symbols, {s: t.y_hat.data for s, t in res.scales.items()})


def reconstruct(model: CodecModel, symbols: dict[int, list[np.ndarray]], q: float,
                padded: tuple[int, int], size: tuple[int, int], use_lrp: bool = True,
                use_post: bool = True) -> np.ndarray:
    """Decode from already-known symbols, optionally with LRP or post-processing disabled."""
    quant = ReplayQuantizer(symbols, model.dtype)
    res = walk(model, q, quant, 1, padded[0], padded[1], use_lrp=use_lrp and model.config.use_lrp)
    return finish_image(model, res.x_tilde, size, use_post)
