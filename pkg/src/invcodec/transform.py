"""Multi-scale invertible transform.

Each of the blocks squeezes its input with space-to-depth, runs a stack of
invertible units (actnorm, invertible 1x1 convolution, affine coupling) and
splits the result into a latent and a hidden part. The last block splits into
two latents. Every step has an exact algebraic inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CodecConfig
from .core import ops
from .core.nn import Buffer, Conv2d, Module
from .core.rng import Rng
from .core.tensor import Parameter, Tensor, current_tape

DET_FLOOR = 1e-6
STD_FLOOR = 1e-3


class SingularWeightError(ArithmeticError):
    pass


class UninitializedError(RuntimeError):
    pass


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _recording(*params: Parameter) -> bool:
    return current_tape() is not None and any(p.requires_grad for p in params)


class ActNorm(Module):
    """Per-channel affine map ``(t + beta) * exp(gamma)`` with data-dependent init."""

    def __init__(self, channels: int, dtype=np.float32):
        self.beta = Parameter("beta", np.zeros((1, channels, 1, 1)), dtype=dtype)
        self.gamma = Parameter("gamma", np.zeros((1, channels, 1, 1)), dtype=dtype)
        self.initialized = Buffer(np.zeros(1, dtype=np.uint8))

    @property
    def is_initialized(self) -> bool:
        return bool(self.initialized.data[0])

    def data_init(self, t: np.ndarray) -> None:
        mean, var = ops.channel_stats(t)
        std = np.maximum(np.sqrt(var), STD_FLOOR)
        self.beta.assign(-mean.reshape(self.beta.shape))
        self.gamma.assign(-np.log(std).reshape(self.gamma.shape))
        self.initialized.data = np.ones(1, dtype=np.uint8)

    def forward(self, t: Tensor, init: bool = False, training: bool = False) -> Tensor:
        if init and not self.is_initialized:
            self.data_init(t.data)
        if training and not self.is_initialized:
            raise UninitializedError("actnorm used for training before data-dependent init")
        return ops.mul(ops.add(t, self.beta), ops.exp(self.gamma))

    def reverse(self, t: Tensor) -> Tensor:
        return ops.sub(ops.mul(t, ops.exp(ops.scale(self.gamma, -1.0))), self.beta)


def random_rotation(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class Inv1x1(Module):
    """Per-pixel channel mixing ``u = t W`` with a cached inverse."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Parameter("weight", random_rotation(rng, channels), dtype=dtype)
        self._cache_version = -1
        self._inverse: np.ndarray | None = None
        self._det = 1.0

    @property
    def inverse_stale(self) -> bool:
        return self._cache_version != self.weight.version or self._inverse is None \
            or self._inverse.dtype != self.weight.data.dtype

    def check_det(self) -> float:
        w = self.weight.data.astype(np.float64)
        sign, logdet = np.linalg.slogdet(w)
        det = sign * np.exp(logdet)
        if not abs(det) > DET_FLOOR:
            sv = np.linalg.svd(w, compute_uv=False)
            raise SingularWeightError(
                f"{self.weight.name}: |det W| = {abs(det):.3g} <= {DET_FLOOR} "
                f"({w.shape[0]} channels, smallest singular values {sv[-3:]})")
        return float(det)

    def inverse(self) -> np.ndarray:
        if self.inverse_stale:
            self._det = self.check_det()
            w = self.weight.data
            self._inverse = np.linalg.inv(w.astype(np.float64)).astype(w.dtype)
            self._cache_version = self.weight.version
        return self._inverse

    def forward(self, t: Tensor) -> Tensor:
        if self.inverse_stale:
            self.inverse()
        return ops.channel_matmul(t, self.weight)

    def reverse(self, u: Tensor) -> Tensor:
        if _recording(self.weight):
            self.check_det()
            return ops.channel_matmul(u, ops.matinv(self.weight))
        return ops.channel_matmul(u, Tensor(self.inverse()))


class AffineCoupling(Module):
    """Transforms the second channel half with bias/scale computed from the first."""

    def __init__(self, channels: int, width: int, rng: Rng, dtype=np.float32):
        if channels % 2:
            raise ValueError(f"affine coupling needs an even channel count, got {channels}")
        half = channels // 2
        self.half = half
        self.conv1 = Conv2d(half, width, 3, rng.stream("conv1"), dtype=dtype)
        self.conv2 = Conv2d(width, width, 3, rng.stream("conv2"), dtype=dtype)
        self.skip = Conv2d(half, width, 1, rng.stream("skip"), dtype=dtype)
        self.head = Conv2d(width, channels, 1, zero_init=True, dtype=dtype)

    def bias_and_logscale(self, u1: Tensor) -> tuple[Tensor, Tensor]:
        feat = ops.relu(self.conv1(u1))
        feat = ops.relu(ops.add(self.conv2(feat), self.skip(u1)))
        out = self.head(feat)
        return ops.channels(out, 0, self.half), ops.channels(out, self.half, 2 * self.half)

    @staticmethod
    def log_factor(raw_scale: Tensor) -> Tensor:
        # 2*sigmoid(s) - 1 lies in (-1, 1), so the factor lies in (1/e, e)
        return ops.add(ops.scale(ops.sigmoid(raw_scale), 2.0), -1.0)

    def forward(self, u: Tensor) -> Tensor:
        if u.shape[1] != 2 * self.half:
            raise ValueError(f"expected {2 * self.half} channels, got {u.shape[1]}")
        u1 = ops.channels(u, 0, self.half)
        u2 = ops.channels(u, self.half, 2 * self.half)
        bias, raw = self.bias_and_logscale(u1)
        u2 = ops.mul(ops.add(u2, bias), ops.exp(self.log_factor(raw)))
        return ops.concat([u1, u2])

    def reverse(self, v: Tensor) -> Tensor:
        u1 = ops.channels(v, 0, self.half)
        v2 = ops.channels(v, self.half, 2 * self.half)
        bias, raw = self.bias_and_logscale(u1)
        u2 = ops.sub(ops.mul(v2, ops.exp(ops.scale(self.log_factor(raw), -1.0))), bias)
        return ops.concat([u1, u2])


class InvertibleUnit(Module):
    def __init__(self, channels: int, width: int, rng: Rng, dtype=np.float32):
        self.actnorm = ActNorm(channels, dtype)
        self.inv1x1 = Inv1x1(channels, rng.stream("inv1x1"), dtype)
        self.coupling = AffineCoupling(channels, width, rng.child("coupling"), dtype)

    def forward(self, t: Tensor, init: bool = False, training: bool = False) -> Tensor:
        t = self.actnorm.forward(t, init=init, training=training)
        return self.coupling.forward(self.inv1x1.forward(t))

    def reverse(self, t: Tensor) -> Tensor:
        t = self.coupling.reverse(t)
        return self.actnorm.reverse(self.inv1x1.reverse(t))


class InvertibleBlock(Module):
    """squeeze -> N invertible units -> split into (latent, hidden)."""

    def __init__(self, in_channels: int, latent: int, units: int, width: int, rng: Rng,
                 dtype=np.float32):
        self.channels = in_channels * 4
        self.latent = latent
        self.units = [InvertibleUnit(self.channels, width, rng.child(f"unit{u}"), dtype)
                      for u in range(units)]

    def forward(self, h: Tensor, init: bool = False, training: bool = False) -> tuple[Tensor, Tensor]:
        t = ops.space_to_depth(h)
        for unit in self.units:
            t = unit.forward(t, init=init, training=training)
        return ops.channels(t, 0, self.latent), ops.channels(t, self.latent, self.channels)

    def reverse(self, y: Tensor, h: Tensor) -> Tensor:
        t = ops.concat([y, h])
        if t.shape[1] != self.channels:
            raise ValueError(f"block expects {self.channels} channels, got {t.shape[1]}")
        for unit in reversed(self.units):
            t = unit.reverse(t)
        return ops.depth_to_space(t)


@dataclass
class MultiScaleLatents:
    """Latents y_1 .. y_{n+1} (index 0 is y_1) and the forward hidden states h_1 .. h_{n-1}."""

    ys: list[Tensor]
    hidden: list[Tensor]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [y.shape for y in self.ys]

    def num_elements(self) -> int:
        return int(sum(y.data[0].size for y in self.ys))


class InvertibleTransform(Module):
    def __init__(self, config: CodecConfig, rng: Rng):
        dtype = config.np_dtype
        self.config = config
        plan = config.channel_plan()
        self.blocks = []
        ch = 3
        for b, p in enumerate(plan):
            self.blocks.append(InvertibleBlock(ch, p["latent"], config.units_per_block,
                                               config.coupling_widths[b], rng.child(f"block{b}"), dtype))
            ch = p["hidden"]

    def units(self) -> list[InvertibleUnit]:
        return [u for blk in self.blocks for u in blk.units]

    def check_input(self, x: Tensor) -> None:
        m = self.config.multiple
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {x.shape}")
        if x.shape[2] % m or x.shape[3] % m:
            raise ValueError(f"spatial extents {x.shape[2]}x{x.shape[3]} must be multiples of {m}")

    def forward(self, x, init: bool = False, training: bool = False) -> MultiScaleLatents:
        x = _as_tensor(x, self.dtype)
        self.check_input(x)
        ys, hidden = [], []
        h = x
        for b, blk in enumerate(self.blocks):
            y, h = blk.forward(h, init=init, training=training)
            ys.append(y)
            if b < len(self.blocks) - 1:
                hidden.append(h)
        ys.append(h)
        return MultiScaleLatents(ys, hidden)

    def reverse_block(self, scale: int, y_hat: Tensor, h_hat: Tensor) -> Tensor:
        """Undo block ``scale`` (1-based): returns h_{scale-1}, or the image for scale 1."""
        return self.blocks[scale - 1].reverse(y_hat, h_hat)

    def check_latents(self, ys) -> None:
        if len(ys) != self.config.num_scales:
            raise ValueError(f"expected {self.config.num_scales} latents, got {len(ys)}")
        lat = self.config.latent_channels()
        for s, y in enumerate(ys):
            if y.shape[1] != lat[s]:
                raise ValueError(f"y_{s + 1} has {y.shape[1]} channels, config says {lat[s]}")
        base = ys[0].shape[2] * 2
        for s, y in enumerate(ys):
            f = 2 ** min(s + 1, self.config.num_blocks)
            if y.shape[2] * f != base or y.shape[3] * f != ys[0].shape[3] * 2:
                raise ValueError(f"y_{s + 1} spatial extent {y.shape[2:]} inconsistent with y_1")

    def partial_reverse(self, ys, scale: int) -> Tensor:
        """Hidden state h_scale rebuilt from the latents of the coarser scales.

        For the deepest block's sibling (scale == num_blocks) this is simply the
        last latent.
        """
        n = self.config.num_blocks
        if not 1 <= scale <= n:
            raise ValueError(f"scale must be in 1..{n}")
        need = range(scale + 1, n + 2)
        if any(ys[s - 1] is None for s in need):
            raise ValueError(f"partial reverse to h_{scale} needs y_{scale + 1}..y_{n + 1}")
        dt = self.dtype
        h = _as_tensor(ys[n], dt)
        for s in range(n, scale, -1):
            h = self.reverse_block(s, _as_tensor(ys[s - 1], dt), h)
        return h

    def reverse(self, ys) -> Tensor:
        if isinstance(ys, MultiScaleLatents):
            ys = ys.ys
        dt = self.dtype
        ys = [_as_tensor(y, dt) for y in ys]
        self.check_latents(ys)
        h = self.partial_reverse(ys, 1)
        return self.reverse_block(1, ys[0], h)
