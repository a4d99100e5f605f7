"""Residual U-Net applied to the reconstructed image."""

from __future__ import annotations

import numpy as np

from .core import ops
from .core.nn import Conv2d, Module
from .core.rng import Rng
from .core.tensor import Tensor


class _Pair(Module):
    """Two 3x3 convolutions with ReLU after each."""

    def __init__(self, in_ch: int, out_ch: int, rng: Rng, dtype, stride: int = 1):
        self.a = Conv2d(in_ch, out_ch, 3, rng.stream("a"), stride=stride, dtype=dtype)
        self.b = Conv2d(out_ch, out_ch, 3, rng.stream("b"), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.b(ops.relu(self.a(x))))


class PostProcessNet(Module):
    """Two stride-2 downsampling stages, two upsampling stages with skips.

    The output convolution starts at zero, so a fresh network is the identity.
    Parameter count is 459 w^2 + 74 w + 3 for base width w.
    """

    def __init__(self, width: int, rng: Rng, dtype=np.float32):
        w = width
        self.width = w
        self.enc = _Pair(3, w, rng.child("enc"), dtype)
        self.down1 = _Pair(w, 2 * w, rng.child("down1"), dtype, stride=2)
        self.down2 = _Pair(2 * w, 4 * w, rng.child("down2"), dtype, stride=2)
        self.up1 = Conv2d(4 * w, 2 * w, 3, rng.stream("up1"), dtype=dtype)
        self.fuse1 = Conv2d(4 * w, 2 * w, 3, rng.stream("fuse1"), dtype=dtype)
        self.up2 = Conv2d(2 * w, w, 3, rng.stream("up2"), dtype=dtype)
        self.fuse2 = Conv2d(2 * w, w, 3, rng.stream("fuse2"), dtype=dtype)
        self.out = Conv2d(w, 3, 3, zero_init=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"spatial extents must be multiples of 4, got {x.shape[2:]}")
        e = self.enc(x)
        d1 = self.down1(e)
        d2 = self.down2(d1)
        u1 = ops.relu(self.up1(ops.upsample2x(d2)))
        u1 = ops.relu(self.fuse1(ops.concat([u1, d1])))
        u2 = ops.relu(self.up2(ops.upsample2x(u1)))
        u2 = ops.relu(self.fuse2(ops.concat([u2, e])))
        return ops.add(x, self.out(u2))
