"""Probes for receptive fields and context causality."""

from __future__ import annotations

import numpy as np

from .core import ops
from .core.rng import Rng
from .core.tensor import Tape, Tensor
from .entropy import MASK_B, SpatialContext, anchor_mask


def unit_stack(variant: str = "stack", kernel: int = 5) -> SpatialContext:
    """Single-channel spatial context with every unmasked weight 1 and zero bias."""
    net = SpatialContext(1, 1, 1, variant, kernel, Rng(0), dtype=np.float64)
    for layer in net.layers:
        layer.weight.assign(np.ones(layer.weight.shape))
        layer.bias.assign(np.zeros(layer.bias.shape))
    return net


def receptive_field_map(size: int = 15, net: SpatialContext | None = None) -> np.ndarray:
    """Gradient magnitude of the centre output with respect to every input position.

    With unit weights, zero bias and an all-ones input every ReLU is active,
    so the map counts the masked paths from each input tap to the centre.
    The centre is a non-anchor position whenever ``size // 2`` is odd.
    """
    net = net or unit_stack()
    x = Tensor(np.ones((1, 1, size, size)), requires_grad=True)
    c = size // 2
    with Tape() as tape:
        out = net(x)
        sel = np.zeros(out.shape)
        sel[0, 0, c, c] = 1.0
        tape.backward(ops.sum(ops.mul(out, Tensor(sel))))
    return np.abs(x.grad[0, 0])


def causality_violations(net: SpatialContext, channels: int, size: int = 12,
                         trials: int = 3, seed: int = 0) -> int:
    """Non-anchor outputs that change when only non-anchor inputs change.

    A causal spatial context yields zero.
    """
    rng = np.random.default_rng(seed)
    dt = net.layers[0].weight.data.dtype
    non_anchor = ~anchor_mask(size, size)
    bad = 0
    for _ in range(trials):
        x = rng.standard_normal((1, channels, size, size)).astype(dt)
        base = net(Tensor(x)).data
        x2 = x.copy()
        x2[:, :, non_anchor] = rng.standard_normal(x2[:, :, non_anchor].shape) * 10
        other = net(Tensor(x2)).data
        bad += int(np.count_nonzero(base[:, :, non_anchor] != other[:, :, non_anchor]))
    return bad


def corrupt_masks(net: SpatialContext) -> None:
    """Mutation hook for negative controls: open every mask-B edge tap."""
    for layer in net.layers:
        if layer.mask is not None and np.array_equal(layer.mask, MASK_B):
            layer.mask = np.ones_like(MASK_B)


def expected_window(size: int = 15, radius: int = 4) -> np.ndarray:
    """Boolean map of the (2 radius + 1)^2 window around the centre."""
    c = size // 2
    yy, xx = np.mgrid[0:size, 0:size]
    return (np.abs(yy - c) <= radius) & (np.abs(xx - c) <= radius)
