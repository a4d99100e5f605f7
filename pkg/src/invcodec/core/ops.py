"""Differentiable array operations.

Every op computes its result eagerly with numpy and, when a tape is active and
an input requires a gradient, records a vector-Jacobian product closure.
Convolutions run one batch element at a time so a sample's result never
depends on what else shares its batch.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .tensor import Tensor, check_finite, current_tape

_LN2 = float(np.log(2.0))


def _lift(x, like: np.dtype | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like:
        arr = arr.astype(like)
    return Tensor(arr)


def _dtype_of(*xs) -> np.dtype | None:
    for x in xs:
        if isinstance(x, Tensor):
            return x.data.dtype
    return None


def _emit(data: np.ndarray, inputs, vjp, name: str) -> Tensor:
    check_finite(data, name)
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    a, b = _lift(a, dt), _lift(b, dt)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    a, b = _lift(a, dt), _lift(b, dt)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    a, b = _lift(a, dt), _lift(b, dt)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _emit(ad * bd, (a, b), vjp, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit(np.where(pos, a.data, 0).astype(a.data.dtype), (a,),
                 lambda g: (g * pos,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return _emit(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero where clipping was active."""
    out = np.clip(a.data, lo, hi)
    inside = out == a.data
    return _emit(out, (a,), lambda g: (g * inside,), "clamp")


def ste_round(a: Tensor) -> Tensor:
    """Round half away from zero, with an identity gradient."""
    return _emit(round_half_away(a.data), (a,), lambda g: (g,), "ste_round")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def channel_stats(x: np.ndarray | Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance over batch and space."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.size == 0:
        raise ValueError("channel_stats of an empty tensor")
    m = data.mean(axis=(0, 2, 3))
    centred = data - m[None, :, None, None]
    v = (centred * centred).mean(axis=(0, 2, 3))
    return m, v


# ---------------------------------------------------------------- layout

def concat(xs, axis: int = 1) -> Tensor:
    xs = [_lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))
    return _emit(np.concatenate([x.data for x in xs], axis=axis), xs, vjp, "concat")


def channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Channel slice ``a[:, start:stop]``."""
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)
    return _emit(a.data[:, start:stop].copy(), (a,), vjp, "channels")


def space_to_depth_array(x: np.ndarray, factor: int = 2) -> np.ndarray:
    b, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial extents {h}x{w} not divisible by {factor}")
    y = x.reshape(b, c, h // factor, factor, w // factor, factor)
    return np.ascontiguousarray(y.transpose(0, 1, 3, 5, 2, 4)).reshape(
        b, c * factor * factor, h // factor, w // factor)


def depth_to_space_array(x: np.ndarray, factor: int = 2) -> np.ndarray:
    b, c, h, w = x.shape
    if c % (factor * factor):
        raise ValueError(f"channel count {c} not divisible by {factor * factor}")
    cc = c // (factor * factor)
    y = x.reshape(b, cc, factor, factor, h, w)
    return np.ascontiguousarray(y.transpose(0, 1, 4, 2, 5, 3)).reshape(
        b, cc, h * factor, w * factor)


def space_to_depth(a: Tensor, factor: int = 2) -> Tensor:
    return _emit(space_to_depth_array(a.data, factor), (a,),
                 lambda g: (depth_to_space_array(g, factor),), "space_to_depth")


def depth_to_space(a: Tensor, factor: int = 2) -> Tensor:
    return _emit(depth_to_space_array(a.data, factor), (a,),
                 lambda g: (space_to_depth_array(g, factor),), "depth_to_space")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        b, c, h, w = g.shape
        return (g.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)
    return _emit(out, (a,), vjp, "upsample2x")


# ---------------------------------------------------------------- linear maps

def _check_mask(mask, k: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != (k, k):
        raise ValueError(f"mask shape {mask.shape} does not match kernel {k}x{k}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask entries must be 0 or 1")
    return mask


def _columns(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (C, Hp, Wp) -> (C*k*k, Ho*Wo) im2col matrix
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * k * k, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0, mask=None) -> Tensor:
    """Cross-correlation with zero padding and an optional binary kernel mask."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    o, ci, k, k2 = weight.shape
    b, c, h, w = x.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if c != ci:
        raise ValueError(f"input has {c} channels, weight expects {ci}")
    wd = weight.data
    if mask is not None:
        mask = _check_mask(mask, k).astype(wd.dtype)
        wd = wd * mask
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    xd = x.data
    wmat = wd.reshape(o, ci * k * k)
    out = np.empty((b, o, ho, wo), dtype=np.result_type(xd, wd))
    pointwise = k == 1 and stride == 1 and pad == 0
    tape = current_tape()
    keep = tape is not None and weight.requires_grad
    cols_cache: list[np.ndarray] = []

    if pointwise:
        for n in range(b):
            out[n] = (wmat @ xd[n].reshape(c, h * w)).reshape(o, ho, wo)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        for n in range(b):
            cols = _columns(xp[n], k, stride, ho, wo)
            out[n] = (wmat @ cols).reshape(o, ho, wo)
            if keep:
                cols_cache.append(cols)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def vjp(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        gmat = g.reshape(b, o, ho * wo)
        if pointwise:
            if weight.requires_grad:
                gw = np.zeros((o, c), dtype=g.dtype)
                for n in range(b):
                    gw += gmat[n] @ xd[n].reshape(c, h * w).T
                gw = gw.reshape(o, c, 1, 1)
            if x.requires_grad:
                gx = np.empty_like(xd)
                for n in range(b):
                    gx[n] = (wmat.T @ gmat[n]).reshape(c, h, w)
        else:
            if weight.requires_grad:
                gw = np.zeros((o, c * k * k), dtype=g.dtype)
                for n in range(b):
                    gw += gmat[n] @ cols_cache[n].T
                gw = gw.reshape(o, c, k, k)
            if x.requires_grad:
                hp, wp = h + 2 * pad, w + 2 * pad
                gxp = np.zeros((b, c, hp, wp), dtype=g.dtype)
                for n in range(b):
                    dcols = (wmat.T @ gmat[n]).reshape(c, k, k, ho, wo)
                    for di in range(k):
                        for dj in range(k):
                            gxp[n, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += dcols[:, di, dj]
                gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        if gw is not None and mask is not None:
            gw = gw * mask
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit(out, inputs, vjp, "conv2d")


def channel_matmul(x: Tensor, w: Tensor) -> Tensor:
    """Per-pixel row-vector product: out[:, j] = sum_i x[:, i] * w[i, j]."""
    b, c, h, wd = x.shape
    if w.data.ndim != 2 or w.shape[0] != c:
        raise ValueError(f"matrix {w.shape} does not match {c} channels")
    m = w.shape[1]
    xd, W = x.data, w.data
    out = np.empty((b, m, h, wd), dtype=np.result_type(xd, W))
    wt = W.T
    for n in range(b):
        out[n] = (wt @ xd[n].reshape(c, h * wd)).reshape(m, h, wd)

    def vjp(g):
        gx = gw = None
        if x.requires_grad:
            gx = np.empty_like(xd)
            for n in range(b):
                gx[n] = (W @ g[n].reshape(m, h * wd)).reshape(c, h, wd)
        if w.requires_grad:
            gw = np.zeros(W.shape, dtype=g.dtype)
            for n in range(b):
                gw += xd[n].reshape(c, h * wd) @ g[n].reshape(m, h * wd).T
        return gx, gw
    return _emit(out, (x, w), vjp, "channel_matmul")


def matinv(w: Tensor) -> Tensor:
    inv = np.linalg.inv(w.data)
    return _emit(inv, (w,), lambda g: (-(inv.T @ g @ inv.T),), "matinv")


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for an integer index vector."""
    index = np.asarray(index, dtype=np.int64)
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)
    return _emit(table.data[index].copy(), (table,), vjp, "gather_rows")


# ---------------------------------------------------------------- likelihood

def std_normal_cdf(x: np.ndarray) -> np.ndarray:
    return special.ndtr(x)


def gaussian_bits(v: Tensor, sigma: Tensor, min_prob: float = 1e-9) -> Tensor:
    """-log2 of the zero-mean discretized Gaussian mass of the unit bin at ``v``.

    Evaluated on ``|v|`` so both CDF terms sit in the lower tail. The gradient
    is zero where the mass falls below ``min_prob``.
    """
    vd = v.data.astype(np.float64)
    sd = sigma.data.astype(np.float64)
    av = np.abs(vd)
    upper = (0.5 - av) / sd
    lower = (-0.5 - av) / sd
    p = special.ndtr(upper) - special.ndtr(lower)
    floored = p < min_prob
    p = np.maximum(p, min_prob)
    bits = -np.log2(p)
    dtype = v.data.dtype

    def vjp(g):
        pdf_u = np.exp(-0.5 * upper * upper) / np.sqrt(2 * np.pi)
        pdf_l = np.exp(-0.5 * lower * lower) / np.sqrt(2 * np.pi)
        dbits_dp = np.where(floored, 0.0, -1.0 / (p * _LN2))
        dp_dav = (-pdf_u + pdf_l) / sd
        dp_ds = (-upper * pdf_u + lower * pdf_l) / sd
        gv = gs = None
        if v.requires_grad:
            gv = _unbroadcast((g * dbits_dp * dp_dav * np.sign(vd)).astype(dtype), v.shape)
        if sigma.requires_grad:
            gs = _unbroadcast((g * dbits_dp * dp_ds).astype(dtype), sigma.shape)
        return gv, gs
    return _emit(bits.astype(dtype), (v, sigma), vjp, "gaussian_bits")
