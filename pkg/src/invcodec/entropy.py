"""Per-scale Gaussian entropy model with checkerboard spatial context and gain units.

Scales are numbered 1..n+1 like the latents. The coarsest scale has no hidden
state to condition on and uses a learned per-channel prior instead.
"""

from __future__ import annotations

import numpy as np

from .config import CodecConfig
from .core import ops
from .core.nn import Conv2d, Module
from .core.rng import Rng
from .core.tensor import Parameter, Tensor

SIGMA_MIN = 0.04
SIGMA_MAX = 256.0
LOG_SIGMA_MIN = float(np.log(SIGMA_MIN))
LOG_SIGMA_MAX = float(np.log(SIGMA_MAX))

# taps relative to the kernel centre
MASK_A = np.array([[0, 1, 0],
                   [1, 0, 1],
                   [0, 1, 0]], dtype=np.float64)
MASK_B = np.array([[1, 0, 1],
                   [0, 1, 0],
                   [1, 0, 1]], dtype=np.float64)


def checkerboard_mask(k: int) -> np.ndarray:
    """k x k mask selecting taps of the opposite parity to the centre."""
    r = np.arange(k)[:, None] + np.arange(k)[None, :]
    return ((r - (k - 1)) % 2 != 0).astype(np.float64)


def anchor_mask(height: int, width: int) -> np.ndarray:
    """True where (row + col) is even; these positions are coded first."""
    return (np.arange(height)[:, None] + np.arange(width)[None, :]) % 2 == 0


def checkerboard_partition(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """(anchor, non-anchor) coordinates, each an (N, 2) array in raster order."""
    a = anchor_mask(height, width)
    return np.argwhere(a), np.argwhere(~a)


class SpatialContext(Module):
    """Masked-convolution context over decoded anchors.

    ``stack``: one 3x3 mask-A layer followed by three 3x3 mask-B layers.
    ``single``: one k x k checkerboard-masked layer.
    """

    def __init__(self, latent: int, width: int, out: int, variant: str, kernel: int,
                 rng: Rng, dtype=np.float32):
        self.variant = variant
        if variant == "stack":
            self.layers = [
                Conv2d(latent, width, 3, rng.stream("a"), mask=MASK_A, dtype=dtype),
                Conv2d(width, width, 3, rng.stream("b1"), mask=MASK_B, dtype=dtype),
                Conv2d(width, width, 3, rng.stream("b2"), mask=MASK_B, dtype=dtype),
                Conv2d(width, out, 3, rng.stream("b3"), mask=MASK_B, dtype=dtype),
            ]
        elif variant == "single":
            self.layers = [Conv2d(latent, out, kernel, rng.stream("single"),
                                  mask=checkerboard_mask(kernel), dtype=dtype)]
        else:
            raise ValueError(f"unknown spatial context variant {variant!r}")

    def __call__(self, y_anchor: Tensor) -> Tensor:
        h = y_anchor
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ops.relu(h)
        return h


class ChannelContext(Module):
    """Two 3x3 convolutions and a 1x1 head: hidden state -> (mean, log-scale) features."""

    def __init__(self, in_ch: int, latent: int, width: int, rng: Rng, dtype=np.float32,
                 zero_head: bool = True):
        self.conv1 = Conv2d(in_ch, width, 3, rng.stream("conv1"), dtype=dtype)
        self.conv2 = Conv2d(width, width, 3, rng.stream("conv2"), dtype=dtype)
        self.head = Conv2d(width, 2 * latent, 1, None if zero_head else rng.stream("head"),
                           zero_init=zero_head, dtype=dtype)

    def __call__(self, h: Tensor) -> Tensor:
        return self.head(ops.relu(self.conv2(ops.relu(self.conv1(h)))))


class PriorContext(Module):
    """Coarsest scale: zero mean and a learned per-channel log-scale.

    The log-scale starts at log(sigma_init) rather than zero; an all-zero
    feature map would sit on the ReLU kink of the next layer and never train.
    """

    def __init__(self, latent: int, sigma_init: float, dtype=np.float32):
        self.latent = latent
        self.log_sigma = Parameter("log_sigma", np.full((1, latent, 1, 1), np.log(sigma_init)), dtype=dtype)

    def __call__(self, batch: int, height: int, width: int) -> Tensor:
        dt = self.log_sigma.data.dtype
        zeros = Tensor(np.zeros((batch, self.latent, height, width), dtype=dt))
        sig = ops.add(zeros, self.log_sigma)
        return ops.concat([zeros, sig])


class EntropyParameters(Module):
    """1x1 aggregation of channel and spatial features into (mu, sigma)."""

    def __init__(self, in_ch: int, latent: int, width: int, sigma_init: float, rng: Rng,
                 dtype=np.float32):
        self.latent = latent
        self.in_ch = in_ch
        self.conv1 = Conv2d(in_ch, width, 1, rng.stream("conv1"), dtype=dtype)
        self.conv2 = Conv2d(width, 2 * latent, 1, zero_init=True, dtype=dtype)
        bias = np.zeros(2 * latent)
        bias[latent:] = np.log(sigma_init)
        self.conv2.bias.assign(bias)

    def __call__(self, features: Tensor) -> tuple[Tensor, Tensor]:
        out = self.conv2(ops.relu(self.conv1(features)))
        mu = ops.channels(out, 0, self.latent)
        logit = ops.channels(out, self.latent, 2 * self.latent)
        sigma = ops.exp(ops.clamp(logit, LOG_SIGMA_MIN, LOG_SIGMA_MAX))
        return mu, sigma


class GainTable(Module):
    """Per-quality, per-channel gains stored as logarithms.

    The inverse gain is the reciprocal, so gain and inverse gain cancel.
    """

    def __init__(self, latent: int, q_max: int, dtype=np.float32):
        self.q_max = q_max
        q = np.arange(q_max + 1, dtype=np.float64)[:, None]
        init = (q - q_max) / 2.0 * np.log(2.0) * np.ones((1, latent))
        self.log_gain = Parameter("log_gain", init, dtype=dtype)

    def check_q(self, q) -> np.ndarray:
        q = np.atleast_1d(np.asarray(q, dtype=np.float64))
        if np.any(~np.isfinite(q)) or np.any(q < 0) or np.any(q > self.q_max):
            raise ValueError(f"quality must lie in [0, {self.q_max}], got {q}")
        return q

    def log_gains(self, q) -> Tensor:
        """(B, C, 1, 1) log-gains, geometric interpolation between integer rows."""
        q = self.check_q(q)
        lo = np.floor(q).astype(np.int64)
        frac = q - lo
        hi = np.minimum(lo + 1, self.q_max)
        rows = ops.gather_rows(self.log_gain, lo)
        if np.any(frac > 0):
            dt = self.log_gain.data.dtype
            w = Tensor(frac.astype(dt)[:, None])
            rows = ops.add(ops.mul(rows, ops.add(ops.scale(w, -1.0), 1.0)),
                           ops.mul(ops.gather_rows(self.log_gain, hi), w))
        return ops.reshape(rows, (len(q), -1, 1, 1))

    def gains(self, q) -> tuple[Tensor, Tensor]:
        lg = self.log_gains(q)
        return ops.exp(lg), ops.exp(ops.scale(lg, -1.0))


class ResidualPredictor(Module):
    """Bounded latent correction from the hidden state and the dequantized latent."""

    def __init__(self, in_ch: int, latent: int, width: int, rng: Rng, dtype=np.float32):
        self.conv1 = Conv2d(in_ch, width, 3, rng.stream("conv1"), dtype=dtype)
        self.conv2 = Conv2d(width, width, 3, rng.stream("conv2"), dtype=dtype)
        self.head = Conv2d(width, latent, 1, zero_init=True, dtype=dtype)

    def __call__(self, h_hat: Tensor | None, y_hat: Tensor, inv_gain: Tensor) -> Tensor:
        inp = y_hat if h_hat is None else ops.concat([h_hat, y_hat])
        out = self.head(ops.relu(self.conv2(ops.relu(self.conv1(inp)))))
        r = ops.scale(ops.tanh(out), 0.5)
        return ops.add(y_hat, ops.mul(r, inv_gain))


class EntropyModel(Module):
    def __init__(self, config: CodecConfig, rng: Rng):
        dtype = config.np_dtype
        self.config = config
        lat = config.latent_channels()
        hid = config.hidden_channels()
        n = config.num_scales
        self.channel = []
        self.spatial = []
        self.params = []
        self.gain = []
        self.lrp = []
        use_sp = config.spatial_context != "none"
        for s in range(n):
            r = rng.child(f"scale{s + 1}")
            c = lat[s]
            if s < n - 1:
                self.channel.append(ChannelContext(hid[s], c, config.context_width, r.child("ch"), dtype))
            else:
                self.channel.append(PriorContext(c, config.sigma_init, dtype))
            if use_sp:
                self.spatial.append(SpatialContext(c, config.context_width, 2 * c, config.spatial_context,
                                                   config.spatial_kernel, r.child("sp"), dtype))
            self.params.append(EntropyParameters((4 if use_sp else 2) * c, c, config.param_width,
                                                 config.sigma_init, r.child("ep"), dtype))
            self.gain.append(GainTable(c, config.q_max, dtype))
            if config.use_lrp:
                in_ch = (hid[s] if s < n - 1 else 0) + c
                self.lrp.append(ResidualPredictor(in_ch, c, config.lrp_width, r.child("lrp"), dtype))

    @property
    def has_spatial(self) -> bool:
        return bool(self.spatial)

    def channel_features(self, scale: int, h_hat: Tensor | None, shape: tuple[int, ...]) -> Tensor:
        """``shape`` is the (B, C, H, W) shape of y_scale."""
        net = self.channel[scale - 1]
        if isinstance(net, PriorContext):
            return net(shape[0], shape[2], shape[3])
        if h_hat is None:
            raise ValueError(f"scale {scale} needs the reconstructed hidden state")
        if h_hat.shape[2:] != tuple(shape[2:]):
            raise ValueError(f"hidden state {h_hat.shape} does not match latent {shape}")
        return net(h_hat)

    def spatial_features(self, scale: int, y_anchor: Tensor) -> Tensor | None:
        if not self.spatial:
            return None
        return self.spatial[scale - 1](y_anchor)

    def entropy_params(self, scale: int, ch_feat: Tensor, sp_feat: Tensor | None) -> tuple[Tensor, Tensor]:
        """(mu, sigma); ``sp_feat=None`` means the anchor pass (spatial term zero)."""
        if self.spatial:
            if sp_feat is None:
                sp_feat = Tensor(np.zeros(ch_feat.shape, dtype=ch_feat.data.dtype))
            feat = ops.concat([ch_feat, sp_feat])
        else:
            feat = ch_feat
        return self.params[scale - 1](feat)

    def gains(self, scale: int, q) -> tuple[Tensor, Tensor]:
        return self.gain[scale - 1].gains(q)

    def correct(self, scale: int, h_hat: Tensor | None, y_hat: Tensor, inv_gain: Tensor) -> Tensor:
        if not self.lrp:
            return y_hat
        if scale == self.config.num_scales:
            h_hat = None
        return self.lrp[scale - 1](h_hat, y_hat, inv_gain)


def gained_sigma(sigma: Tensor, gain: Tensor) -> Tensor:
    """Scale of the gained residual, clamped into the coder's supported range."""
    return ops.clamp(ops.mul(sigma, gain), SIGMA_MIN, SIGMA_MAX)


def discretized_gaussian_pmf(v, sigma) -> np.ndarray:
    """Phi((v+.5)/sigma) - Phi((v-.5)/sigma) evaluated in float64 on |v|."""
    av = np.abs(np.asarray(v, dtype=np.float64))
    s = np.asarray(sigma, dtype=np.float64)
    return ops.std_normal_cdf((0.5 - av) / s) - ops.std_normal_cdf((-0.5 - av) / s)


def estimate_bits(symbols, sigma) -> float:
    """Ideal code length in bits of integer symbols under zero-mean N(0, sigma)."""
    p = discretized_gaussian_pmf(symbols, sigma)
    return float(-np.log2(np.maximum(p, 1e-300)).sum())
