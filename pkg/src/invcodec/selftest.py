"""Built-in invariant checks, runnable without any data or trained model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import config as configs
from . import diagnostics, pipeline
from .coder import RangeDecoder, decode_symbols, encode_symbols, table_bank
from .coder.cdf import NUM_LEVELS, level_sigma, sigma_level
from .core import ops
from .core.gradcheck import check_gradients
from .core.nn import Conv2d
from .core.rng import Rng
from .core.tensor import Tensor
from .entropy import (MASK_A, EntropyParameters, GainTable, ResidualPredictor, SpatialContext,
                      discretized_gaussian_pmf)
from .model import CodecModel
from .postprocess import PostProcessNet
from .transform import ActNorm, AffineCoupling, Inv1x1


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _bijectivity(level: str) -> tuple[bool, str]:
    cfg = configs.tiny()
    worst = {}
    sizes = (32, 64) if level == "fast" else (32, 64, 128)
    for dtype, tol in (("float32", 1e-4), ("float64", 1e-8)):
        m = CodecModel(cfg.replace(dtype=dtype), seed=1)
        err = 0.0
        for k, s in enumerate(sizes):
            x = np.random.default_rng(k).random((1, 3, s, s))
            lat = m.transform.forward(x)
            err = max(err, float(np.abs(m.transform.reverse(lat).data - x).max()))
        worst[dtype] = (err, tol)
    ok = all(e <= t for e, t in worst.values())
    return ok, ", ".join(f"{d}: {e:.2e} (tol {t:g})" for d, (e, t) in worst.items())


def _conservation(level: str) -> tuple[bool, str]:
    splits = [(0.25, 0.25, 0.25, 0.5), (0.5, 0.5, 0.5, 0.5), (0.25, 0.5, 0.25, 0.5), (0.75, 0.5, 0.5, 0.5)]
    for sp in splits:
        cfg = configs.tiny().replace(split_ratios=sp)
        total = sum(c * h * w for c, h, w in cfg.latent_shapes(64, 48))
        if total != 3 * 64 * 48:
            return False, f"split {sp}: {total} elements"
    return True, f"{len(splits)} split plans"


def _causality(level: str, mutate: bool = False) -> tuple[bool, str]:
    net = SpatialContext(4, 8, 8, "stack", 5, Rng(3), dtype=np.float64)
    if mutate:
        diagnostics.corrupt_masks(net)
    bad = diagnostics.causality_violations(net, 4, trials=2 if level == "fast" else 5)
    return bad == 0, f"{bad} non-anchor outputs moved"


def _receptive_field(level: str) -> tuple[bool, str]:
    m = diagnostics.receptive_field_map(15)
    outside = float(m[~diagnostics.expected_window(15)].max())
    ok = outside == 0.0 and m[7, 7] == 0.0 and np.array_equal(m, np.rot90(m)) and m.max() > 0
    return ok, f"outside 9x9: {outside:g}, centre {m[7, 7]:g}"


def _coder(level: str) -> tuple[bool, str]:
    n = 20000 if level == "fast" else 200000
    rng = np.random.default_rng(5)
    levels = rng.integers(0, NUM_LEVELS, n)
    sym = np.rint(rng.standard_normal(n) * level_sigma(levels)).astype(np.int64)
    sym[:4] = [3000, -3000, 200, -129]
    bank = table_bank()
    blob = encode_symbols(sym, levels, bank)
    dec = RangeDecoder(blob)
    out = decode_symbols(dec, levels, bank)
    dec.check_consumed()
    return bool(np.array_equal(out, sym)), f"{n} symbols, {len(blob)} bytes"


def _estimate_fidelity(level: str) -> tuple[bool, str]:
    rng = np.random.default_rng(6)
    n = 50000
    bank = table_bank()
    worst = 0.0
    for lo, hi in ((0.1, 1.0), (0.5, 8.0), (2.0, 40.0)):
        sig = np.exp(rng.uniform(np.log(lo), np.log(hi), n))
        sym = np.rint(rng.standard_normal(n) * sig).astype(np.int64)
        blob = encode_symbols(sym, sigma_level(sig), bank)
        est = float(-np.log2(discretized_gaussian_pmf(sym, sig)).sum())
        gap = 8 * len(blob) - est
        worst = max(worst, abs(gap) / (0.01 * est + 64))
    return worst <= 1.0, f"worst gap {worst:.2f} of allowance"


def _codec(level: str) -> tuple[bool, str]:
    model = CodecModel(configs.tiny(), seed=2)
    img = np.random.default_rng(7).integers(0, 256, (40, 36, 3)).astype(np.uint8)
    qs = (0.0, 5.5, 11.0) if level == "fast" else (0.0, 3.5, 7.0, 11.0)
    for q in qs:
        enc = pipeline.encode(model, img, q, reconstruct=True)
        dec = pipeline.decode(model, enc.stream)
        if not np.array_equal(enc.x_hat, dec.image):
            return False, f"q={q}: decoder reconstruction differs from encoder mirror"
        for s in enc.y_hat:
            if not np.array_equal(enc.y_hat[s], dec.y_hat[s]):
                return False, f"q={q}: scale {s} latents drift"
    return True, f"q in {qs}"


def _layer_checks(level: str) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(8)
    r = Rng(9)
    x4 = Tensor(rng.standard_normal((2, 4, 6, 6)))
    checks: dict[str, Callable[[], float]] = {}

    conv = Conv2d(4, 3, 3, r.stream("c"), dtype=np.float64)
    checks["conv3x3"] = lambda: check_gradients(lambda: conv(x4), [x4, conv.weight, conv.bias])
    if level == "full":
        conv_s = Conv2d(4, 3, 3, r.stream("s"), stride=2, dtype=np.float64)
        checks["conv3x3 stride 2"] = lambda: check_gradients(lambda: conv_s(x4), [x4, conv_s.weight, conv_s.bias])
        conv_m = Conv2d(4, 3, 3, r.stream("m"), mask=MASK_A, dtype=np.float64)
        checks["masked conv"] = lambda: check_gradients(lambda: conv_m(x4), [x4, conv_m.weight])
        conv_1 = Conv2d(4, 5, 1, r.stream("p"), dtype=np.float64)
        checks["conv1x1"] = lambda: check_gradients(lambda: conv_1(x4), [x4, conv_1.weight, conv_1.bias])
        an = ActNorm(4, dtype=np.float64)
        an.beta.assign(rng.standard_normal(an.beta.shape))
        an.gamma.assign(0.3 * rng.standard_normal(an.gamma.shape))
        checks["actnorm"] = lambda: check_gradients(lambda: an.forward(x4), [x4, an.beta, an.gamma])
        inv = Inv1x1(4, r.stream("i"), dtype=np.float64)
        checks["inv1x1"] = lambda: check_gradients(lambda: inv.forward(x4), [x4, inv.weight])
        checks["inv1x1 reverse"] = lambda: check_gradients(lambda: inv.reverse(x4), [x4, inv.weight])
        cp = AffineCoupling(4, 6, r.child("cp"), dtype=np.float64)
        cp.head.weight.assign(0.1 * rng.standard_normal(cp.head.weight.shape))
        checks["affine coupling"] = lambda: check_gradients(lambda: cp.forward(x4), [x4, *cp.parameters()])
        checks["affine coupling reverse"] = lambda: check_gradients(lambda: cp.reverse(x4), [x4, *cp.parameters()])
        sig = Tensor(np.exp(rng.standard_normal((2, 4, 6, 6))))
        v = Tensor(rng.standard_normal((2, 4, 6, 6)) * 2)
        checks["gaussian bits"] = lambda: check_gradients(lambda: ops.gaussian_bits(v, sig), [v, sig])
        checks["elementwise"] = lambda: check_gradients(
            lambda: ops.tanh(ops.sigmoid(ops.exp(ops.scale(x4, 0.3)))), [x4])
        checks["squeeze/upsample"] = lambda: check_gradients(
            lambda: ops.upsample2x(ops.space_to_depth(x4)), [x4])
        ep = EntropyParameters(4, 2, 5, 2.0, r.child("ep"), dtype=np.float64)
        ep.conv2.weight.assign(0.3 * rng.standard_normal(ep.conv2.weight.shape))
        checks["entropy parameters"] = lambda: check_gradients(
            lambda: ops.concat(list(ep(x4))), [x4, *ep.parameters()])
        gt = GainTable(3, 11, dtype=np.float64)
        gt.log_gain.assign(rng.standard_normal(gt.log_gain.shape))
        checks["gain table"] = lambda: check_gradients(
            lambda: ops.concat(list(gt.gains(np.array([0.0, 4.5])))), [gt.log_gain])
        lrp = ResidualPredictor(4, 2, 5, r.child("lrp"), dtype=np.float64)
        lrp.head.weight.assign(0.3 * rng.standard_normal(lrp.head.weight.shape))
        y2 = Tensor(rng.standard_normal((2, 2, 6, 6)))
        h2 = Tensor(rng.standard_normal((2, 2, 6, 6)))
        ig = Tensor(np.exp(rng.standard_normal((2, 2, 1, 1))))
        checks["residual predictor"] = lambda: check_gradients(
            lambda: lrp(h2, y2, ig), [h2, y2, ig, *lrp.parameters()])
        post = PostProcessNet(3, r.child("post"), np.float64)
        post.out.weight.assign(0.3 * rng.standard_normal(post.out.weight.shape))
        x3 = Tensor(rng.random((1, 3, 8, 8)))
        checks["post-processing"] = lambda: check_gradients(lambda: post(x3), [x3, *post.parameters()])
    return checks


def _gradients(level: str) -> tuple[bool, str]:
    worst_name, worst = "", 0.0
    for name, fn in _layer_checks(level).items():
        err = fn()
        if err > worst:
            worst_name, worst = name, err
    return worst <= 1e-4, f"worst relative error {worst:.1e} ({worst_name})"


SUITES: dict[str, Callable[[str], tuple[bool, str]]] = {
    "bijectivity": _bijectivity,
    "element conservation": _conservation,
    "context causality": _causality,
    "receptive field": _receptive_field,
    "coder round trip": _coder,
    "estimate fidelity": _estimate_fidelity,
    "codec round trip": _codec,
    "gradient checks": _gradients,
}


def run(level: str = "fast", mutate_masks: bool = False) -> list[CheckResult]:
    """Run every suite; ``mutate_masks`` corrupts the spatial-context masks first."""
    if level not in ("fast", "full"):
        raise ValueError("level must be 'fast' or 'full'")
    results = []
    for name, suite in SUITES.items():
        t0 = time.perf_counter()
        try:
            if name == "context causality":
                ok, detail = suite(level, mutate=mutate_masks)
            else:
                ok, detail = suite(level)
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  time    detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:5.1f}s  {r.detail}")
    return "\n".join(lines)
