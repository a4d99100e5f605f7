import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invcodec import config as configs
from invcodec import diagnostics
from invcodec.core import ops
from invcodec.core.gradcheck import check_gradients
from invcodec.core.rng import Rng
from invcodec.core.tensor import Tensor
from invcodec.entropy import (MASK_A, MASK_B, SIGMA_MAX, SIGMA_MIN, EntropyParameters, GainTable,
                              ResidualPredictor, SpatialContext, anchor_mask, checkerboard_mask,
                              checkerboard_partition, discretized_gaussian_pmf, estimate_bits,
                              gained_sigma)
from invcodec.model import CodecModel
from invcodec.pipeline import EncoderQuantizer, walk


def test_masks():
    assert MASK_A.sum() == 4 and MASK_A[1, 1] == 0 and MASK_A[0, 0] == 0
    assert MASK_B.sum() == 5 and MASK_B[1, 1] == 1 and MASK_B[0, 1] == 0
    np.testing.assert_array_equal(checkerboard_mask(3), MASK_A)


def test_checkerboard_partition():
    a, n = checkerboard_partition(2, 2)
    assert a.tolist() == [[0, 0], [1, 1]]
    assert n.tolist() == [[0, 1], [1, 0]]
    a, n = checkerboard_partition(1, 1)
    assert a.tolist() == [[0, 0]] and len(n) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20))
def test_partition_is_exact(h, w):
    a, n = checkerboard_partition(h, w)
    assert len(a) + len(n) == h * w
    assert not set(map(tuple, a)) & set(map(tuple, n))
    assert all((r + c) % 2 == 0 for r, c in a)


def test_receptive_field_probe():
    m = diagnostics.receptive_field_map(15)
    assert (m[~diagnostics.expected_window(15, 4)] == 0).all()
    assert m[7, 7] == 0.0
    assert np.array_equal(m, np.rot90(m))
    # taps at distance 4 and 3 are reached
    assert m[3, 4] > 0 and m[7, 4] > 0
    # only odd offsets (the opposite checkerboard colour) contribute
    yy, xx = np.mgrid[0:15, 0:15]
    assert (m[(yy + xx) % 2 == 0] == 0).all()


@pytest.mark.parametrize("variant", ["stack", "single"])
def test_spatial_context_causality(variant):
    net = SpatialContext(3, 8, 6, variant, 5, Rng(1), dtype=np.float64)
    assert diagnostics.causality_violations(net, 3) == 0


def test_corrupted_masks_break_causality():
    net = SpatialContext(3, 8, 6, "stack", 5, Rng(1), dtype=np.float64)
    diagnostics.corrupt_masks(net)
    assert diagnostics.causality_violations(net, 3) > 0


def test_zero_input_zero_bias_gives_zero_features():
    net = SpatialContext(2, 4, 4, "stack", 5, Rng(0), dtype=np.float64)
    assert not net(Tensor(np.zeros((1, 2, 6, 6)))).data.any()


def test_entropy_params_clamp():
    ep = EntropyParameters(4, 2, 8, 16.0, Rng(0), dtype=np.float64)
    ep.conv2.bias.assign(np.array([0.0, 0.0, -50.0, 50.0]))
    mu, sigma = ep(Tensor(np.zeros((1, 4, 3, 3))))
    np.testing.assert_allclose(sigma.data[0, 0], SIGMA_MIN, rtol=1e-12)
    np.testing.assert_allclose(sigma.data[0, 1], SIGMA_MAX, rtol=1e-12)
    ep2 = EntropyParameters(4, 2, 8, 16.0, Rng(0), dtype=np.float64)
    ep2.conv2.weight.assign(np.random.default_rng(0).standard_normal(ep2.conv2.weight.shape) * 30)
    _, s2 = ep2(Tensor(np.random.default_rng(1).standard_normal((1, 4, 5, 5)) * 10))
    assert s2.data.min() >= SIGMA_MIN * (1 - 1e-12) and s2.data.max() <= SIGMA_MAX * (1 + 1e-12)


def test_gain_interpolation():
    g = GainTable(1, 11, dtype=np.float64)
    table = np.log(np.full((12, 1), 3.0))
    table[2, 0], table[3, 0] = np.log(1.0), np.log(4.0)
    g.log_gain.assign(table)
    gain, inv = g.gains(2.5)
    assert gain.data.ravel()[0] == pytest.approx(2.0)
    assert inv.data.ravel()[0] == pytest.approx(0.5)
    exact, _ = g.gains(3)
    assert exact.data.ravel()[0] == np.exp(np.float64(np.log(4.0)))


def test_gain_init_schedule():
    g = GainTable(3, 11, dtype=np.float64)
    for q in range(12):
        np.testing.assert_allclose(g.gains(q)[0].data.ravel(), 2.0 ** ((q - 11) / 2))


def test_gain_integer_q_is_table_entry():
    g = GainTable(4, 11)
    g.log_gain.assign(np.random.default_rng(0).standard_normal((12, 4)))
    for q in range(12):
        np.testing.assert_array_equal(g.log_gains(q).data.ravel(), g.log_gain.data[q])


def test_gain_continuity():
    g = GainTable(2, 11, dtype=np.float64)
    g.log_gain.assign(np.random.default_rng(0).standard_normal((12, 2)))
    qs = np.linspace(0, 11, 1101)
    vals = np.array([g.log_gains(q).data.ravel() for q in qs])
    assert np.abs(np.diff(vals, axis=0)).max() < 0.1


def test_gain_round_trip(rng):
    g = GainTable(3, 11)
    g.log_gain.assign(rng.standard_normal((12, 3)))
    r = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
    for q in (0.0, 4.3, 11.0):
        gain, inv = g.gains(q)
        np.testing.assert_allclose(r * gain.data * inv.data, r, atol=1e-5)


@pytest.mark.parametrize("q", [-0.1, 11.01, float("nan")])
def test_gain_rejects_bad_quality(q):
    with pytest.raises(ValueError):
        GainTable(2, 11).gains(q)


def test_gain_gradient():
    g = GainTable(3, 11, dtype=np.float64)
    g.log_gain.assign(np.random.default_rng(0).standard_normal((12, 3)))
    assert check_gradients(lambda: g.gains(np.array([2.5, 7.0, 10.25]))[0], [g.log_gain]) < 1e-6


def test_gained_sigma():
    s = Tensor(np.array([1.0, 1.0, 0.01, 300.0]))
    out = gained_sigma(s, Tensor(np.array([1.0, 2.0, 1.0, 1.0]))).data
    np.testing.assert_allclose(out, [1.0, 2.0, 0.04, 256.0])


def test_pmf_and_rate_values():
    p = discretized_gaussian_pmf(0, 1.0)
    assert p == pytest.approx(0.3829249225480262, rel=1e-12)
    assert estimate_bits([0], 1.0) == pytest.approx(1.3848, abs=1e-3)
    rates = [estimate_bits([0], s) for s in (0.5, 1.0, 4.0, 32.0)]
    assert rates == sorted(rates)


def test_pmf_normalisation():
    v = np.arange(-2000, 2001)
    for s in (0.04, 0.7, 13.0, 256.0):
        assert discretized_gaussian_pmf(v, s).sum() == pytest.approx(1.0, abs=1e-12)


def test_lrp_zero_head_is_identity(rng):
    lrp = ResidualPredictor(5, 3, 8, Rng(0), dtype=np.float64)
    y = Tensor(rng.standard_normal((1, 3, 4, 4)))
    h = Tensor(rng.standard_normal((1, 2, 4, 4)))
    inv = Tensor(np.full((1, 3, 1, 1), 0.7))
    np.testing.assert_array_equal(lrp(h, y, inv).data, y.data)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10000), st.floats(0.01, 100.0))
def test_lrp_correction_bound(seed, scale):
    rng = np.random.default_rng(seed)
    lrp = ResidualPredictor(5, 3, 8, Rng(seed), dtype=np.float64)
    lrp.head.weight.assign(rng.standard_normal(lrp.head.weight.shape) * scale)
    lrp.head.bias.assign(rng.standard_normal(3) * scale)
    y = Tensor(rng.standard_normal((1, 3, 4, 4)) * scale)
    h = Tensor(rng.standard_normal((1, 2, 4, 4)) * scale)
    ig = np.exp(rng.standard_normal((1, 3, 1, 1)))
    corr = lrp(h, y, Tensor(ig)).data - y.data
    slack = 4 * np.finfo(np.float64).eps * (np.abs(y.data) + ig)
    assert (np.abs(corr) <= 0.5 * ig + slack).all()


def _encoder_params(model, x, q):
    lat = model.transform.forward(x)
    quant = EncoderQuantizer(lat.ys)
    res = walk(model, q, quant, 1, x.shape[2], x.shape[3])
    return lat, res


def _perturbed_model(seed=0):
    model = CodecModel(configs.tiny().replace(dtype="float64"), seed=seed)
    rng = np.random.default_rng(seed)
    for name, p in model.entropy.named_parameters():
        if p.data.ndim == 4 and not p.data.any():
            p.assign(0.05 * rng.standard_normal(p.shape))
    return model


def test_anchor_parameters_ignore_non_anchor_values():
    model = _perturbed_model()
    x = np.random.default_rng(1).random((1, 3, 32, 32))
    lat = model.transform.forward(x)
    base = walk(model, 6.0, EncoderQuantizer(lat.ys), 1, 32, 32)
    for s in range(1, model.config.num_scales + 1):
        ys = [Tensor(y.data.copy()) for y in lat.ys]
        y = ys[s - 1].data
        na = ~anchor_mask(*y.shape[2:])
        y[:, :, na] = np.random.default_rng(s).standard_normal(y[:, :, na].shape) * 5
        other = walk(model, 6.0, EncoderQuantizer(ys), 1, 32, 32)
        am = anchor_mask(*y.shape[2:])
        assert np.array_equal(base.scales[s].sigma[0][:, :, am], other.scales[s].sigma[0][:, :, am])


def test_non_anchor_parameters_depend_only_on_nearby_anchors():
    model = _perturbed_model(1)
    x = np.random.default_rng(2).random((1, 3, 64, 64))
    lat = model.transform.forward(x)
    s = 1
    base = walk(model, 11.0, EncoderQuantizer(lat.ys), 1, 64, 64).scales[s].sigma[1]
    ys = [Tensor(y.data.copy()) for y in lat.ys]
    ys[0].data[:, :, 0, 0] += 40.0  # one anchor in the corner
    moved = walk(model, 11.0, EncoderQuantizer(ys), 1, 64, 64).scales[s].sigma[1]
    diff = np.abs(moved - base).max(axis=(0, 1)) > 0
    na = ~anchor_mask(*diff.shape)
    changed = np.argwhere(diff & na)
    assert len(changed) > 0
    # anything that moved lies within the stacked receptive field
    assert changed.max() <= 4
