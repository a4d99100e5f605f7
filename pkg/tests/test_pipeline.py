import copy

import numpy as np
import pytest

from conftest import random_image
from invcodec import config as configs
from invcodec import evaluation, pipeline, training
from invcodec.coder import Container
from invcodec.coder.cdf import sigma_level
from invcodec.imageio import ImageFormatError, decode_ppm, encode_ppm, read_ppm, write_ppm
from invcodec.model import CodecModel
from invcodec.pipeline import ConfigMismatchError, VerificationError
from invcodec.coder import DecodeError, ContainerError


def test_padding_sizes():
    assert pipeline.padded_size(512, 768, 16) == (512, 768)
    assert pipeline.padded_size(100, 100, 16) == (112, 112)
    assert pipeline.padded_size(1, 17, 16) == (16, 32)


def test_pad_unpad_identity(rng):
    x = rng.random((1, 3, 37, 50))
    xp, size = pipeline.pad_to_multiple(x, 16)
    assert xp.shape == (1, 3, 48, 64) and size == (37, 50)
    assert np.array_equal(pipeline.unpad(xp, size), x)
    # edge replication
    assert np.array_equal(xp[..., 47, :50], x[..., 36, :])


def test_unit_conversion_round_trip(rng):
    img = random_image(rng, 9, 7)
    assert np.array_equal(pipeline.from_unit(pipeline.to_unit(img)), img)
    with pytest.raises(ValueError):
        pipeline.to_unit(img.astype(np.float32))


def test_header_records_original_size(tiny_model, rng):
    img = random_image(rng, 100, 100)
    enc = pipeline.encode(tiny_model, img, 3.0)
    c = Container.from_bytes(enc.stream)
    assert (c.orig_w, c.orig_h, c.pad_w, c.pad_h) == (100, 100, 112, 112)
    assert c.q == 3.0 and c.config_hash == tiny_model.config_hash


@pytest.mark.parametrize("q", [0.0, 2.0, 3.5, 7.25, 11.0])
def test_round_trip_bit_exact(tiny_model, rng, q):
    img = random_image(rng, 45, 70)
    enc = pipeline.encode(tiny_model, img, q, reconstruct=True)
    dec = pipeline.decode(tiny_model, enc.stream)
    for s in enc.symbols:
        for a, b in zip(enc.symbols[s], dec.symbols[s]):
            assert np.array_equal(a, b)
        assert np.array_equal(enc.y_hat[s], dec.y_hat[s])
    assert np.array_equal(enc.x_hat, dec.image)
    assert dec.image.shape == img.shape
    again = pipeline.decode(tiny_model, enc.stream)
    assert np.array_equal(again.image, dec.image)
    assert pipeline.encode(tiny_model, img, q).stream == enc.stream


def test_decoding_with_a_fresh_model_instance(tiny_model, rng, tmp_path):
    img = random_image(rng, 32, 32)
    enc = pipeline.encode(tiny_model, img, 5.0, reconstruct=True)
    tiny_model.save(tmp_path / "m.ivc")
    other = CodecModel.load(tmp_path / "m.ivc")
    assert np.array_equal(pipeline.decode(other, enc.stream).image, enc.x_hat)


def test_bpp_definition(tiny_model, rng):
    img = random_image(rng, 20, 30)
    enc = pipeline.encode(tiny_model, img, 4.0)
    assert enc.bpp == 8 * len(enc.stream) / 600
    assert sum(enc.scale_bits.values()) + enc.header_bits == 8 * len(enc.stream)


def test_monotone_rate_untrained(tiny_model):
    rng = np.random.default_rng(0)
    for _ in range(3):
        img = random_image(rng, 64, 64)
        assert pipeline.encode(tiny_model, img, 8).bpp > pipeline.encode(tiny_model, img, 2).bpp


def test_estimate_fidelity(tiny_model, rng):
    img = random_image(rng, 96, 96)
    for q in (1.0, 6.0, 11.0):
        enc = pipeline.encode(tiny_model, img, q)
        for s, bits in enc.scale_bits.items():
            est = enc.estimated_bits[s]
            assert abs(bits - est) <= 0.01 * est + 64, (q, s, bits, est)


def test_quality_range(tiny_model, rng):
    img = random_image(rng, 16, 16)
    for q in (-0.5, 11.5, float("nan")):
        with pytest.raises(ValueError):
            pipeline.encode(tiny_model, img, q)


def test_config_hash_mismatch(tiny_model, rng):
    enc = pipeline.encode(tiny_model, random_image(rng, 16, 16), 2.0)
    other = CodecModel(configs.tiny().replace(sigma_init=8.0))
    with pytest.raises(ConfigMismatchError):
        pipeline.decode(other, enc.stream)


def test_corrupt_streams(tiny_model, rng):
    enc = pipeline.encode(tiny_model, random_image(rng, 48, 48), 9.0)
    c = Container.from_bytes(enc.stream)
    hdr = c.header_size()
    detected = 0
    for pos in range(hdr, len(enc.stream), 7):
        bad = bytearray(enc.stream)
        bad[pos] ^= 0x5A
        with pytest.raises((DecodeError, VerificationError)):
            pipeline.decode(tiny_model, bytes(bad))
        detected += 1
    assert detected > 10
    with pytest.raises(ContainerError):
        pipeline.decode(tiny_model, enc.stream[:-1])
    c.crcs[0] ^= 1
    with pytest.raises(VerificationError):
        pipeline.decode(tiny_model, c.to_bytes())


def _lossless_model():
    model = CodecModel(configs.tiny().replace(dtype="float64"), seed=3)
    for g in model.entropy.gain:
        g.log_gain.assign(np.full(g.log_gain.shape, np.log(2.0 ** 28)))
    return model


def test_huge_gains_are_nearly_lossless(rng):
    model = _lossless_model()
    img = random_image(rng, 32, 48)
    enc = pipeline.encode(model, img, 6.0)
    x = pipeline.to_unit(img, np.float64)
    dec = pipeline.reconstruct(model, pipeline.decode(model, enc.stream).symbols, 6.0, (32, 48), (32, 48),
                               use_lrp=False, use_post=False)
    assert np.array_equal(dec, img)
    lat = model.transform.forward(x)
    res = pipeline.walk(model, 6.0, pipeline.EncoderQuantizer(lat.ys), 1, 32, 48, use_lrp=False)
    assert np.abs(res.x_tilde.data - x).max() * 255 <= 1e-3


def test_replay_matches_decode(tiny_model, rng):
    img = random_image(rng, 32, 32)
    enc = pipeline.encode(tiny_model, img, 4.0, reconstruct=True)
    out = pipeline.reconstruct(tiny_model, enc.symbols, enc.q, (32, 32), (32, 32))
    assert np.array_equal(out, enc.x_hat)


def test_spatial_variants_round_trip(rng):
    img = random_image(rng, 32, 32)
    for variant in ("single", "none"):
        model = CodecModel(configs.tiny().replace(spatial_context=variant), seed=2)
        enc = pipeline.encode(model, img, 5.0, reconstruct=True)
        assert np.array_equal(pipeline.decode(model, enc.stream).image, enc.x_hat)


def test_symbol_levels_use_grid(tiny_model, rng):
    lat = tiny_model.transform.forward(pipeline.to_unit(random_image(rng, 32, 32)))
    quant = pipeline.EncoderQuantizer(lat.ys)
    res = pipeline.walk(tiny_model, 3.0, quant, 1, 32, 32)
    for s, tr in res.scales.items():
        a = pipeline.anchor_mask(*tr.sigma[0].shape[2:])
        assert np.array_equal(quant.levels[s][0], sigma_level(pipeline.pass_order(tr.sigma[0], a)))


# ---------------------------------------------------------------- training

def test_lambda_lookup(tiny_model):
    assert tiny_model.lam(0) == pytest.approx(0.0018)
    assert tiny_model.lam(11) == pytest.approx(1.8)
    assert tiny_model.lam(2.5) == pytest.approx(np.sqrt(0.0067 * 0.0130))


def test_zero_images_have_zero_distortion():
    model = CodecModel(configs.tiny(), seed=0)
    x = np.zeros((2, 3, 32, 32))
    loss, bpp, mse = training.loss_terms(model, x, np.array([0.0, 11.0]), np.random.default_rng(0), init=True)
    assert np.abs(mse.data).max() < 1e-10


def _params(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


def test_zero_learning_rate_changes_nothing():
    model = CodecModel(configs.tiny(), seed=0)
    x = training.synthetic_patches(2, 32, 0)
    training.train_step(model, x, np.random.default_rng(0), 1e-3)  # performs actnorm init
    before = _params(model)
    training.train_step(model, x, np.random.default_rng(1), 0.0)
    after = _params(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_reduces_loss():
    model = CodecModel(configs.tiny(), seed=0)
    x = training.synthetic_patches(4, 32, 1)
    q = np.full(4, 6.0)
    rng = np.random.default_rng
    first = training.train_step(model, x, rng(0), 1e-3, q=q).loss
    for k in range(15):
        training.train_step(model, x, rng(k + 1), 1e-3, q=q)
    assert training.train_step(model, x, rng(99), 0.0, q=q).loss < first


def test_divergence_restores_weights():
    model = CodecModel(configs.tiny(), seed=0)
    x = training.synthetic_patches(2, 32, 0)
    training.train_step(model, x, np.random.default_rng(0), 1e-3)
    before = _params(model)
    bad = x.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(training.TrainingDiverged):
        training.train_step(model, bad, np.random.default_rng(1), 1e-3)
    after = _params(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_checkpoint_resume_is_deterministic(tmp_path):
    data = training.synthetic_patches(2, 32, 5)
    a = CodecModel(configs.tiny(), seed=4)
    training.train(a, data, 6, seed=9, lr=1e-3)
    b = CodecModel(configs.tiny(), seed=4)
    training.train(b, data, 3, seed=9, lr=1e-3)
    b.save(tmp_path / "ck.ivc", step=3, with_optimizer=True)
    c, step = CodecModel.load_checkpoint(tmp_path / "ck.ivc")
    assert step == 3
    training.train(c, data, 3, seed=9, lr=1e-3, start_step=step)
    pa, pc = _params(a), _params(c)
    assert all(np.array_equal(pa[k], pc[k]) for k in pa)


def test_moving_average():
    np.testing.assert_allclose(training.moving_average([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    assert training.moving_average([1], 5).size == 0


def test_synthetic_data_is_seeded():
    a = training.synthetic_patches(3, 16, 7)
    assert np.array_equal(a, training.synthetic_patches(3, 16, 7))
    assert not np.array_equal(a, training.synthetic_patches(3, 16, 8))
    assert a.min() >= 0 and a.max() <= 1


# ---------------------------------------------------------------- evaluation and io

def test_psnr_values(rng):
    img = random_image(rng, 8, 8)
    assert evaluation.psnr(img, img) == 99.0
    zeros = np.zeros((4, 4, 3), np.uint8)
    assert evaluation.psnr(zeros, zeros + 255) == 0.0


def test_evaluate_folder(tiny_model, rng, tmp_path):
    img = random_image(rng, 20, 24)
    write_ppm(tmp_path / "a.ppm", img)
    (tmp_path / "b.ppm").write_bytes(b"P5 garbage")
    rows = evaluation.evaluate(tiny_model, tmp_path, [0.0, 11.0])
    assert [r.file for r in rows] == ["a.ppm", "a.ppm", "b.ppm", "b.ppm"]
    assert rows[0].bpp == pipeline.encode(tiny_model, img, 0.0).bpp
    assert rows[2].error and rows[2].bpp is None


def test_reencode_first_iteration(tiny_model, rng):
    img = random_image(rng, 32, 32)
    steps = evaluation.reencode_loop(tiny_model, img, 6.0, 3)
    assert [s.iteration for s in steps] == [1, 2, 3]
    assert steps[0].psnr == evaluation.evaluate_image(tiny_model, img, 6.0)[1]


def test_ppm_round_trip(rng, tmp_path):
    img = random_image(rng, 5, 7)
    write_ppm(tmp_path / "x.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "x.ppm"), img)
    blob = b"P6\n# comment\n7 5\n# another\n255\n" + img.tobytes()
    assert np.array_equal(decode_ppm(blob), img)


@pytest.mark.parametrize("blob", [b"P3\n1 1\n255\n000", b"P6\n1 1\n65535\n" + bytes(6),
                                  b"P6\n2 2\n255\n" + bytes(5), b"P6\n"])
def test_ppm_rejects(blob):
    with pytest.raises(ImageFormatError):
        decode_ppm(blob)
