import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invcodec import config as configs
from invcodec.core import ops
from invcodec.core.gradcheck import check_gradients
from invcodec.core.rng import Rng
from invcodec.core.tensor import Tensor
from invcodec.model import CodecModel
from invcodec.transform import (ActNorm, AffineCoupling, Inv1x1, InvertibleTransform,
                                SingularWeightError, UninitializedError)


def test_space_to_depth_layout():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    y = ops.space_to_depth_array(x)
    assert y.shape == (1, 4, 2, 2)
    # channel order follows the 2x2 patch in row-major order
    np.testing.assert_array_equal(y[0, :, 0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(ops.depth_to_space_array(y), x)


def test_desk_latent_shapes_at_256():
    cfg = configs.desk()
    shapes = cfg.latent_shapes(256, 256)
    assert shapes == [(3, 128, 128), (9, 64, 64), (27, 32, 32), (162, 16, 16), (162, 16, 16)]
    assert [c * h * w for c, h, w in shapes] == [49152, 36864, 27648, 41472, 41472]


@pytest.mark.parametrize("splits", [(0.25, 0.25, 0.25, 0.5), (0.5, 0.5, 0.5, 0.5),
                                    (0.75, 0.25, 0.5, 0.5), (0.25, 0.5, 0.75, 0.5)])
def test_element_conservation(splits):
    cfg = configs.tiny().replace(split_ratios=splits)
    m = InvertibleTransform(cfg, Rng(0))
    lat = m.forward(np.zeros((1, 3, 32, 48), dtype=np.float32))
    assert lat.num_elements() == 3 * 32 * 48


def test_bad_split_rejected():
    with pytest.raises(ValueError):
        configs.tiny().replace(split_ratios=(0.3, 0.25, 0.25, 0.5))
    with pytest.raises(ValueError):
        configs.tiny().replace(split_ratios=(0.25, 0.25, 0.25, 0.25))


@settings(max_examples=6, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
def test_bijective_random_sizes(hm, wm, seed):
    m = InvertibleTransform(configs.tiny().replace(dtype="float64"), Rng(seed))
    x = np.random.default_rng(seed).random((1, 3, 16 * hm, 16 * wm))
    err = np.abs(m.reverse(m.forward(x)).data - x).max()
    assert err <= 1e-8


def test_bijective_after_data_init():
    m = InvertibleTransform(configs.tiny(), Rng(3))
    x = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32)
    lat = m.forward(x, init=True)
    assert np.abs(m.reverse(lat).data - x).max() <= 1e-4
    # data init normalises the first unit's output per channel
    t = m.blocks[0].units[0].actnorm.forward(Tensor(ops.space_to_depth_array(x)))
    assert np.allclose(t.data.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    assert np.allclose(t.data.std(axis=(0, 2, 3)), 1, atol=1e-3)


def test_partial_reverse_rebuilds_hidden_states():
    m = InvertibleTransform(configs.tiny().replace(dtype="float64"), Rng(2))
    x = np.random.default_rng(1).random((1, 3, 32, 32))
    lat = m.forward(x)
    for scale in range(1, 4):
        h = m.partial_reverse(lat.ys, scale)
        assert np.abs(h.data - lat.hidden[scale - 1].data).max() < 1e-10
    # the deepest block's hidden state is its sibling latent
    assert np.array_equal(m.partial_reverse(lat.ys, 4).data, lat.ys[4].data)


def test_partial_reverse_needs_coarser_latents():
    m = InvertibleTransform(configs.tiny(), Rng(2))
    lat = m.forward(np.zeros((1, 3, 16, 16), dtype=np.float32))
    ys = list(lat.ys)
    ys[3] = None
    with pytest.raises(ValueError):
        m.partial_reverse(ys, 2)


def test_input_must_be_padded():
    m = InvertibleTransform(configs.tiny(), Rng(0))
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 3, 20, 16), dtype=np.float32))


def test_identity_start_couplings():
    cp = AffineCoupling(4, 8, Rng(0), dtype=np.float64)
    u = Tensor(np.random.default_rng(0).standard_normal((1, 4, 5, 5)))
    # zero head: bias 0 and log factor 2*sigmoid(0) - 1 = 0
    np.testing.assert_array_equal(cp.forward(u).data, u.data)


def test_coupling_gradients():
    rng = np.random.default_rng(4)
    cp = AffineCoupling(4, 6, Rng(1), dtype=np.float64)
    cp.head.weight.assign(0.2 * rng.standard_normal(cp.head.weight.shape))
    u = Tensor(rng.standard_normal((2, 4, 5, 5)))
    assert check_gradients(lambda: cp.forward(u), [u, *cp.parameters()]) < 1e-5
    assert check_gradients(lambda: cp.reverse(u), [u, *cp.parameters()]) < 1e-5


def test_actnorm_and_inv1x1_gradients():
    rng = np.random.default_rng(5)
    an = ActNorm(4, dtype=np.float64)
    an.beta.assign(rng.standard_normal(an.beta.shape))
    an.gamma.assign(0.3 * rng.standard_normal(an.gamma.shape))
    t = Tensor(rng.standard_normal((2, 4, 3, 3)))
    assert check_gradients(lambda: an.forward(t), [t, an.beta, an.gamma]) < 1e-6
    assert check_gradients(lambda: an.reverse(t), [t, an.beta, an.gamma]) < 1e-6
    inv = Inv1x1(4, rng, dtype=np.float64)
    assert check_gradients(lambda: inv.forward(t), [t, inv.weight]) < 1e-6
    assert check_gradients(lambda: inv.reverse(t), [t, inv.weight]) < 1e-6


def test_inv1x1_starts_as_rotation():
    inv = Inv1x1(12, np.random.default_rng(0), dtype=np.float64)
    w = inv.weight.data
    np.testing.assert_allclose(w @ w.T, np.eye(12), atol=1e-12)
    assert np.linalg.det(w) == pytest.approx(1.0)


def test_inv1x1_cached_inverse_tracks_updates():
    inv = Inv1x1(3, np.random.default_rng(0), dtype=np.float64)
    first = inv.inverse().copy()
    inv.weight.assign(inv.weight.data * 2)
    np.testing.assert_allclose(inv.inverse(), first / 2)


def test_singular_weight_detected():
    inv = Inv1x1(3, np.random.default_rng(0), dtype=np.float64)
    inv.weight.assign(np.zeros((3, 3)))
    with pytest.raises(SingularWeightError):
        inv.check_det()


def test_training_requires_actnorm_init():
    m = InvertibleTransform(configs.tiny(), Rng(0))
    with pytest.raises(UninitializedError):
        m.forward(np.zeros((1, 3, 16, 16), dtype=np.float32), training=True)


def test_transform_is_part_of_model_state(tmp_path):
    model = CodecModel(configs.tiny(), seed=3)
    model.transform.forward(np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32), init=True)
    path = tmp_path / "m.ivc"
    model.save(path)
    back = CodecModel.load(path)
    assert back.config_hash == model.config_hash
    for (n1, a), (n2, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert n1 == n2 and np.array_equal(a, b)
