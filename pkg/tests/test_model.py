from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defect_yolo import tensor as T
from defect_yolo.errors import ArgumentError, ConfigError, DimensionError
from defect_yolo.model import (PConv, PredGrid, ResC2Net, SPPF, Detector, ModelConfig, decode, forward,
                               pconv, resc2net_block, sppf)


def zero_params(module):
    for _, p in module.named_parameters():
        p.data[...] = 0.0


def rand(shape, seed=0):
    return T.Tensor(np.random.default_rng(seed).normal(size=shape))


# ---------------------------------------------------------------- resc2net

def test_resc2net_zero_weights_is_identity():
    block = ResC2Net(np.random.default_rng(0), 8, 4)
    zero_params(block)
    x = rand((1, 8, 5, 5))
    np.testing.assert_array_equal(resc2net_block(x, 4, block).data, x.data)


def test_resc2net_shape():
    block = ResC2Net(np.random.default_rng(0), 64, 4)
    assert block(rand((1, 64, 16, 16))).shape == (1, 64, 16, 16)


def test_resc2net_matches_op_recomposition():
    with T.default_dtype(np.float64):
        block = ResC2Net(np.random.default_rng(3), 4, 2)
        x = rand((1, 4, 4, 4), seed=1)
        got = block(x).data

        def conv(layer, t):
            y = T.conv2d(t, layer.weight, layer.bias, layer.stride, layer.padding)
            return T.leaky_relu(y)

        h = conv(block.conv_in, x)
        s1 = T.Tensor(h.data[:, :2])
        s2 = T.Tensor(h.data[:, 2:])
        y2 = T.add(s2, conv(block.branches[0], T.add(s2, s1)))
        ref = T.add(x, conv(block.conv_out, T.concat([s1, y2], axis=1)))
    np.testing.assert_allclose(got, ref.data, atol=1e-12)


def test_resc2net_bad_split():
    with pytest.raises(DimensionError):
        ResC2Net(np.random.default_rng(0), 6, 4)


# ---------------------------------------------------------------- pconv

def test_pconv_full_ratio_is_plain_conv():
    layer = PConv(np.random.default_rng(0), 4, Fraction(1))
    x = rand((1, 4, 6, 6))
    ref = T.conv2d(x, layer.conv.weight, layer.conv.bias, 1, 1)
    np.testing.assert_array_equal(pconv(x, layer).data, ref.data)


def test_pconv_zero_weights_quarter():
    layer = PConv(np.random.default_rng(0), 8, Fraction(1, 4))
    zero_params(layer)
    x = rand((1, 8, 4, 4))
    y = layer(x).data
    assert np.all(y[:, :2] == 0)
    np.testing.assert_array_equal(y[:, 2:], x.data[:, 2:])


def test_pconv_parameter_count():
    layer = PConv(np.random.default_rng(0), 64, Fraction(1, 4))
    assert layer.conv.weight.size == 16 * 16 * 9
    assert Fraction(layer.conv.weight.size, 64 * 64 * 9) == Fraction(1, 16)


def test_pconv_non_integer_channels():
    with pytest.raises(DimensionError):
        PConv(np.random.default_rng(0), 6, Fraction(1, 4))


# ---------------------------------------------------------------- sppf

def test_sppf_constant_input():
    layer = SPPF(np.random.default_rng(0), 3)
    pre = layer.branches(T.Tensor(np.full((1, 3, 5, 5), 2.5)))
    assert pre.shape == (1, 12, 5, 5)
    assert np.all(pre.data == 2.5)


def test_sppf_channel_counts():
    layer = SPPF(np.random.default_rng(0), 8, (5, 9, 13))
    x = rand((1, 8, 6, 6))
    assert layer.branches(x).shape[1] == 32
    assert sppf(x, layer).shape == (1, 8, 6, 6)


def test_sppf_branches_match_standalone_pools():
    layer = SPPF(np.random.default_rng(0), 2)
    x = rand((1, 2, 7, 7), seed=4)
    pre = layer.branches(x).data
    np.testing.assert_array_equal(pre[:, :2], x.data)
    for k_idx, k in enumerate((5, 9, 13)):
        ref = T.maxpool2d(x, k, 1, (k - 1) // 2).data
        np.testing.assert_array_equal(pre[:, 2 * (k_idx + 1):2 * (k_idx + 2)], ref)


def test_sppf_even_kernel():
    with pytest.raises(ArgumentError):
        SPPF(np.random.default_rng(0), 2, (4,))


# ---------------------------------------------------------------- full model

@pytest.fixture(scope="module")
def model160():
    return Detector(ModelConfig(input_size=160, num_classes=7, width=8))


def test_forward_grid_shapes(model160):
    with T.no_grad():
        grids = model160(T.Tensor(np.zeros((1, 1, 160, 160))))
    assert [(g.stride, g.tensor.shape) for g in grids] == [
        (8, (1, 12, 20, 20)), (16, (1, 12, 10, 10)), (32, (1, 12, 5, 5))]


def test_forward_batch_independence():
    x = np.random.default_rng(5).uniform(size=(2, 1, 160, 160))
    with T.default_dtype(np.float64), T.no_grad():
        m = Detector(ModelConfig(input_size=160, num_classes=7, width=8))
        both = m(T.Tensor(x))
        singles = [m(T.Tensor(x[k:k + 1])) for k in range(2)]
    for s, g in enumerate(both):
        for k in range(2):
            np.testing.assert_allclose(g.tensor.data[k], singles[k][s].tensor.data[0], rtol=0, atol=1e-10)


def test_forward_zero_weights_gives_half_objectness():
    m = Detector(ModelConfig(input_size=64, num_classes=2, width=8))
    zero_params(m)
    with T.no_grad():
        grids = m(T.Tensor(np.random.default_rng(0).uniform(size=(1, 1, 64, 64))))
    for g in grids:
        assert np.all(T.sigmoid(T.Tensor(g.tensor.data[:, 4])).data == 0.5)


def test_forward_wrong_size(model160):
    with pytest.raises(DimensionError):
        model160(T.Tensor(np.zeros((1, 1, 128, 128))))
    with pytest.raises(DimensionError):
        model160(T.Tensor(np.zeros((1, 3, 160, 160))))


def test_forward_deterministic_from_seed():
    cfg = ModelConfig(input_size=64, num_classes=3, width=8, seed=11)
    x = T.Tensor(np.random.default_rng(1).uniform(size=(1, 1, 64, 64)))
    with T.no_grad():
        a = forward(Detector(cfg), x)
        b = forward(Detector(cfg), x)
    for ga, gb in zip(a, b):
        np.testing.assert_array_equal(ga.tensor.data, gb.tensor.data)


def test_every_parameter_receives_gradient():
    m = Detector(ModelConfig(input_size=64, num_classes=3, width=8))
    x = T.Tensor(np.random.default_rng(2).uniform(size=(1, 1, 64, 64)))
    rng = np.random.default_rng(3)
    with T.Tape() as tape:
        grids = m(x)
        loss = T.sum(T.mul(grids[0].tensor, T.Tensor(rng.normal(size=grids[0].tensor.shape))))
        for g in grids[1:]:
            loss = T.add(loss, T.sum(T.mul(g.tensor, T.Tensor(rng.normal(size=g.tensor.shape)))))
    tape.backward(loss)
    for name, p in m.parameters().items():
        assert p.grad is not None and np.any(p.grad != 0), name


@settings(max_examples=15, deadline=None)
@given(width=st.sampled_from([4, 8, 16]), n=st.sampled_from([1, 2, 4]),
       denom=st.sampled_from([1, 2, 4]), size=st.sampled_from([32, 64, 96]), classes=st.integers(1, 9))
def test_shape_contract_over_configs(width, n, denom, size, classes):
    if width % n or width % denom:
        return
    cfg = ModelConfig(input_size=size, num_classes=classes, width=width, resc2net_n=n,
                      pconv_ratio=Fraction(1, denom))
    m = Detector(cfg)
    with T.no_grad():
        grids = m(T.Tensor(np.zeros((1, 1, size, size))))
    for g, s in zip(grids, cfg.strides):
        assert g.tensor.shape == (1, 5 + classes, size // s, size // s)
    x = rand((1, width, 6, 6))
    assert m.block3(x).shape == x.shape
    assert m.pconv3(rand((1, 3 * width, 6, 6))).shape == (1, 3 * width, 6, 6)
    assert m.sppf.branches(rand((1, 4 * width, 3, 3))).shape[1] == 4 * 4 * width


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(input_size=100)
    with pytest.raises(ConfigError):
        ModelConfig(width=6, resc2net_n=4)
    with pytest.raises(ConfigError):
        ModelConfig(strides=(8, 16))
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"depth": 3})


def test_config_round_trip():
    cfg = ModelConfig(input_size=128, num_classes=2, width=8, pconv_ratio=Fraction(1, 2), seed=4)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- decode

def grid_with(values, stride=8, size=2, classes=1):
    raw = np.zeros((1, 5 + classes, size, size))
    for (ch, i, j), v in values.items():
        raw[0, ch, i, j] = v
    return PredGrid(stride, T.Tensor(raw, dtype=np.float64))


def test_decode_default_cell():
    boxes = decode(grid_with({}), 0)
    first = boxes[0]
    assert (first.cx, first.cy, first.w, first.h) == (4.0, 4.0, 8.0, 8.0)
    assert len(boxes) == 4


def test_decode_suppressed_objectness():
    boxes = decode(grid_with({(4, 0, 0): -50.0}), 0, conf_thresh=1e-6)
    assert all((b.cx, b.cy) != (4.0, 4.0) for b in boxes)
    assert len(boxes) == 3


def test_decode_clamps_size():
    b = decode(grid_with({(2, 0, 0): 100.0}), 0)[0]
    assert b.w == pytest.approx(np.exp(8.0) * 8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_decoded_boxes_respect_cell(seed):
    raw = np.random.default_rng(seed).normal(scale=3, size=(1, 8, 4, 4))
    for b in decode(PredGrid(16, T.Tensor(raw, dtype=np.float64)), 0):
        assert b.w > 0 and b.h > 0 and 0 < b.score < 1
        j, i = int(b.cx // 16), int(b.cy // 16)
        assert 0 <= i < 4 and 0 <= j < 4
