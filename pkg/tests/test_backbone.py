import numpy as np
import pytest

from adcpnet import tensor as T
from adcpnet.backbone import (
    extract_features,
    init_backbone,
    init_residual_block,
    init_unary,
    pyramid_channels,
    residual_block,
    stage1_unary,
)
from adcpnet.gradcheck import finite_diff_check
from adcpnet.model import named_parameters
from adcpnet.tensor import Tensor


def _zero(params):
    for _, t in named_parameters(params):
        t.data[...] = 0
    return params


def test_zero_block_is_leaky_skip(rng):
    p = _zero(init_residual_block(rng, 3, 3, 1, np.float64))
    x = rng.normal(size=(3, 5, 6))
    out = residual_block(Tensor(x), p).data
    assert np.array_equal(out, np.where(x > 0, x, 0.1 * x))


def test_stride_two_halves_extent(rng):
    p = init_residual_block(rng, 1, 1, 2, np.float64)
    assert residual_block(Tensor(rng.normal(size=(1, 8, 8))), p, stride=2).shape == (1, 4, 4)
    with pytest.raises(ValueError):
        residual_block(Tensor(rng.normal(size=(1, 7, 8))), p, stride=2)
    with pytest.raises(ValueError):
        residual_block(Tensor(rng.normal(size=(1, 8, 8))), p, stride=3)


@pytest.mark.parametrize("stride,c_out", [(1, 2), (2, 3)])
def test_block_gradients(rng, stride, c_out):
    p = init_residual_block(rng, 2, c_out, stride, np.float64)
    x = Tensor(rng.uniform(-1, 1, (2, 6, 6)))
    out_shape = residual_block(x, p, stride).shape
    r = rng.uniform(-1, 1, out_shape)
    f = lambda t: T.tsum(T.mul(residual_block(t, p, stride), r))  # noqa: E731
    assert finite_diff_check(f, x) < 1e-4
    g = lambda _: T.tsum(T.mul(residual_block(x, p, stride), r))  # noqa: E731
    assert finite_diff_check(g, p.w1) < 1e-4
    assert finite_diff_check(g, p.b2) < 1e-4


@pytest.mark.parametrize("C,expected", [(4, (8, 8, 16, 32)), (2, (4, 4, 8, 16)), (8, (16, 16, 32, 64))])
def test_pyramid_channels(C, expected):
    assert pyramid_channels(C) == expected


@pytest.mark.parametrize("C,H,W", [(2, 32, 48), (4, 16, 16), (1, 64, 32)])
def test_pyramid_shapes(rng, C, H, W):
    p = init_backbone(rng, C, np.float64)
    pyr = extract_features(Tensor(rng.uniform(-1, 1, (3, H, W))), p)
    chans = pyramid_channels(C)
    for f, c, s in zip((pyr.f2, pyr.f4, pyr.f8, pyr.f16), chans, (2, 4, 8, 16)):
        assert f.shape == (c, H // s, W // s)


def test_indivisible_input_rejected(rng):
    p = init_backbone(rng, 1, np.float64)
    with pytest.raises(ValueError):
        extract_features(Tensor(np.zeros((3, 24, 32))), p)


def test_shared_weights_identical_inputs(rng):
    p = init_backbone(rng, 2, np.float64)
    img = rng.uniform(-1, 1, (3, 32, 32))
    both = extract_features(Tensor(np.stack([img, img])), p)
    assert np.array_equal(both.f16.data[0], both.f16.data[1])
    single = extract_features(Tensor(img), p)
    assert np.allclose(single.f4.data, both.f4.data[0], atol=1e-12)


def test_stage1_unary_shape_zero_and_gradient(rng):
    u = init_unary(rng, 1, np.float64)
    x = Tensor(rng.uniform(-1, 1, (8, 3, 4)))
    assert stage1_unary(x, u).shape == (8, 3, 4)
    r = rng.uniform(-1, 1, (8, 3, 4))
    assert finite_diff_check(lambda t: T.tsum(T.mul(stage1_unary(t, u), r)), x) < 1e-4
    _zero(u)
    expect = np.where(x.data > 0, x.data, 0.1 * x.data)
    expect = np.where(expect > 0, expect, 0.1 * expect)
    assert np.allclose(stage1_unary(x, u).data, expect)
