import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sedunet.algebra import HyperNumber, hyper_mul, paper_table_16
from sedunet.gradcheck import numeric_grad, rel_error
from sedunet.layers import (
    HxConvLayer,
    bank_contributions,
    concat_components,
    glorot_bound,
    hxconv_backward,
    hxconv_forward,
    hxconv_forward_componentwise,
    hxconv_init,
    hxconv_param_count,
    real_conv_param_count,
    sedenion_table,
    split_concat_grad,
)
from sedunet.tensor import Conv2dSpec, Prng, conv2d

TRANSCRIBED = paper_table_16()


def explicit_block_weight(banks):
    """Big real weight assembled entry by entry from the transcribed table."""
    _, co, ci, kh, kw = banks.shape
    big = np.zeros((16 * co, 16 * ci, kh, kw), dtype=np.float64)
    for r in range(16):
        for c in range(16):
            s, m = TRANSCRIBED.entry(r, c)
            big[r * co:(r + 1) * co, c * ci:(c + 1) * ci] = s * banks[m]
    return big


def random_layer(rng, ci, co, k, stride=1, bias=False):
    spec = Conv2dSpec.square(ci, co, k, stride=stride)
    banks = rng.normal(size=(16,) + spec.weight_shape).astype(np.float32)
    b = rng.normal(size=16 * co).astype(np.float32) if bias else None
    return HxConvLayer(spec, banks, b)


def unit_banks(k, ci=1, co=1):
    banks = np.zeros((16, co, ci, 1, 1), np.float32)
    banks[k, :, :, 0, 0] = np.eye(co, ci)
    return banks


def test_identity_weight():
    layer = HxConvLayer(Conv2dSpec(1, 1, 1, 1), unit_banks(0))
    x = np.random.default_rng(0).normal(size=(2, 16, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(hxconv_forward(layer, x), x)


def test_e1_times_e2_is_e3():
    layer = HxConvLayer(Conv2dSpec(1, 1, 1, 1), unit_banks(1))
    x = np.zeros((1, 16, 4, 4), np.float32)
    x[:, 2] = 1.0
    y = hxconv_forward(layer, x)
    expected = np.zeros_like(x)
    expected[:, 3] = 1.0
    np.testing.assert_array_equal(y, expected)


@pytest.mark.parametrize("seed", range(6))
def test_forward_matches_block_matrix(seed):
    rng = np.random.default_rng(seed)
    ci, co, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3]))
    layer = random_layer(rng, ci, co, k)
    x = rng.normal(size=(2, 16 * ci, 8, 8)).astype(np.float32)
    oracle = conv2d(x.astype(np.float64), explicit_block_weight(layer.banks.astype(np.float64)), layer.full_spec)
    assert np.abs(hxconv_forward(layer, x) - oracle).max() <= 1e-4


def test_forward_matches_componentwise_loop(rng):
    layer = random_layer(rng, 2, 3, 3, stride=2, bias=True)
    x = rng.normal(size=(1, 32, 6, 6)).astype(np.float32)
    np.testing.assert_allclose(hxconv_forward(layer, x), hxconv_forward_componentwise(layer, x), atol=1e-4)


def test_pixelwise_equals_hyper_mul(rng):
    w = rng.normal(size=16)
    banks = w.reshape(16, 1, 1, 1, 1).astype(np.float64)
    layer = HxConvLayer(Conv2dSpec(1, 1, 1, 1), banks)
    x = rng.normal(size=(1, 16, 3, 2))
    y = hxconv_forward(layer, x)
    for i in range(3):
        for j in range(2):
            expected = hyper_mul(HyperNumber(w), HyperNumber(x[0, :, i, j]), sedenion_table())
            np.testing.assert_allclose(y[0, :, i, j], expected.components, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_linearity(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    layer = random_layer(rng, 1, 2, 3)
    x = rng.normal(size=(1, 16, 5, 5)).astype(np.float32)
    z = rng.normal(size=(1, 16, 5, 5)).astype(np.float32)
    lhs = hxconv_forward(layer, (alpha * x + beta * z).astype(np.float32))
    rhs = alpha * hxconv_forward(layer, x) + beta * hxconv_forward(layer, z)
    assert np.abs(lhs - rhs).max() <= 1e-4 * max(1.0, np.abs(rhs).max())


def test_input_validation(rng):
    layer = random_layer(rng, 2, 2, 3)
    with pytest.raises(ValueError, match="divisible"):
        hxconv_forward(layer, np.zeros((1, 30, 4, 4), np.float32))
    with pytest.raises(ValueError, match="per component"):
        hxconv_forward(layer, np.zeros((1, 48, 4, 4), np.float32))
    with pytest.raises(ValueError):
        HxConvLayer(Conv2dSpec(1, 1, 1, 1), np.zeros((15, 1, 1, 1, 1)))


# ---------------------------------------------------------------- backward

def test_backward_zero(rng):
    layer = random_layer(rng, 1, 1, 3, bias=True)
    x = rng.normal(size=(1, 16, 4, 4)).astype(np.float32)
    gx, gb, gbias = hxconv_backward(layer, x, np.zeros((1, 16, 4, 4), np.float32))
    assert not gx.any() and not gb.any() and not gbias.any()


def test_each_bank_used_sixteen_times():
    terms = bank_contributions(sedenion_table())
    assert [len(t) for t in terms] == [16] * 16
    for m, ts in enumerate(terms):
        assert sorted(r for r, _, _ in ts) == list(range(16))
        assert sorted(c for _, c, _ in ts) == list(range(16))


def test_backward_matches_contribution_formula(rng):
    layer = random_layer(rng, 1, 2, 3)
    x = rng.normal(size=(1, 16, 5, 5))
    g = rng.normal(size=(1, 32, 5, 5))
    layer64 = HxConvLayer(layer.spec, layer.banks.astype(np.float64))
    _, gb, _ = hxconv_backward(layer64, x, g)
    from sedunet.tensor import conv2d_backward
    for m, ts in enumerate(bank_contributions(sedenion_table())):
        acc = 0
        for r, c, s in ts:
            _, gw = conv2d_backward(x[:, c:c + 1], layer64.banks[m], g[:, 2 * r:2 * r + 2], layer.spec)
            acc = acc + s * gw
        np.testing.assert_allclose(gb[m], acc, atol=1e-10)


@pytest.mark.parametrize("stride,bias", [(1, False), (1, True), (2, False)])
def test_backward_finite_differences(rng, stride, bias):
    layer = random_layer(rng, 1, 1, 3, stride=stride, bias=bias)
    x = rng.normal(size=(1, 16, 4, 4)).astype(np.float32)
    y = hxconv_forward(layer, x)
    g = rng.normal(size=y.shape).astype(np.float32)
    gx, gb, gbias = hxconv_backward(layer, x, g)

    banks64 = layer.banks.astype(np.float64)
    bias64 = None if layer.bias is None else layer.bias.astype(np.float64)
    layer64 = HxConvLayer(layer.spec, banks64, bias64)
    x64, g64 = x.astype(np.float64), g.astype(np.float64)
    f = lambda: np.sum(hxconv_forward(layer64, x64) * g64)
    assert rel_error(gx, numeric_grad(f, x64)) <= 1e-2
    assert rel_error(gb, numeric_grad(f, banks64)) <= 1e-2
    if bias:
        assert rel_error(gbias, numeric_grad(f, bias64)) <= 1e-2


# ---------------------------------------------------------------- init / counts

def test_init_bound_and_determinism():
    spec = Conv2dSpec.square(4, 3, 3)
    a = hxconv_init(spec, Prng(7))
    b = hxconv_init(spec, Prng(7))
    np.testing.assert_array_equal(a.banks, b.banks)
    assert np.abs(a.banks).max() < glorot_bound(spec)
    assert a.bias is None
    assert not hxconv_init(spec, Prng(7), bias=True).bias.any()


def test_init_variance():
    spec = Conv2dSpec.square(16, 16, 3)
    layer = hxconv_init(spec, Prng(0))
    assert layer.banks.size >= 10_000
    b = glorot_bound(spec)
    assert b == pytest.approx(np.sqrt(6 / (2 * 16 * 16 * 9)))
    assert abs(layer.banks.var() / (b * b / 3) - 1) <= 0.2


def test_param_counts():
    spec = Conv2dSpec.square(16, 16, 3)
    assert hxconv_param_count(spec) == 36_864
    assert real_conv_param_count(spec) == 589_824
    assert hxconv_param_count(Conv2dSpec(1, 1, 1, 1)) == 16
    assert hxconv_param_count(Conv2dSpec.square(4, 8, 3), bias=True) - hxconv_param_count(Conv2dSpec.square(4, 8, 3)) == 128


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 7), st.integers(1, 7))
def test_param_ratio_is_sixteen(ci, co, kh, kw):
    spec = Conv2dSpec(ci, co, kh, kw)
    assert real_conv_param_count(spec) == 16 * hxconv_param_count(spec)
    layer = HxConvLayer(spec, np.zeros((16,) + spec.weight_shape, np.float32))
    assert layer.param_count() == layer.banks.size == hxconv_param_count(spec)


def test_component_concat_layout(rng):
    a = rng.normal(size=(2, 16 * 3, 4, 4))
    b = rng.normal(size=(2, 16 * 2, 4, 4))
    cat = concat_components(a, b)
    assert cat.shape == (2, 80, 4, 4)
    for k in range(16):
        np.testing.assert_array_equal(cat[:, 5 * k:5 * k + 3], a[:, 3 * k:3 * k + 3])
        np.testing.assert_array_equal(cat[:, 5 * k + 3:5 * k + 5], b[:, 2 * k:2 * k + 2])
    ga, gb = split_concat_grad(cat, 3)
    np.testing.assert_array_equal(ga, a)
    np.testing.assert_array_equal(gb, b)
