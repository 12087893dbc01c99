import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sedunet.gradcheck import numeric_grad, rel_error
from sedunet.tensor import (
    Conv2dSpec,
    Prng,
    avgpool2x,
    batchnorm_backward,
    batchnorm_forward,
    check_finite,
    NonFiniteError,
    conv2d,
    conv2d_backward,
    flat_index,
    relu,
    relu_backward,
    upsample2x,
    upsample2x_backward,
)


def loop_conv(x, w, stride, pad):
    """Six nested loops, float64."""
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def test_conv_identity_1x1(rng):
    x = rng.normal(size=(2, 3, 5, 4)).astype(np.float32)
    w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(conv2d(x, w, Conv2dSpec(3, 3, 1, 1)), x)


def test_conv_ones_kernel_constant_input():
    x = np.full((1, 1, 6, 6), 2.5, dtype=np.float32)
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    y = conv2d(x, w, Conv2dSpec(1, 1, 3, 3))
    np.testing.assert_allclose(y, 9 * 2.5)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_loop_oracle(rng, stride, pad):
    x = rng.normal(size=(2, 2, 5, 5)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    y = conv2d(x, w, Conv2dSpec(2, 3, 3, 3, stride, pad))
    np.testing.assert_allclose(y, loop_conv(x, w, stride, pad), atol=1e-5)


def test_conv_rectangular_kernel(rng):
    x = rng.normal(size=(1, 2, 6, 7)).astype(np.float32)
    w = rng.normal(size=(2, 2, 2, 3)).astype(np.float32)
    np.testing.assert_allclose(conv2d(x, w, Conv2dSpec(2, 2, 2, 3, 1, 1)), loop_conv(x, w, 1, 1), atol=1e-5)


def test_stride2_output_shapes_exhaustive():
    for h in range(1, 10):
        for w in range(1, 10):
            for k, pad in [(1, 0), (3, 1)]:
                spec = Conv2dSpec(1, 1, k, k, 2, pad)
                expected = ((h + 2 * pad - k) // 2 + 1, (w + 2 * pad - k) // 2 + 1)
                y = conv2d(np.ones((1, 1, h, w), np.float32), np.ones((1, 1, k, k), np.float32), spec)
                assert y.shape[2:] == expected


def test_conv_errors():
    with pytest.raises(ValueError):
        conv2d(np.ones((1, 2, 4, 4), np.float32), np.ones((1, 3, 3, 3), np.float32), Conv2dSpec(3, 1, 3, 3))
    with pytest.raises(ValueError, match="zero-sized"):
        conv2d(np.ones((1, 1, 2, 2), np.float32), np.ones((1, 1, 3, 3), np.float32), Conv2dSpec(1, 1, 3, 3))


def test_conv_backward_zero_grad(rng):
    x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
    w = rng.normal(size=(2, 2, 3, 3)).astype(np.float32)
    spec = Conv2dSpec(2, 2, 3, 3, 1, 1)
    gx, gw = conv2d_backward(x, w, np.zeros((1, 2, 4, 4), np.float32), spec)
    assert not gx.any() and not gw.any()


def test_conv_backward_scalar():
    x = np.array([[[[3.0]]]], np.float32)
    w = np.array([[[[-2.0]]]], np.float32)
    gx, gw = conv2d_backward(x, w, np.array([[[[5.0]]]], np.float32), Conv2dSpec(1, 1, 1, 1))
    assert gw.item() == 15.0
    assert gx.item() == -10.0


@pytest.mark.parametrize("shape,k,stride,pad", [
    ((2, 3, 5, 5), 3, 1, 1),
    ((1, 2, 6, 6), 3, 2, 1),
    ((2, 2, 4, 6), 1, 1, 0),
    ((1, 4, 6, 5), 2, 2, 0),
])
def test_conv_backward_finite_differences(rng, shape, k, stride, pad):
    n, ci, h, w = shape
    co = 3
    spec = Conv2dSpec(ci, co, k, k, stride, pad)
    x = rng.normal(size=shape).astype(np.float32)
    wt = rng.normal(size=spec.weight_shape).astype(np.float32)
    g = rng.normal(size=conv2d(x, wt, spec).shape).astype(np.float32)
    gx, gw = conv2d_backward(x, wt, g, spec)

    x64, w64, g64 = x.astype(np.float64), wt.astype(np.float64), g.astype(np.float64)
    f = lambda: np.sum(conv2d(x64, w64, spec) * g64)
    assert rel_error(gx, numeric_grad(f, x64)) <= 1e-3
    assert rel_error(gw, numeric_grad(f, w64)) <= 1e-3


# ---------------------------------------------------------------- batch norm

def bn_params(c, dtype=np.float32):
    return np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype)


def test_bn_identity_on_standardized_input(rng):
    x = rng.normal(size=(4, 2, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    x = x.astype(np.float32)
    y, _ = batchnorm_forward(x, *bn_params(2), train=True, eps=1e-10)
    assert np.abs(y - x).max() <= 1e-5


def test_bn_constant_beta(rng):
    g, b, rm, rv = bn_params(3)
    g[:] = 0
    b[:] = 5
    y, _ = batchnorm_forward(rng.normal(size=(2, 3, 4, 4)).astype(np.float32), g, b, rm, rv)
    np.testing.assert_allclose(y, 5.0)


def test_bn_train_statistics(rng):
    x = (3 + 2 * rng.normal(size=(4, 3, 6, 6))).astype(np.float32)
    y, _ = batchnorm_forward(x, *bn_params(3), train=True)
    assert np.abs(y.mean(axis=(0, 2, 3))).max() <= 1e-5
    var = y.var(axis=(0, 2, 3))
    assert np.all((var >= 1 - 1e-3) & (var <= 1 + 1e-3))


def test_bn_running_stats_and_eval(rng):
    x = (3 + 2 * rng.normal(size=(4, 2, 5, 5))).astype(np.float32)
    g, b, rm, rv = bn_params(2)
    batchnorm_forward(x, g, b, rm, rv, train=True, momentum=0.1)
    m = x.size // 2
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1), rtol=1e-5)
    y, _ = batchnorm_forward(x, g, b, rm, rv, train=False)
    np.testing.assert_allclose(y, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5),
                               rtol=1e-5, atol=1e-5)


def test_bn_errors():
    x = np.zeros((1, 2, 2, 2), np.float32)
    with pytest.raises(ValueError):
        batchnorm_forward(x, *bn_params(2), eps=0)
    with pytest.raises(ValueError):
        batchnorm_forward(x, *bn_params(3))


def test_bn_backward_zero_and_beta(rng):
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    _, cache = batchnorm_forward(x, *bn_params(3))
    gx, gg, gb = batchnorm_backward(cache, np.zeros_like(x))
    assert not gx.any() and not gg.any() and not gb.any()
    g = rng.normal(size=x.shape).astype(np.float32)
    _, _, gb = batchnorm_backward(cache, g)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)), rtol=1e-5)
    with pytest.raises(ValueError):
        batchnorm_backward(cache, np.zeros((1, 3, 4, 4), np.float32))


@pytest.mark.parametrize("train", [True, False])
def test_bn_backward_finite_differences(rng, train):
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    gamma = rng.uniform(0.5, 1.5, 3).astype(np.float32)
    beta = rng.normal(size=3).astype(np.float32)
    rm, rv = rng.normal(size=3).astype(np.float32), rng.uniform(0.5, 2, 3).astype(np.float32)
    g = rng.normal(size=x.shape).astype(np.float32)
    _, cache = batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), train=train)
    gx, gg, gb = batchnorm_backward(cache, g)

    x64, ga64, be64, g64 = (a.astype(np.float64) for a in (x, gamma, beta, g))

    def f():
        y, _ = batchnorm_forward(x64, ga64, be64, rm.astype(np.float64), rv.astype(np.float64), train=train)
        return np.sum(y * g64)

    assert rel_error(gx, numeric_grad(f, x64)) <= 1e-2
    assert rel_error(gg, numeric_grad(f, ga64)) <= 1e-2
    assert rel_error(gb, numeric_grad(f, be64)) <= 1e-2


# ---------------------------------------------------------------- relu / upsample

def test_relu():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert relu_backward(np.array([0.0]), np.array([7.0]))[0] == 0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
def test_relu_abs_identity(vals):
    x = np.array(vals)
    np.testing.assert_array_equal(relu(x) + relu(-x), np.abs(x))


def test_relu_backward_finite_differences(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    x[np.abs(x) < 1e-2] = 0.5                      # keep away from the kink
    g = rng.normal(size=x.shape)
    x64 = x.copy()
    assert rel_error(relu_backward(x, g), numeric_grad(lambda: np.sum(relu(x64) * g), x64, 1e-4)) <= 1e-2


def test_upsample():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    y = upsample2x(x)
    assert y.shape == (1, 1, 4, 4)
    np.testing.assert_array_equal(y[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    np.testing.assert_array_equal(upsample2x_backward(np.ones((1, 1, 4, 4))), np.full((1, 1, 2, 2), 4.0))


def test_upsample_then_avgpool_is_identity(rng):
    x = rng.normal(size=(2, 3, 3, 5))
    np.testing.assert_allclose(avgpool2x(upsample2x(x)), x)


def test_upsample_adjoint(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    g = rng.normal(size=(1, 2, 6, 6))
    assert np.isclose(np.sum(upsample2x(x) * g), np.sum(x * upsample2x_backward(g)))


# ---------------------------------------------------------------- misc

def test_flat_index_roundtrip(rng):
    shape = (2, 3, 4, 5)
    x = np.arange(np.prod(shape)).reshape(shape)
    flat = x.reshape(-1)
    for _ in range(50):
        n, c, h, w = (int(rng.integers(0, s)) for s in shape)
        assert flat[flat_index(shape, n, c, h, w)] == x[n, c, h, w]


def test_check_finite():
    check_finite(np.ones(3))
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.inf]))


def test_prng_determinism():
    a, b = Prng(42), Prng(42)
    np.testing.assert_array_equal(a.uniform(-1, 1, 100), b.uniform(-1, 1, 100))
    np.testing.assert_array_equal(Prng(42).spawn(3).permutation(10), Prng(42).spawn(3).permutation(10))
    assert not np.array_equal(Prng(42).spawn(3).random(5), Prng(42).spawn(4).random(5))
