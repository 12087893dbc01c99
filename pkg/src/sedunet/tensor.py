"""Dense real kernels with explicit backward passes.

Tensors are plain numpy arrays in NCHW, row-major order. Only ``uint8`` and
``float32`` are storage dtypes; every kernel also runs in ``float64`` so
gradient checks can be done at oracle precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STORAGE_DTYPES = {"u8": np.dtype(np.uint8), "f32": np.dtype(np.float32)}

# Reductions larger than this accumulate in float64.
_WIDE_SUM_THRESHOLD = 4096


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what} has {bad} non-finite values")
    return x


def flat_index(shape, n: int, c: int, h: int, w: int) -> int:
    """Row-major offset of ``(n, c, h, w)`` in a tensor of ``shape``."""
    _, C, H, W = shape
    return ((n * C + c) * H + h) * W + w


def _channel_sum(x: np.ndarray) -> np.ndarray:
    """Sum over (N, H, W) per channel, widening the accumulator for big reductions."""
    per_channel = x.size // x.shape[1]
    if x.dtype == np.float32 and per_channel > _WIDE_SUM_THRESHOLD:
        return x.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    return x.sum(axis=(0, 2, 3))


class Prng:
    """Seeded generator; numpy's PCG64 behind a fixed seed.

    The same seed yields the same stream on any platform numpy supports.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def spawn(self, key: int) -> "Prng":
        """Independent child stream, reproducible from ``(seed, key)``."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Prng(int(ss.generate_state(1, np.uint64)[0]))


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w) < 1:
            raise ValueError(f"channels and kernel sizes must be positive: {self}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad stride/padding: {self}")

    @classmethod
    def square(cls, cin, cout, k, stride=1, padding=None):
        return cls(cin, cout, k, k, stride, k // 2 if padding is None else padding)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"zero-sized output for input {h}x{w} with {self}")
        return oh, ow

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)


def _check_conv_shapes(x, weight, spec):
    if x.ndim != 4:
        raise ValueError(f"conv input must be NCHW, got shape {x.shape}")
    if tuple(weight.shape) != spec.weight_shape:
        raise ValueError(f"weight shape {weight.shape} does not match {spec.weight_shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")


def im2col(x: np.ndarray, spec: Conv2dSpec) -> np.ndarray:
    """Patches as a ``[Ci*kh*kw, N*H'*W']`` matrix."""
    n, ci, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    p, s = spec.padding, spec.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((ci, spec.kernel_h, spec.kernel_w, n, oh, ow), dtype=x.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            patch = xp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(ci * spec.kernel_h * spec.kernel_w, n * oh * ow)


def col2im(cols: np.ndarray, x_shape, spec: Conv2dSpec) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to an NCHW image."""
    n, ci, h, w = x_shape
    oh, ow = spec.output_hw(h, w)
    p, s = spec.padding, spec.stride
    cols = cols.reshape(ci, spec.kernel_h, spec.kernel_w, n, oh, ow)
    xp = np.zeros((n, ci, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            xp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += \
                cols[:, i, j].transpose(1, 0, 2, 3)
    return xp[:, :, p:p + h, p:p + w] if p else xp


def conv2d_cols(cols, weight, n, oh, ow):
    out = weight.reshape(weight.shape[0], -1) @ cols
    return np.ascontiguousarray(out.reshape(weight.shape[0], n, oh, ow).transpose(1, 0, 2, 3))


def conv2d(x: np.ndarray, weight: np.ndarray, spec: Conv2dSpec) -> np.ndarray:
    """Cross-correlation with zero padding (no kernel flip)."""
    _check_conv_shapes(x, weight, spec)
    oh, ow = spec.output_hw(x.shape[2], x.shape[3])
    return conv2d_cols(im2col(x, spec), weight, x.shape[0], oh, ow)


def conv2d_backward_cols(cols, x_shape, weight, grad_out, spec):
    co = weight.shape[0]
    g = grad_out.transpose(1, 0, 2, 3).reshape(co, -1)
    grad_w = (g @ cols.T).reshape(weight.shape)
    grad_x = col2im(weight.reshape(co, -1).T @ g, x_shape, spec)
    return grad_x, grad_w


def conv2d_backward(x, weight, grad_out, spec: Conv2dSpec):
    """Returns ``(grad_input, grad_weight)`` for :func:`conv2d`."""
    _check_conv_shapes(x, weight, spec)
    oh, ow = spec.output_hw(x.shape[2], x.shape[3])
    expected = (x.shape[0], spec.out_channels, oh, ow)
    if tuple(grad_out.shape) != expected:
        raise ValueError(f"grad_out shape {grad_out.shape}, expected {expected}")
    return conv2d_backward_cols(im2col(x, spec), x.shape, weight, grad_out, spec)


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train=True,
                      momentum=0.1, eps=1e-5):
    """Per-channel batch norm over (N, H, W).

    In train mode ``running_mean``/``running_var`` are updated in place
    (unbiased variance, as most frameworks do).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ValueError(f"{name} has shape {arr.shape}, input has {c} channels")
    bshape = (1, c, 1, 1)
    if train:
        m = x.size // c
        mean = _channel_sum(x) / m
        xc = x - mean.reshape(bshape)
        var = _channel_sum(xc * xc) / m
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
        xc = x - mean.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = xc * inv_std.reshape(bshape)
    out = x_hat * gamma.reshape(bshape).astype(x.dtype) + beta.reshape(bshape).astype(x.dtype)
    return out, BatchNormCache(x_hat, inv_std, gamma, train)


def batchnorm_backward(cache: BatchNormCache, grad_out):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    if grad_out.shape != cache.x_hat.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match cache {cache.x_hat.shape}")
    c = grad_out.shape[1]
    bshape = (1, c, 1, 1)
    grad_beta = _channel_sum(grad_out)
    grad_gamma = _channel_sum(grad_out * cache.x_hat)
    scale = (cache.gamma * cache.inv_std).astype(grad_out.dtype).reshape(bshape)
    if not cache.train:
        return grad_out * scale, grad_gamma, grad_beta
    m = grad_out.size // c
    grad_x = scale * (grad_out
                      - (grad_beta / m).reshape(bshape)
                      - cache.x_hat * (grad_gamma / m).reshape(bshape))
    return grad_x, grad_gamma, grad_beta


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    # gradient at exactly 0 is 0
    return grad_out * (x > 0)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def upsample2x_backward(grad_out):
    n, c, h2, w2 = grad_out.shape
    return grad_out.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def avgpool2x(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
