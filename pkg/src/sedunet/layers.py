"""Sedenion convolution.

Feature maps use a component-major channel layout: a tensor with ``16*Cg``
channels holds sedenion component ``k`` in channels ``[k*Cg, (k+1)*Cg)``.
A layer owns 16 real kernel banks ``w_0..w_15``; output component ``r`` is

    y_r = sum_c sign[r, c] * conv(x_c, w_{index[r, c]})

which is one real convolution whose ``16Co x 16Ci`` weight has the block
structure of left-multiplication by a sedenion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sedunet.algebra import SignedIndexTable, cayley_dickson_table
from sedunet.tensor import (
    Conv2dSpec,
    Prng,
    conv2d,
    conv2d_backward_cols,
    conv2d_cols,
    im2col,
)

N_COMPONENTS = 16

_TABLE16 = cayley_dickson_table(N_COMPONENTS)


def sedenion_table() -> SignedIndexTable:
    return _TABLE16


# ---------------------------------------------------------------- layout

def component_slice(k: int, cg: int) -> slice:
    return slice(k * cg, (k + 1) * cg)


def split_components(x: np.ndarray) -> np.ndarray:
    """View ``[N, 16*Cg, H, W]`` as ``[N, 16, Cg, H, W]``."""
    n, ch, h, w = x.shape
    if ch % N_COMPONENTS:
        raise ValueError(f"channel count {ch} is not divisible by {N_COMPONENTS}")
    return x.reshape(n, N_COMPONENTS, ch // N_COMPONENTS, h, w)


def merge_components(x: np.ndarray) -> np.ndarray:
    n, k, cg, h, w = x.shape
    return x.reshape(n, k * cg, h, w)


def concat_components(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate two feature maps component by component."""
    return merge_components(np.concatenate([split_components(a), split_components(b)], axis=2))


def split_concat_grad(grad: np.ndarray, cg_a: int) -> tuple[np.ndarray, np.ndarray]:
    g = split_components(grad)
    return (np.ascontiguousarray(merge_components(g[:, :, :cg_a])),
            np.ascontiguousarray(merge_components(g[:, :, cg_a:])))


# ---------------------------------------------------------------- layer

@dataclass(eq=False)
class HxConvLayer:
    """16 kernel banks of shape ``[Co, Ci, kh, kw]`` stacked on axis 0.

    ``spec`` describes one bank, i.e. per-component channel counts.
    """

    spec: Conv2dSpec
    banks: np.ndarray
    bias: np.ndarray | None = None
    table: SignedIndexTable = field(default_factory=sedenion_table)
    grad_banks: np.ndarray = field(init=False)
    grad_bias: np.ndarray | None = field(init=False)

    def __post_init__(self):
        expected = (N_COMPONENTS,) + self.spec.weight_shape
        if self.banks.shape != expected:
            raise ValueError(f"banks shape {self.banks.shape}, expected {expected}")
        if self.table.dim != N_COMPONENTS:
            raise ValueError("sedenion layers need a 16-dimensional table")
        if self.bias is not None and self.bias.shape != (N_COMPONENTS * self.spec.out_channels,):
            raise ValueError(f"bias shape {self.bias.shape} does not match 16*Co")
        self.grad_banks = np.zeros_like(self.banks)
        self.grad_bias = None if self.bias is None else np.zeros_like(self.bias)

    @property
    def full_spec(self) -> Conv2dSpec:
        """Spec of the equivalent real convolution on all 16 components."""
        s = self.spec
        return Conv2dSpec(N_COMPONENTS * s.in_channels, N_COMPONENTS * s.out_channels,
                          s.kernel_h, s.kernel_w, s.stride, s.padding)

    def param_count(self) -> int:
        return hxconv_param_count(self.spec, bias=self.bias is not None)

    def zero_grad(self):
        self.grad_banks[...] = 0
        if self.grad_bias is not None:
            self.grad_bias[...] = 0


def block_weight(table: SignedIndexTable, banks: np.ndarray) -> np.ndarray:
    """Assemble the ``[16Co, 16Ci, kh, kw]`` real weight from the banks."""
    k, co, ci, kh, kw = banks.shape
    gathered = banks[table.index] * table.sign[:, :, None, None, None, None].astype(banks.dtype)
    # gathered: [r, c, Co, Ci, kh, kw] -> [r, Co, c, Ci, kh, kw]
    return gathered.transpose(0, 2, 1, 3, 4, 5).reshape(k * co, k * ci, kh, kw)


def block_weight_grad(table: SignedIndexTable, grad_full: np.ndarray, bank_shape) -> np.ndarray:
    """Fold a gradient w.r.t. the assembled weight back onto the 16 banks."""
    k = table.dim
    co, ci, kh, kw = bank_shape
    g = grad_full.reshape(k, co, k, ci, kh, kw).transpose(0, 2, 1, 3, 4, 5)
    g = g * table.sign[:, :, None, None, None, None].astype(g.dtype)
    out = np.zeros((k,) + tuple(bank_shape), dtype=grad_full.dtype)
    for r in range(k):
        # each row of the table is a permutation, so the fancy-index add is safe
        out[table.index[r]] += g[r]
    return out


def bank_contributions(table: SignedIndexTable) -> list[list[tuple[int, int, int]]]:
    """For each bank m, the ``(r, c, sign)`` terms that use it."""
    terms = [[] for _ in range(table.dim)]
    for r in range(table.dim):
        for c in range(table.dim):
            s, m = table.entry(r, c)
            terms[m].append((r, c, s))
    return terms


def _check_input(layer: HxConvLayer, x: np.ndarray):
    if x.ndim != 4:
        raise ValueError(f"expected NCHW input, got shape {x.shape}")
    if x.shape[1] % N_COMPONENTS:
        raise ValueError(f"channel count {x.shape[1]} is not divisible by {N_COMPONENTS}")
    if x.shape[1] != N_COMPONENTS * layer.spec.in_channels:
        raise ValueError(f"input has {x.shape[1] // N_COMPONENTS} channels per component, "
                         f"layer expects {layer.spec.in_channels}")


def hxconv_forward_cols(layer: HxConvLayer, x: np.ndarray):
    """Forward pass that also returns the im2col matrix for reuse in backward."""
    _check_input(layer, x)
    spec = layer.full_spec
    oh, ow = spec.output_hw(x.shape[2], x.shape[3])
    cols = im2col(x, spec)
    y = conv2d_cols(cols, block_weight(layer.table, layer.banks).astype(x.dtype, copy=False),
                    x.shape[0], oh, ow)
    if layer.bias is not None:
        y += layer.bias.astype(x.dtype).reshape(1, -1, 1, 1)
    return y, cols


def hxconv_forward(layer: HxConvLayer, x: np.ndarray) -> np.ndarray:
    return hxconv_forward_cols(layer, x)[0]


def hxconv_backward_cols(layer: HxConvLayer, cols, x_shape, grad_out):
    spec = layer.full_spec
    weight = block_weight(layer.table, layer.banks).astype(grad_out.dtype, copy=False)
    grad_x, grad_full = conv2d_backward_cols(cols, x_shape, weight, grad_out, spec)
    grad_banks = block_weight_grad(layer.table, grad_full, layer.spec.weight_shape)
    grad_bias = None if layer.bias is None else grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_banks, grad_bias


def hxconv_backward(layer: HxConvLayer, x: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_input, grad_banks, grad_bias)``; ``grad_bias`` is None without bias."""
    _check_input(layer, x)
    spec = layer.full_spec
    oh, ow = spec.output_hw(x.shape[2], x.shape[3])
    expected = (x.shape[0], spec.out_channels, oh, ow)
    if tuple(grad_out.shape) != expected:
        raise ValueError(f"grad_out shape {grad_out.shape}, expected {expected}")
    return hxconv_backward_cols(layer, im2col(x, spec), x.shape, grad_out)


def hxconv_forward_componentwise(layer: HxConvLayer, x: np.ndarray) -> np.ndarray:
    """Reference path: 16x16 small real convolutions, summed with table signs."""
    _check_input(layer, x)
    xs = split_components(x)
    table = layer.table
    out = None
    for r in range(N_COMPONENTS):
        acc = 0
        for c in range(N_COMPONENTS):
            s, m = table.entry(r, c)
            acc = acc + s * conv2d(np.ascontiguousarray(xs[:, c]), layer.banks[m].astype(x.dtype), layer.spec)
        if out is None:
            out = np.empty((x.shape[0], N_COMPONENTS) + acc.shape[1:], dtype=acc.dtype)
        out[:, r] = acc
    y = merge_components(out)
    if layer.bias is not None:
        y = y + layer.bias.astype(x.dtype).reshape(1, -1, 1, 1)
    return y


def glorot_bound(spec: Conv2dSpec) -> float:
    k = spec.kernel_h * spec.kernel_w
    fan_in = N_COMPONENTS * spec.in_channels * k
    fan_out = N_COMPONENTS * spec.out_channels * k
    return math.sqrt(6.0 / (fan_in + fan_out))


def hxconv_init(spec: Conv2dSpec, rng: Prng, scheme: str = "glorot",
                bias: bool = False, dtype=np.float32) -> HxConvLayer:
    """Banks from U(-b, b) with the 16-fold fan terms; zero bias."""
    shape = (N_COMPONENTS,) + spec.weight_shape
    if scheme == "glorot":
        b = glorot_bound(spec)
        banks = rng.uniform(-b, b, shape)
    elif scheme == "zeros":
        banks = np.zeros(shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    bias_arr = np.zeros(N_COMPONENTS * spec.out_channels, dtype=dtype) if bias else None
    return HxConvLayer(spec, banks.astype(dtype), bias_arr)


def hxconv_param_count(spec: Conv2dSpec, bias: bool = False) -> int:
    co, ci, kh, kw = spec.weight_shape
    return N_COMPONENTS * co * ci * kh * kw + (N_COMPONENTS * co if bias else 0)


def real_conv_param_count(spec: Conv2dSpec, bias: bool = False) -> int:
    """Parameters of a real convolution mapping ``16*Ci -> 16*Co`` channels."""
    co, ci, kh, kw = spec.weight_shape
    n = N_COMPONENTS
    return (n * co) * (n * ci) * kh * kw + (n * co if bias else 0)
