"""Sedenion U-Net for multi-frame grid forecasting.

Input packing puts learned static features in sedenion component 0, the 12
past frames in components 1..12 (oldest first) and zeros in 13..15. The
network's last sedenion layer emits 16 components of ``out_channels_per_frame``
channels; forecast horizons are read off fixed components.

Every module caches what its backward needs during ``forward``; gradients
accumulate into ``module.grads`` until ``zero_grad``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from sedunet import layers as L
from sedunet.layers import N_COMPONENTS
from sedunet.tensor import (
    Conv2dSpec,
    Prng,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward_cols,
    conv2d_cols,
    im2col,
    relu,
    relu_backward,
    upsample2x,
    upsample2x_backward,
)


@dataclass
class ModelConfig:
    in_dynamic_channels: int = 9
    in_static_channels: int = 7
    out_channels_per_frame: int = 8
    frames_in: int = 12
    frames_out: int = 6
    depth: int = 3
    per_component_widths: list = field(default_factory=lambda: [16, 32, 64, 64])
    blocks_per_group: int = 1
    upsample: str = "nearest"
    output_components: list = field(default_factory=lambda: [1, 2, 3, 6, 9, 12])
    final_bias: bool = True
    head_init: str = "zeros"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.per_component_widths = [int(w) for w in self.per_component_widths]
        self.output_components = [int(k) for k in self.output_components]
        if self.frames_in != 12:
            raise ValueError("frames_in must be 12: one sedenion component per past frame")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if len(self.per_component_widths) != self.depth + 1:
            raise ValueError(f"per_component_widths needs depth+1 = {self.depth + 1} entries")
        if min(self.per_component_widths) < 1:
            raise ValueError("widths must be positive")
        if self.blocks_per_group < 1:
            raise ValueError("blocks_per_group must be at least 1")
        if self.head_init not in ("zeros", "glorot"):
            raise ValueError(f"unknown head_init {self.head_init!r}")
        if self.upsample != "nearest":
            raise ValueError(f"unsupported upsample mode {self.upsample!r}")
        if len(self.output_components) != self.frames_out:
            raise ValueError("output_components must list one component per output frame")
        for k in self.output_components:
            if not 0 <= k < N_COMPONENTS:
                raise ValueError(f"output component {k} outside [0, 15]")
            if not 1 <= k <= self.frames_in:
                raise ValueError(f"output component {k} is not one of the frame components 1..12")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def spatial_multiple(self) -> int:
        return 2 ** self.depth


TINY_CONFIG = dict(depth=2, per_component_widths=[8, 16, 16])


# ---------------------------------------------------------------- modules

class Module:
    """Minimal container: named params, matching grads, buffers, children."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add_param(self, name, value):
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def add(self, name, module):
        self.children[name] = module
        return module

    def named_params(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_params(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {name: p for name, p, _ in self.named_params()}
        out.update(dict(self.named_buffers()))
        return out

    def zero_grad(self):
        for _, _, g in self.named_params():
            g[...] = 0

    def param_count(self) -> int:
        return sum(p.size for _, p, _ in self.named_params())

    def astype(self, dtype):
        """Convert parameters, grads and buffers in place (used by gradient checks)."""
        for name in self.params:
            self.params[name] = self.params[name].astype(dtype)
            self.grads[name] = self.grads[name].astype(dtype)
        for name in self.buffers:
            self.buffers[name] = self.buffers[name].astype(dtype)
        for child in self.children.values():
            child.astype(dtype)
        self._sync()
        return self

    def _sync(self):
        pass


class Conv(Module):
    """Real convolution (used only in the static-input block)."""

    def __init__(self, spec: Conv2dSpec, rng: Prng, bias=False, dtype=np.float32):
        super().__init__()
        self.spec = spec
        co, ci, kh, kw = spec.weight_shape
        b = math.sqrt(6.0 / ((ci + co) * kh * kw))
        self.add_param("weight", rng.uniform(-b, b, spec.weight_shape).astype(dtype))
        self.has_bias = bias
        if bias:
            self.add_param("bias", np.zeros(co, dtype=dtype))

    def forward(self, x, train=True):
        oh, ow = self.spec.output_hw(x.shape[2], x.shape[3])
        cols = im2col(x, self.spec)
        y = conv2d_cols(cols, self.params["weight"], x.shape[0], oh, ow)
        if self.has_bias:
            y += self.params["bias"].reshape(1, -1, 1, 1)
        self._cache = (cols, x.shape)
        return y

    def backward(self, g):
        cols, shape = self._cache
        gx, gw = conv2d_backward_cols(cols, shape, self.params["weight"], g, self.spec)
        self.grads["weight"] += gw
        if self.has_bias:
            self.grads["bias"] += g.sum(axis=(0, 2, 3))
        return gx


class HxConv(Module):
    def __init__(self, cin, cout, k, rng: Prng, stride=1, bias=False, dtype=np.float32):
        super().__init__()
        spec = Conv2dSpec.square(cin, cout, k, stride=stride)
        self.layer = L.hxconv_init(spec, rng, bias=bias, dtype=dtype)
        self.add_param("banks", self.layer.banks)
        if bias:
            self.add_param("bias", self.layer.bias)
        self._sync()

    def _sync(self):
        # HxConvLayer shares storage with the param dict
        self.layer.banks = self.params["banks"]
        if "bias" in self.params:
            self.layer.bias = self.params["bias"]

    def forward(self, x, train=True):
        y, cols = L.hxconv_forward_cols(self.layer, x)
        self._cache = (cols, x.shape)
        return y

    def backward(self, g):
        cols, shape = self._cache
        gx, gb, gbias = L.hxconv_backward_cols(self.layer, cols, shape, g)
        self.grads["banks"] += gb
        if gbias is not None:
            self.grads["bias"] += gbias
        return gx


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=True):
        y, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train=train, momentum=self.momentum, eps=self.eps)
        return y

    def backward(self, g):
        gx, gg, gb = batchnorm_backward(self._cache, g)
        self.grads["gamma"] += gg
        self.grads["beta"] += gb
        return gx


class BNReLU(Module):
    def __init__(self, channels, cfg: ModelConfig, dtype=np.float32):
        super().__init__()
        self.bn = self.add("bn", BatchNorm(channels, cfg.bn_momentum, cfg.bn_eps, dtype))

    def forward(self, x, train=True):
        self._pre = self.bn.forward(x, train)
        return relu(self._pre)

    def backward(self, g):
        return self.bn.backward(relu_backward(self._pre, g))


class LearnVectorBlock(Module):
    """Real conv3x3(7->9) -> BN -> ReLU -> conv3x3(9->9), spatial size kept."""

    def __init__(self, cfg: ModelConfig, rng: Prng, dtype=np.float32):
        super().__init__()
        cin, cout = cfg.in_static_channels, cfg.in_dynamic_channels
        self.cin = cin
        self.conv1 = self.add("conv1", Conv(Conv2dSpec.square(cin, cout, 3), rng, dtype=dtype))
        self.act = self.add("act", BNReLU(cout, cfg, dtype))
        self.conv2 = self.add("conv2", Conv(Conv2dSpec.square(cout, cout, 3), rng, bias=True, dtype=dtype))

    def forward(self, static, train=True):
        if static.ndim != 4 or static.shape[1] != self.cin:
            raise ValueError(f"static input must be [N, {self.cin}, H, W], got {static.shape}")
        return self.conv2.forward(self.act.forward(self.conv1.forward(static, train), train), train)

    def backward(self, g):
        return self.conv1.backward(self.act.backward(self.conv2.backward(g)))

    @staticmethod
    def count(cfg: ModelConfig) -> int:
        cin, cout = cfg.in_static_channels, cfg.in_dynamic_channels
        return cin * cout * 9 + 2 * cout + cout * cout * 9 + cout


class ResBlock(Module):
    """Pre-activation residual block of sedenion convolutions."""

    def __init__(self, cin, cout, cfg, rng, dtype=np.float32):
        super().__init__()
        self.act1 = self.add("act1", BNReLU(N_COMPONENTS * cin, cfg, dtype))
        self.conv1 = self.add("conv1", HxConv(cin, cout, 3, rng, dtype=dtype))
        self.act2 = self.add("act2", BNReLU(N_COMPONENTS * cout, cfg, dtype))
        self.conv2 = self.add("conv2", HxConv(cout, cout, 3, rng, dtype=dtype))
        self.proj = self.add("proj", HxConv(cin, cout, 1, rng, dtype=dtype)) if cin != cout else None

    def forward(self, x, train=True):
        h = self.conv1.forward(self.act1.forward(x, train), train)
        h = self.conv2.forward(self.act2.forward(h, train), train)
        return h + (self.proj.forward(x, train) if self.proj else x)

    def backward(self, g):
        gx = self.act1.backward(self.conv1.backward(self.act2.backward(self.conv2.backward(g))))
        return gx + (self.proj.backward(g) if self.proj else g)

    @staticmethod
    def count(cin, cout) -> int:
        n = N_COMPONENTS
        total = 2 * n * cin + 2 * n * cout          # two BN layers
        total += n * cout * cin * 9 + n * cout * cout * 9
        if cin != cout:
            total += n * cout * cin
        return total


class EncoderGroup(Module):
    def __init__(self, cin, cout, cfg, rng, dtype=np.float32):
        super().__init__()
        self.blocks = [self.add(f"block{i}", ResBlock(cin if i == 0 else cout, cout, cfg, rng, dtype))
                       for i in range(cfg.blocks_per_group)]
        self.pool = self.add("pool", HxConv(cout, cout, 3, rng, stride=2, dtype=dtype))

    def forward(self, x, train=True):
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"cannot pool odd spatial size {h}x{w}")
        for b in self.blocks:
            x = b.forward(x, train)
        return self.pool.forward(x, train), x

    def backward(self, g_out, g_skip):
        g = self.pool.backward(g_out) + g_skip
        for b in reversed(self.blocks):
            g = b.backward(g)
        return g

    @staticmethod
    def count(cin, cout, cfg) -> int:
        blocks = ResBlock.count(cin, cout) + (cfg.blocks_per_group - 1) * ResBlock.count(cout, cout)
        return blocks + N_COMPONENTS * cout * cout * 9


class CodeBlock(Module):
    def __init__(self, cin, cout, cfg, rng, dtype=np.float32):
        super().__init__()
        self.act = self.add("act", BNReLU(N_COMPONENTS * cin, cfg, dtype))
        self.conv = self.add("conv", HxConv(cin, cout, 3, rng, dtype=dtype))

    def forward(self, x, train=True):
        return self.conv.forward(self.act.forward(x, train), train)

    def backward(self, g):
        return self.act.backward(self.conv.backward(g))

    @staticmethod
    def count(cin, cout) -> int:
        return 2 * N_COMPONENTS * cin + N_COMPONENTS * cout * cin * 9


class DecoderGroup(Module):
    """Upsample, concatenate with the skip per component, reduce, residual block."""

    def __init__(self, cin, cskip, cout, cfg, rng, dtype=np.float32):
        super().__init__()
        self.cin = cin
        self.reduce = self.add("reduce", HxConv(cin + cskip, cout, 3, rng, dtype=dtype))
        self.block = self.add("block", ResBlock(cout, cout, cfg, rng, dtype))

    def forward(self, x, skip, train=True):
        up = upsample2x(x)
        if up.shape[2:] != skip.shape[2:]:
            raise ValueError(f"upsampled size {up.shape[2:]} does not match skip {skip.shape[2:]}")
        h = self.reduce.forward(L.concat_components(up, skip), train)
        return self.block.forward(h, train)

    def backward(self, g):
        g = self.reduce.backward(self.block.backward(g))
        g_up, g_skip = L.split_concat_grad(g, self.cin)
        return upsample2x_backward(g_up), g_skip

    @staticmethod
    def count(cin, cskip, cout) -> int:
        return N_COMPONENTS * cout * (cin + cskip) * 9 + ResBlock.count(cout, cout)


class SedUNet(Module):
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = Prng(cfg.seed)
        widths = cfg.per_component_widths
        d = cfg.depth
        self.learn_vector = self.add("learn_vector", LearnVectorBlock(cfg, rng, dtype))
        self.encoders = []
        cin = cfg.in_dynamic_channels
        for i in range(d):
            self.encoders.append(self.add(f"enc{i}", EncoderGroup(cin, widths[i], cfg, rng, dtype)))
            cin = widths[i]
        self.code = self.add("code", CodeBlock(widths[d - 1], widths[d], cfg, rng, dtype))
        self.decoders = []
        cin = widths[d]
        for i in reversed(range(d)):
            self.decoders.append(self.add(f"dec{i}", DecoderGroup(cin, widths[i], widths[i], cfg, rng, dtype)))
            cin = widths[i]
        self.head = self.add("head", HxConv(widths[0], cfg.out_channels_per_frame, 1, rng,
                                            bias=cfg.final_bias, dtype=dtype))
        if cfg.head_init == "zeros":
            # untrained model predicts all zeros instead of unit-scale noise
            self.head.params["banks"][...] = 0

    def forward(self, static, dynamic, train=True):
        m = self.cfg.spatial_multiple
        h, w = static.shape[2:]
        if h % m or w % m:
            raise ValueError(f"spatial size {h}x{w} is not divisible by 2^depth = {m}")
        feats = self.learn_vector.forward(static, train)
        x = pack_input(feats, dynamic, self.cfg)
        skips = []
        for enc in self.encoders:
            x, skip = enc.forward(x, train)
            skips.append(skip)
        x = self.code.forward(x, train)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec.forward(x, skip, train)
        return self.head.forward(x, train)

    def backward(self, grad_out):
        """Accumulate parameter gradients; returns the gradient w.r.t. the static input."""
        g = self.head.backward(grad_out)
        g_skips = []
        # decoders[-1] ran last and pairs with the shallowest encoder
        for dec in reversed(self.decoders):
            g, gs = dec.backward(g)
            g_skips.append(gs)
        g = self.code.backward(g)
        for enc, gs in zip(reversed(self.encoders), reversed(g_skips)):
            g = enc.backward(g, gs)
        g_static_feats = np.ascontiguousarray(g[:, L.component_slice(0, self.cfg.in_dynamic_channels)])
        return self.learn_vector.backward(g_static_feats)

    def predict(self, static, dynamic):
        return select_outputs(self.forward(static, dynamic, train=False), self.cfg)


# ---------------------------------------------------------------- functional surface

def learn_vector_block(block: LearnVectorBlock, static, train=False):
    return block.forward(static, train)


def pack_input(static_features: np.ndarray, dynamic: np.ndarray, cfg: ModelConfig | None = None):
    """``[N, 9, H, W]`` static features + ``[N, 12, 9, H, W]`` frames -> ``[N, 144, H, W]``."""
    cfg = cfg or ModelConfig()
    cg = cfg.in_dynamic_channels
    if static_features.ndim != 4 or static_features.shape[1] != cg:
        raise ValueError(f"static features must be [N, {cg}, H, W], got {static_features.shape}")
    if dynamic.ndim != 5 or dynamic.shape[1] != cfg.frames_in or dynamic.shape[2] != cg:
        raise ValueError(f"dynamic input must be [N, {cfg.frames_in}, {cg}, H, W], got {dynamic.shape}")
    n, _, h, w = static_features.shape
    if dynamic.shape[0] != n or dynamic.shape[3:] != (h, w):
        raise ValueError("static and dynamic inputs disagree on batch or spatial size")
    packed = np.zeros((n, N_COMPONENTS, cg, h, w), dtype=static_features.dtype)
    packed[:, 0] = static_features
    packed[:, 1:1 + cfg.frames_in] = dynamic
    return L.merge_components(packed)


def unet_forward(model: SedUNet, static, dynamic, train=False):
    return model.forward(static, dynamic, train)


def select_outputs(net_out: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Pick the horizon components: ``[N, 16*Co, H, W] -> [N, frames_out, Co, H, W]``."""
    comps = split_components(net_out, cfg)
    idx = list(cfg.output_components)
    for k in idx:
        if not 0 <= k < N_COMPONENTS:
            raise ValueError(f"output component {k} outside [0, 15]")
    return comps[:, idx]


def select_outputs_backward(grad: np.ndarray, cfg: ModelConfig, like: np.ndarray) -> np.ndarray:
    out = np.zeros_like(like)
    split_components(out, cfg)[:, list(cfg.output_components)] = grad
    return out


def split_components(net_out, cfg):
    co = cfg.out_channels_per_frame
    if net_out.ndim != 4 or net_out.shape[1] != N_COMPONENTS * co:
        raise ValueError(f"expected [N, {N_COMPONENTS * co}, H, W], got {net_out.shape}")
    return L.split_components(net_out)


def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form trainable parameter counts per top-level block."""
    widths, d = cfg.per_component_widths, cfg.depth
    out = {"learn_vector": LearnVectorBlock.count(cfg)}
    cin = cfg.in_dynamic_channels
    for i in range(d):
        out[f"enc{i}"] = EncoderGroup.count(cin, widths[i], cfg)
        cin = widths[i]
    out["code"] = CodeBlock.count(widths[d - 1], widths[d])
    cin = widths[d]
    for i in reversed(range(d)):
        out[f"dec{i}"] = DecoderGroup.count(cin, widths[i], widths[i])
        cin = widths[i]
    co = cfg.out_channels_per_frame
    out["head"] = N_COMPONENTS * co * widths[0] + (N_COMPONENTS * co if cfg.final_bias else 0)
    return out


def model_param_count(cfg: ModelConfig) -> int:
    return sum(param_breakdown(cfg).values())
