"""FS-Net: a full-scale encoder-decoder for thin-structure segmentation.

The network is a residual U-Net whose downsampling transitions can be
replaced by encoder boosters (channel-concat fusion followed by an
atrous convolution, so micro-scale detail survives pooling), whose
bottleneck-to-decoder hop can be routed through a bottleneck
enhancement block (upsample + normalized convolution, no dense skip
fan-out), and whose residual blocks can be followed by
squeeze-and-excitation channel gates.  All three additions are
independently switchable, which yields the ablation ladder
BL -> +EB -> +BE -> +SE.

Stage widths double per stage from ``base_channels`` up to a cap; the
defaults were tuned so the fully-enabled configuration lands close to
7.1 M parameters.  The head is a 1x1 convolution to one channel with no
activation; inputs whose extents are not multiples of ``2**depth`` are
reflection-padded before the encoder and center-cropped after the
decoder, so output shape always equals input shape.
"""

from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import ops, serialize
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Architecture hyperparameters, ablation switches, and output-path switches."""

    in_channels: int = 1
    base_channels: int = 32
    depth: int = 4
    channel_multiplier: int = 2
    max_channels: int = 256
    dilation_rate: int = 2
    dropout_rate: float = 0.2
    leaky_slope: float = 0.01
    se_reduction: int = 8
    enable_encoder_booster: bool = True
    enable_bottleneck_enhancement: bool = True
    enable_se: bool = True
    enable_smoothing: bool = True
    enable_adaptive_threshold: bool = False
    upsample_mode: str = "nearest"

    def stage_widths(self):
        return [
            min(self.base_channels * self.channel_multiplier**i, self.max_channels)
            for i in range(self.depth)
        ]

    def bottleneck_width(self):
        return min(self.base_channels * self.channel_multiplier**self.depth, self.max_channels)

    def validate(self):
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.channel_multiplier < 1:
            raise ValueError(f"channel_multiplier must be >= 1, got {self.channel_multiplier}")
        if self.dilation_rate < 1:
            raise ValueError(f"dilation_rate must be >= 1, got {self.dilation_rate}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must be in [0, 1), got {self.leaky_slope}")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsample_mode {self.upsample_mode!r}")
        if self.enable_se:
            for width in self.stage_widths() + [self.bottleneck_width()]:
                if self.se_reduction < 1 or width % self.se_reduction != 0:
                    raise ValueError(
                        f"se_reduction {self.se_reduction} does not divide stage width {width}"
                    )
        return self

    def to_fields(self):
        fields = OrderedDict()
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            fields[f.name] = str(value).lower() if isinstance(value, bool) else str(value)
        return fields

    @classmethod
    def from_fields(cls, fields):
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in fields.items():
            if key not in known:
                raise ValueError(f"unknown model config field {key!r}")
            kwargs[key] = coerce_field(known[key].type, raw, key)
        return cls(**kwargs).validate()


def coerce_field(annotation, raw, key):
    """Parse a manifest string into the annotated config field type."""
    name = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", "")
    if name == "bool":
        low = str(raw).strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"field {key!r}: cannot parse bool from {raw!r}")
    if name == "int":
        return int(raw)
    if name == "float":
        return float(raw)
    return str(raw)


# ---------------------------------------------------------------------------
# minimal module system


class Module:
    """Container tracking parameters, buffers, and submodules by attribute."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for mod in self._modules.values():
            mod.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_arrays(self):
        """Ordered name -> ndarray map of parameters followed by buffers."""
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_arrays(self, state):
        own = self.state_arrays()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in self.named_parameters():
            if p.data.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {state[name].shape}")
            p.data[...] = state[name].astype(p.data.dtype)
        for name, b in self.named_buffers():
            b[...] = state[name].astype(b.dtype)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for mod in modules:
            self.append(mod)

    def append(self, mod):
        self._modules[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _kaiming_normal(rng, shape, fan_in, slope=0.0):
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    std = gain / math.sqrt(fan_in)
    return rng.normal(0.0, std, size=shape)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, dilation=1,
                 bias=True, slope=0.0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(
            _kaiming_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in, slope),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float64))

    def __call__(self, x):
        return ops.batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.eps, self.momentum,
        )


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=False):
        super().__init__()
        self.weight = Tensor(
            _kaiming_normal(rng, (out_features, in_features), in_features), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# building blocks


class ResidualBlock(Module):
    """Two conv-BN-leaky-ReLU units plus an identity/projection shortcut.

    Dropout sits between the two units and exists only on the encoder
    side; decoder blocks have no dropout at all, so their outputs never
    depend on the dropout rate.
    """

    def __init__(self, in_ch, out_ch, rng, slope=0.01, dropout_rate=0.2, is_encoder=True):
        super().__init__()
        self.slope = slope
        self.is_encoder = is_encoder
        self.dropout_rate = dropout_rate if is_encoder else 0.0
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, padding=1, bias=False, slope=slope)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, padding=1, bias=False, slope=slope)
        self.bn2 = BatchNorm2d(out_ch)
        if in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng, bias=False, slope=slope)
            self.proj_bn = BatchNorm2d(out_ch)
        else:
            self.proj = None
            self.proj_bn = None

    def __call__(self, x, rng=None):
        h = ops.leaky_relu(self.bn1(self.conv1(x)), self.slope)
        if self.dropout_rate > 0.0:
            h = ops.dropout(h, self.dropout_rate, self.training, rng)
        h = ops.leaky_relu(self.bn2(self.conv2(h)), self.slope)
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x))
        return h + shortcut


class EncoderBooster(Module):
    """Fusion path between consecutive encoder stages.

    Concatenates the current encoder output with the previous booster
    output (the raw model input for the first booster), applies an
    atrous convolution so the fused receptive field widens without
    losing resolution, then max-pools down to the next stage.
    """

    def __init__(self, enc_ch, carry_ch, rng, dilation=2, slope=0.01):
        super().__init__()
        self.slope = slope
        self.dilation = dilation
        self.conv = Conv2d(
            enc_ch + carry_ch, enc_ch, 3, rng,
            padding=dilation, dilation=dilation, bias=False, slope=slope,
        )
        self.bn = BatchNorm2d(enc_ch)

    def __call__(self, enc_out, carry):
        fused = ops.concat_channels([enc_out, carry])
        fused = ops.leaky_relu(self.bn(self.conv(fused)), self.slope)
        return ops.max_pool2d(fused, 2)


class BottleneckEnhancement(Module):
    """Upsample plus normalized convolution between bottleneck and decoder.

    Feeds exactly one decoder stage; there is no dense skip fan-out.
    """

    def __init__(self, channels, rng, mode="nearest", slope=0.01):
        super().__init__()
        self.mode = mode
        self.conv = Conv2d(channels, channels, 3, rng, padding=1, bias=False, slope=slope)
        self.bn = BatchNorm2d(channels)

    def __call__(self, x):
        return self.bn(self.conv(ops.upsample2d(x, 2, self.mode)))


class SEBlock(Module):
    """Channel gate: global average pool, two linear layers, sigmoid scale."""

    def __init__(self, channels, reduction, rng):
        super().__init__()
        if channels % reduction != 0:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        self.fc1 = Linear(channels, channels // reduction, rng, bias=False)
        self.fc2 = Linear(channels // reduction, channels, rng, bias=False)

    def __call__(self, x):
        squeezed = ops.global_avg_pool(x)
        gate = ops.sigmoid(self.fc2(ops.relu(self.fc1(squeezed))))
        return ops.scale_channels(x, gate)


class FSNet(Module):
    """The assembled network; see the module docstring for the wiring."""

    def __init__(self, config: ModelConfig, seed=0):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        widths = config.stage_widths()
        bneck = config.bottleneck_width()
        slope = config.leaky_slope

        encoders = ModuleList()
        boosters = ModuleList()
        carry_ch = config.in_channels
        in_ch = config.in_channels
        for width in widths:
            encoders.append(
                ResidualBlock(in_ch, width, rng, slope, config.dropout_rate, is_encoder=True)
            )
            if config.enable_encoder_booster:
                boosters.append(
                    EncoderBooster(width, carry_ch, rng, config.dilation_rate, slope)
                )
            carry_ch = width
            in_ch = width
        self.encoders = encoders
        self.boosters = boosters

        self.bottleneck = ResidualBlock(
            widths[-1], bneck, rng, slope, config.dropout_rate, is_encoder=True
        )

        if config.enable_bottleneck_enhancement:
            self.enhance = BottleneckEnhancement(bneck, rng, config.upsample_mode, slope)
        else:
            self.enhance = None

        decoders = ModuleList()
        up_ch = bneck
        for width in reversed(widths):
            decoders.append(
                ResidualBlock(up_ch + width, width, rng, slope,
                              config.dropout_rate, is_encoder=False)
            )
            up_ch = width
        self.decoders = decoders

        if config.enable_se:
            self.enc_se = ModuleList(
                SEBlock(w, config.se_reduction, rng) for w in widths
            )
            self.bottleneck_se = SEBlock(bneck, config.se_reduction, rng)
            self.dec_se = ModuleList(
                SEBlock(w, config.se_reduction, rng) for w in reversed(widths)
            )
        else:
            self.enc_se = None
            self.bottleneck_se = None
            self.dec_se = None

        self.head = Conv2d(widths[0], 1, 1, rng, bias=True)

    def _spatial_pads(self, h, w):
        m = 2**self.config.depth
        th = math.ceil(h / m) * m
        tw = math.ceil(w / m) * m
        pt = (th - h) // 2
        pl = (tw - w) // 2
        return pt, th - h - pt, pl, tw - w - pl

    def forward(self, x, rng=None):
        """Per-pixel logits at input resolution; no output activation."""
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (N, {self.config.in_channels}, H, W) input, got {x.shape}"
            )
        n, c, h, w = x.shape
        pt, pb, pl, pr = self._spatial_pads(h, w)
        if pt >= h or pb >= h or pl >= w or pr >= w:
            raise ValueError(f"input {h}x{w} too small for depth {self.config.depth}")
        cur = ops.reflect_pad2d(x, (pt, pb, pl, pr))

        skips = []
        carry = cur
        for i, enc in enumerate(self.encoders):
            e = enc(cur, rng)
            if self.enc_se is not None:
                e = self.enc_se[i](e)
            skips.append(e)
            if self.config.enable_encoder_booster:
                cur = self.boosters[i](e, carry)
                carry = cur
            else:
                cur = ops.max_pool2d(e, 2)

        cur = self.bottleneck(cur, rng)
        if self.bottleneck_se is not None:
            cur = self.bottleneck_se(cur)

        for j, dec in enumerate(self.decoders):
            i = self.config.depth - 1 - j
            if j == 0 and self.enhance is not None:
                up = self.enhance(cur)
            else:
                up = ops.upsample2d(cur, 2, self.config.upsample_mode)
            cur = dec(ops.concat_channels([up, skips[i]]), rng)
            if self.dec_se is not None:
                cur = self.dec_se[j](cur)

        logits = self.head(cur)
        return ops.crop2d(logits, pt, pl, h, w)

    __call__ = forward


# ---------------------------------------------------------------------------
# complexity accounting


@dataclass
class ComplexityReport:
    total_params: int
    flops: int | None = None
    input_shape: tuple | None = None


def count_params(config: ModelConfig) -> ComplexityReport:
    """Exact trainable-parameter count by enumeration (buffers excluded)."""
    model = FSNet(config, seed=0)
    total = sum(p.size for p in model.parameters())
    return ComplexityReport(total_params=int(total))


def _conv_flops(cin, cout, k, h, w, bias=False):
    flops = 2 * cin * cout * k * k * h * w
    if bias:
        flops += cout * h * w
    return flops


# documented per-element costs for non-MAC layers
_BN_COST = 4
_ACT_COST = 1
_SIGMOID_COST = 4
_BILINEAR_COST = 6


def _res_block_flops(cin, cout, h, w):
    flops = _conv_flops(cin, cout, 3, h, w) + (_BN_COST + _ACT_COST) * cout * h * w
    flops += _conv_flops(cout, cout, 3, h, w) + (_BN_COST + _ACT_COST) * cout * h * w
    if cin != cout:
        flops += _conv_flops(cin, cout, 1, h, w) + _BN_COST * cout * h * w
    flops += cout * h * w  # residual add
    return flops


def _se_flops(c, reduction, h, w):
    flops = c * h * w  # global average pool
    flops += 2 * c * (c // reduction)  # fc1
    flops += _ACT_COST * (c // reduction)
    flops += 2 * (c // reduction) * c  # fc2
    flops += _SIGMOID_COST * c
    flops += c * h * w  # channel scale
    return flops


def _upsample_flops(c, h_out, w_out, mode):
    return _BILINEAR_COST * c * h_out * w_out if mode == "bilinear" else 0


def count_flops(config: ModelConfig, input_shape) -> ComplexityReport:
    """Analytic per-sample FLOPs for a (C, H, W) input.

    Convolutions and linear layers cost 2 FLOPs per multiply-accumulate;
    batch norm costs 4 per element, activations 1 (sigmoid 4), max pool
    ``kernel**2`` comparisons per output, bilinear upsampling 6 per
    output element, nearest upsampling 0.
    """
    config.validate()
    if len(input_shape) == 2:
        c_in, (h, w) = config.in_channels, input_shape
    else:
        c_in, h, w = input_shape
    if c_in != config.in_channels:
        raise ValueError(f"input shape has {c_in} channels, config expects {config.in_channels}")
    m = 2**config.depth
    h = math.ceil(h / m) * m
    w = math.ceil(w / m) * m

    widths = config.stage_widths()
    bneck = config.bottleneck_width()
    flops = 0
    ch = c_in
    carry_ch = c_in
    sizes = []
    for width in widths:
        flops += _res_block_flops(ch, width, h, w)
        if config.enable_se:
            flops += _se_flops(width, config.se_reduction, h, w)
        sizes.append((h, w))
        if config.enable_encoder_booster:
            flops += _conv_flops(width + carry_ch, width, 3, h, w)
            flops += (_BN_COST + _ACT_COST) * width * h * w
        flops += 4 * width * (h // 2) * (w // 2)  # 2x2 max pool
        carry_ch = width
        ch = width
        h, w = h // 2, w // 2

    flops += _res_block_flops(ch, bneck, h, w)
    if config.enable_se:
        flops += _se_flops(bneck, config.se_reduction, h, w)

    up_ch = bneck
    for j, width in enumerate(reversed(widths)):
        h, w = h * 2, w * 2
        if j == 0 and config.enable_bottleneck_enhancement:
            flops += _upsample_flops(up_ch, h, w, config.upsample_mode)
            flops += _conv_flops(up_ch, up_ch, 3, h, w) + _BN_COST * up_ch * h * w
        else:
            flops += _upsample_flops(up_ch, h, w, config.upsample_mode)
        flops += _res_block_flops(up_ch + width, width, h, w)
        if config.enable_se:
            flops += _se_flops(width, config.se_reduction, h, w)
        up_ch = width

    flops += _conv_flops(widths[0], 1, 1, h, w, bias=True)
    params = count_params(config).total_params
    return ComplexityReport(total_params=params, flops=int(flops), input_shape=tuple(input_shape))


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_save(model: FSNet, path):
    """Write config manifest plus all parameters and buffers to one file."""
    serialize.save_checkpoint(path, model.config.to_fields(), model.state_arrays())


def checkpoint_load(path):
    """Rebuild the model from a checkpoint written by :func:`checkpoint_save`."""
    manifest, tensors = serialize.load_checkpoint(path)
    config = ModelConfig.from_fields(manifest)
    model = FSNet(config, seed=0)
    model.load_state_arrays(tensors)
    model.eval()
    return model
