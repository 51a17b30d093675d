"""Gated linear dilated residual encoder.

An encoder is a dimensionality-reduction conv followed by residual blocks.
Each block is ``x + conv_b(conv_a(x))`` where ``conv_a`` carries the block
dilation with kernel 3 and ``conv_b`` is pointwise.  Trailing refinement
blocks of the long presets are pointwise in both convs, so the receptive
field of a preset is ``1 + 2 * (1 + sum of ramp dilations)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import ConfigError, Parameter, add, as_tensor, conv1d, dropout, glu, relu

ACTIVATIONS = ("glu", "relu", "none")
INIT_SCHEMES = ("fan-in-uniform", "zero-residual")


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    dilation: int = 1
    activation: str = "glu"
    input_dropout: float = 0.0

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"channel counts must be positive: {self}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd and positive, got {self.kernel_size}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.input_dropout < 1.0:
            raise ConfigError(f"input dropout must be in [0, 1), got {self.input_dropout}")

    @property
    def pre_channels(self) -> int:
        """Channels emitted by the convolution before the activation."""
        return 2 * self.out_channels if self.activation == "glu" else self.out_channels

    @property
    def span(self) -> int:
        return (self.kernel_size - 1) * self.dilation


@dataclass(frozen=True)
class ResidualBlockSpec:
    conv_a: ConvLayerSpec
    conv_b: ConvLayerSpec
    residual: bool = True

    def __post_init__(self):
        width = self.conv_a.in_channels
        if not (self.conv_a.out_channels == self.conv_b.in_channels == self.conv_b.out_channels == width):
            raise ConfigError("residual block convs must share one channel width")

    @property
    def width(self) -> int:
        return self.conv_a.in_channels

    @property
    def dilation(self) -> int:
        return self.conv_a.dilation


@dataclass(frozen=True)
class GLDRConfig:
    reduction: ConvLayerSpec
    blocks: tuple[ResidualBlockSpec, ...] = ()
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        width = self.reduction.out_channels
        for i, blk in enumerate(self.blocks):
            if blk.width != width:
                raise ConfigError(f"block {i} width {blk.width} does not chain from {width}")

    @property
    def depth(self) -> int:
        return 1 + 2 * len(self.blocks)

    @property
    def width(self) -> int:
        return self.reduction.out_channels

    @property
    def in_channels(self) -> int:
        return self.reduction.in_channels

    def convs(self):
        yield self.reduction
        for blk in self.blocks:
            yield blk.conv_a
            yield blk.conv_b


def block(width, dilation, kernel_size=3, kernel_size_b=1, activation="glu", dropout_rate=0.0, residual=True):
    a = ConvLayerSpec(width, width, kernel_size, dilation, activation, dropout_rate)
    b = ConvLayerSpec(width, width, kernel_size_b, dilation, activation, dropout_rate)
    return ResidualBlockSpec(a, b, residual)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

# name -> (ramp dilations, pointwise refinement blocks, width, input dropout)
_PRESETS = {
    "bidaf-contextual-5": ((1, 2), 0, 100, 0.2),
    "bidaf-modeling-17": ((1, 2, 4, 8, 16), 3, 100, 0.2),
    "bidaf-output-3": ((1,), 0, 100, 0.2),
    "drqa-query-17": ((1,) * 8, 0, 128, 0.3),
    "drqa-passage-9": ((1, 2, 4, 8), 0, 128, 0.3),
    "drqa-passage-13": ((1, 2, 4, 8, 16, 32), 0, 128, 0.3),
}
_ALIASES = {name.rsplit("-", 1)[0]: name for name in _PRESETS if name != "drqa-passage-13"}

PRESET_NAMES = tuple(_PRESETS)


def make_preset(
    name: str,
    in_channels: int | None = None,
    width: int | None = None,
    activation: str = "glu",
    dilated: bool = True,
    residual: bool = True,
    input_dropout: float | None = None,
) -> GLDRConfig:
    """Build a named configuration.

    The keyword arguments override the preset width, the input width
    (defaults to the hidden width) and switch on the ablation variants.
    """
    key = _ALIASES.get(name, name)
    if key not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    ramp, refine, w, drop = _PRESETS[key]
    w = width or w
    drop = drop if input_dropout is None else input_dropout
    if not dilated:
        ramp = (1,) * len(ramp)
    blocks = [block(w, d, activation=activation, dropout_rate=drop, residual=residual) for d in ramp]
    blocks += [
        block(w, 1, kernel_size=1, activation=activation, dropout_rate=drop, residual=residual) for _ in range(refine)
    ]
    reduction = ConvLayerSpec(in_channels or w, w, 3, 1, activation, drop)
    return GLDRConfig(reduction, tuple(blocks), key)


def doubling_config(num_blocks: int, width: int = 100, in_channels: int | None = None, name=None) -> GLDRConfig:
    """Reduction conv plus ``num_blocks`` blocks with dilations 1, 2, 4, ..."""
    blocks = tuple(block(width, 2**i) for i in range(num_blocks))
    reduction = ConvLayerSpec(in_channels or width, width, 3, 1, "glu")
    return GLDRConfig(reduction, blocks, name or f"doubling-{1 + 2 * num_blocks}")


# ---------------------------------------------------------------------------
# Receptive field
# ---------------------------------------------------------------------------

CONVENTIONS = ("c1", "configured", "full")


def receptive_field(config: GLDRConfig, convention: str = "c1") -> int:
    """Width in tokens of the input window that reaches one output position.

    ``c1`` counts the reduction conv and each block's first conv at their
    configured kernel and dilation.  ``configured`` counts every conv as
    configured (the true field of the network).  ``full`` counts both convs
    of every block at kernel 3 and the block dilation.
    """
    red = config.reduction.span
    if convention == "c1":
        return 1 + red + sum(b.conv_a.span for b in config.blocks)
    if convention == "configured":
        return 1 + sum(c.span for c in config.convs())
    if convention == "full":
        return 1 + red + sum(2 * 2 * b.dilation for b in config.blocks)
    raise ConfigError(f"unknown receptive-field convention {convention!r}")


def layer_table(config: GLDRConfig) -> list[dict]:
    """Per-conv rows with running receptive fields, for diagnostics."""
    rows = []
    c1 = full = 1

    def row(layer, kind, spec, c1_span, full_span):
        nonlocal c1, full
        c1 += c1_span
        full += full_span
        rows.append(
            dict(
                layer=layer,
                kind=kind,
                kernel=spec.kernel_size,
                dilation=spec.dilation,
                in_channels=spec.in_channels,
                pre_channels=spec.pre_channels,
                activation=spec.activation,
                rf_c1=c1,
                rf_full=full,
            )
        )

    red = config.reduction
    row(1, "reduction", red, red.span, red.span)
    for i, blk in enumerate(config.blocks):
        row(2 + 2 * i, f"block{i + 1}.a", blk.conv_a, blk.conv_a.span, 2 * blk.dilation)
        row(3 + 2 * i, f"block{i + 1}.b", blk.conv_b, 0, 2 * blk.dilation)
    return rows


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    weight: Parameter
    bias: Parameter


@dataclass
class EncoderParams:
    reduction: ConvParams
    blocks: list[tuple[ConvParams, ConvParams]] = field(default_factory=list)

    def named_parameters(self, prefix=""):
        out = [(f"{prefix}reduction.weight", self.reduction.weight), (f"{prefix}reduction.bias", self.reduction.bias)]
        for i, (a, b) in enumerate(self.blocks):
            for tag, p in (("a", a), ("b", b)):
                out.append((f"{prefix}block{i}.{tag}.weight", p.weight))
                out.append((f"{prefix}block{i}.{tag}.bias", p.bias))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def fan_in_bound(kernel_size: int, in_channels: int) -> float:
    return math.sqrt(1.0 / (kernel_size * in_channels))


def _init_conv(spec: ConvLayerSpec, rng, dtype, name):
    bound = fan_in_bound(spec.kernel_size, spec.in_channels)
    shape = (spec.pre_channels, spec.in_channels, spec.kernel_size)
    w = rng.uniform(-bound, bound, size=shape).astype(dtype)
    b = rng.uniform(-bound, bound, size=spec.pre_channels).astype(dtype)
    return ConvParams(Parameter(w, name=f"{name}.weight"), Parameter(b, name=f"{name}.bias"))


def init_params(config: GLDRConfig, seed: int = 0, scheme: str = "fan-in-uniform", dtype=np.float64) -> EncoderParams:
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    red = _init_conv(config.reduction, rng, dtype, "reduction")
    blocks = []
    for i, blk in enumerate(config.blocks):
        a = _init_conv(blk.conv_a, rng, dtype, f"block{i}.a")
        b = _init_conv(blk.conv_b, rng, dtype, f"block{i}.b")
        if scheme == "zero-residual":
            b.weight.data[...] = 0.0
            b.bias.data[...] = 0.0
        blocks.append((a, b))
    return EncoderParams(red, blocks)


def check_params(config: GLDRConfig, params: EncoderParams):
    if len(params.blocks) != len(config.blocks):
        raise ConfigError(f"params have {len(params.blocks)} blocks, config has {len(config.blocks)}")
    pairs = [(config.reduction, params.reduction)]
    for blk, (a, b) in zip(config.blocks, params.blocks):
        pairs += [(blk.conv_a, a), (blk.conv_b, b)]
    for spec, p in pairs:
        if p.weight.shape != (spec.pre_channels, spec.in_channels, spec.kernel_size):
            raise ConfigError(f"weight shape {p.weight.shape} does not match {spec}")
        if p.bias.shape != (spec.pre_channels,):
            raise ConfigError(f"bias shape {p.bias.shape} does not match {spec}")


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def conv_layer_forward(x, spec: ConvLayerSpec, params: ConvParams, training=False, seed=0):
    if training and spec.input_dropout > 0:
        x = dropout(x, spec.input_dropout, True, seed)
    y = conv1d(x, params.weight, params.bias, spec.dilation)
    if spec.activation == "glu":
        return glu(y)
    if spec.activation == "relu":
        return relu(y)
    return y


def dim_reduction_forward(x, spec: ConvLayerSpec, params: ConvParams, training=False, seed=0):
    x = as_tensor(x)
    if x.shape[1] != spec.in_channels:
        raise ConfigError(f"reduction expects {spec.in_channels} input channels, got {x.shape[1]}")
    return conv_layer_forward(x, spec, params, training, seed)


def residual_block_forward(x, spec: ResidualBlockSpec, params, training=False, seed=0):
    x = as_tensor(x)
    if x.shape[1] != spec.width:
        raise ConfigError(f"block expects width {spec.width}, got {x.shape[1]}")
    pa, pb = params
    h = conv_layer_forward(x, spec.conv_a, pa, training, (seed, 0))
    h = conv_layer_forward(h, spec.conv_b, pb, training, (seed, 1))
    return add(x, h) if spec.residual else h


def gldr_forward(x, config: GLDRConfig, params: EncoderParams, training=False, seed=0):
    """Encode ``x`` [b, Cin, n] into [b, width, n]."""
    x = as_tensor(x)
    h = dim_reduction_forward(x, config.reduction, params.reduction, training, (seed, 0))
    for i, (spec, p) in enumerate(zip(config.blocks, params.blocks)):
        h = residual_block_forward(h, spec, p, training, (seed, i + 1))
    return h


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


def config_to_text(config: GLDRConfig) -> str:
    """Serialise to the line format described in docs/config-format.md."""
    red = config.reduction
    lines = [f"name {config.name}"]
    fields = dict(**{"in": red.in_channels}, width=red.out_channels, k=red.kernel_size, dil=red.dilation)
    if red.activation != "glu":
        fields["act"] = red.activation
    if red.input_dropout:
        fields["drop"] = red.input_dropout
    lines.append("reduction " + " ".join(f"{k}={_fmt(v)}" for k, v in fields.items()))
    for blk in config.blocks:
        a, b = blk.conv_a, blk.conv_b
        fields = dict(width=blk.width, dil=a.dilation, k=a.kernel_size)
        if b.kernel_size != 1:
            fields["kb"] = b.kernel_size
        if b.dilation != a.dilation:
            fields["dilb"] = b.dilation
        if a.activation != "glu":
            fields["act"] = a.activation
        if b.activation != a.activation:
            fields["actb"] = b.activation
        if a.input_dropout:
            fields["drop"] = a.input_dropout
        if b.input_dropout != a.input_dropout:
            fields["dropb"] = b.input_dropout
        if not blk.residual:
            fields["residual"] = False
        lines.append("block " + " ".join(f"{k}={_fmt(v)}" for k, v in fields.items()))
    return "\n".join(lines) + "\n"


_INT_KEYS = {"in", "width", "k", "dil", "kb", "dilb"}
_FLOAT_KEYS = {"drop", "dropb"}
_STR_KEYS = {"act", "actb"}
_BOOL_KEYS = {"residual"}
_REDUCTION_KEYS = {"in", "width", "k", "dil", "act", "drop"}
_BLOCK_KEYS = {"width", "dil", "k", "kb", "dilb", "act", "actb", "drop", "dropb", "residual"}


def _parse_fields(tokens, allowed, lineno):
    out = {}
    for tok in tokens:
        key, sep, val = tok.partition("=")
        if not sep or key not in allowed:
            raise ConfigError(f"line {lineno}: unexpected field {tok!r}")
        try:
            if key in _INT_KEYS:
                out[key] = int(val)
            elif key in _FLOAT_KEYS:
                out[key] = float(val)
            elif key in _BOOL_KEYS:
                if val not in ("0", "1"):
                    raise ValueError(val)
                out[key] = val == "1"
            else:
                out[key] = val
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from None
    return out


def config_from_text(text: str) -> GLDRConfig:
    name, reduction, blocks = "custom", None, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "name":
            if len(rest) != 1:
                raise ConfigError(f"line {lineno}: name takes one token")
            name = rest[0]
        elif head == "reduction":
            f = _parse_fields(rest, _REDUCTION_KEYS, lineno)
            if "width" not in f:
                raise ConfigError(f"line {lineno}: reduction needs width=")
            reduction = ConvLayerSpec(
                f.get("in", f["width"]), f["width"], f.get("k", 3), f.get("dil", 1), f.get("act", "glu"), f.get("drop", 0.0)
            )
        elif head == "block":
            f = _parse_fields(rest, _BLOCK_KEYS, lineno)
            if "width" not in f:
                raise ConfigError(f"line {lineno}: block needs width=")
            w, dil, act, drop = f["width"], f.get("dil", 1), f.get("act", "glu"), f.get("drop", 0.0)
            a = ConvLayerSpec(w, w, f.get("k", 3), dil, act, drop)
            b = ConvLayerSpec(w, w, f.get("kb", 1), f.get("dilb", dil), f.get("actb", act), f.get("dropb", drop))
            blocks.append(ResidualBlockSpec(a, b, f.get("residual", True)))
        else:
            raise ConfigError(f"line {lineno}: unknown directive {head!r}")
    if reduction is None:
        raise ConfigError("config has no reduction line")
    return GLDRConfig(reduction, tuple(blocks), name)


def load_config(path_or_preset: str) -> GLDRConfig:
    """A preset name or a path to a config file."""
    path = Path(path_or_preset)
    if path.is_file():
        return config_from_text(path.read_text())
    return make_preset(path_or_preset)


def with_input_channels(config: GLDRConfig, in_channels: int) -> GLDRConfig:
    return replace(config, reduction=replace(config.reduction, in_channels=in_channels))
