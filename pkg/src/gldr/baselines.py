"""Recurrent and self-attention encoders used as points of comparison."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ConfigError,
    Parameter,
    as_tensor,
    add,
    bmm,
    concat,
    linear,
    multiply,
    relu,
    sigmoid,
    softmax,
    stack,
    sub,
    take,
    tanh,
    transpose,
)


@dataclass
class GRUCellParams:
    """Input-to-hidden (``w_*``, [h, C]) and hidden-to-hidden (``u_*``, [h, h]) weights."""

    w_z: Parameter
    u_z: Parameter
    b_z: Parameter
    w_r: Parameter
    u_r: Parameter
    b_r: Parameter
    w_h: Parameter
    u_h: Parameter
    b_h: Parameter

    @property
    def hidden(self) -> int:
        return self.u_z.shape[0]

    @property
    def in_features(self) -> int:
        return self.w_z.shape[1]

    def named_parameters(self, prefix=""):
        return [(prefix + k, getattr(self, k)) for k in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")]

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def init_gru(in_features: int, hidden: int, seed=0, dtype=np.float64) -> GRUCellParams:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(hidden)

    def u(*shape):
        return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))

    return GRUCellParams(
        u(hidden, in_features), u(hidden, hidden), u(hidden),
        u(hidden, in_features), u(hidden, hidden), u(hidden),
        u(hidden, in_features), u(hidden, hidden), u(hidden),
    )


def _check_gru(x, p: GRUCellParams):
    h = p.hidden
    if x.ndim != 3 or x.shape[1] != p.in_features:
        raise ConfigError(f"GRU expects input [b, {p.in_features}, n], got {x.shape}")
    for name, t in p.named_parameters():
        want = {"w": (h, p.in_features), "u": (h, h), "b": (h,)}[name[0]]
        if t.shape != want:
            raise ConfigError(f"GRU parameter {name} has shape {t.shape}, expected {want}")


def _gru_direction(x, p: GRUCellParams, reverse: bool):
    b, _, n = x.shape
    xt = transpose(x, (0, 2, 1))  # [b, n, C]
    # input projections have no sequential dependency, so they are hoisted
    xz, xr, xh = linear(xt, p.w_z, p.b_z), linear(xt, p.w_r, p.b_r), linear(xt, p.w_h, p.b_h)
    h = np.zeros((b, p.hidden), dtype=x.data.dtype)
    outs = [None] * n
    for t in (range(n - 1, -1, -1) if reverse else range(n)):
        z = sigmoid(add(take(xz, t, 1), linear(h, p.u_z)))
        r = sigmoid(add(take(xr, t, 1), linear(h, p.u_r)))
        cand = tanh(add(take(xh, t, 1), linear(multiply(r, h), p.u_h)))
        h = add(h, multiply(z, sub(cand, h)))
        outs[t] = h
    return stack(outs, axis=2)  # [b, h, n]


def bigru_forward(x, fwd: GRUCellParams, bwd: GRUCellParams):
    """Bidirectional GRU over positions; returns [b, 2h, n] (forward channels first).

    z = s(Wz x + Uz h + bz), r = s(Wr x + Ur h + br),
    h~ = tanh(Wh x + Uh (r * h) + bh), h' = (1 - z) h + z h~
    """
    x = as_tensor(x)
    _check_gru(x, fwd)
    _check_gru(x, bwd)
    if x.shape[2] < 1:
        raise ConfigError("GRU needs at least one position")
    return concat([_gru_direction(x, fwd, False), _gru_direction(x, bwd, True)], axis=1)


@dataclass
class SelfAttnParams:
    weight: Parameter
    bias: Parameter

    def named_parameters(self, prefix=""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]

    def parameters(self):
        return [self.weight, self.bias]


def init_self_attention(width: int, seed=0, dtype=np.float64) -> SelfAttnParams:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(width)
    return SelfAttnParams(
        Parameter(rng.uniform(-bound, bound, size=(width, width)).astype(dtype)),
        Parameter(rng.uniform(-bound, bound, size=width).astype(dtype)),
    )


def self_attention_forward(x, params: SelfAttnParams):
    """Single-layer self-attention over [b, w, n].

    Projects each position through a ReLU dense layer, scores every pair by
    inner product, row-normalises with softmax and mixes the inputs.  The
    full [b, n, n] attention is materialised and returned.
    """
    x = as_tensor(x)
    w = params.weight.shape[0]
    if params.weight.shape != (w, w) or x.ndim != 3 or x.shape[1] != w:
        raise ConfigError(f"self-attention expects [b, {w}, n] input and a square projection")
    if x.shape[2] < 1:
        raise ConfigError("self-attention needs at least one position")
    xt = transpose(x, (0, 2, 1))  # [b, n, w]
    proj = relu(linear(xt, params.weight, params.bias))
    scores = bmm(proj, transpose(proj, (0, 2, 1)))
    attn = softmax(scores, axis=-1)
    out = transpose(bmm(attn, xt), (0, 2, 1))
    return out, attn
