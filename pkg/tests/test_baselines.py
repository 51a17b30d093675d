import math

import numpy as np
import pytest

from gldr.autodiff import ConfigError, Parameter
from gldr.baselines import (
    GRUCellParams,
    SelfAttnParams,
    bigru_forward,
    init_gru,
    init_self_attention,
    self_attention_forward,
)


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def scalar_gru(**vals):
    names = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")
    shapes = {"w": (1, 1), "u": (1, 1), "b": (1,)}
    return GRUCellParams(*(Parameter(np.full(shapes[k[0]], vals.get(k, 0.0))) for k in names))


def test_zero_weights_give_zero_output():
    p = scalar_gru()
    out = bigru_forward(np.random.default_rng(0).standard_normal((2, 1, 5)), p, p).data
    np.testing.assert_array_equal(out, 0)


def test_single_step_directions_agree():
    p = init_gru(3, 4, seed=1)
    out = bigru_forward(np.random.default_rng(0).standard_normal((2, 3, 1)), p, p).data
    np.testing.assert_array_equal(out[:, :4], out[:, 4:])


def test_two_step_hand_rollout():
    vals = dict(w_z=0.5, u_z=-0.3, b_z=0.1, w_r=0.8, u_r=0.2, b_r=-0.2, w_h=1.2, u_h=0.7, b_h=0.05)
    p = scalar_gru(**vals)
    x = [0.9, -1.4]

    def step(h, xt):
        z = _sig(vals["w_z"] * xt + vals["u_z"] * h + vals["b_z"])
        r = _sig(vals["w_r"] * xt + vals["u_r"] * h + vals["b_r"])
        c = math.tanh(vals["w_h"] * xt + vals["u_h"] * r * h + vals["b_h"])
        return (1 - z) * h + z * c

    f1 = step(0.0, x[0])
    f2 = step(f1, x[1])
    b2 = step(0.0, x[1])
    b1 = step(b2, x[0])
    out = bigru_forward(np.array([[x]]), p, p).data[0]
    np.testing.assert_allclose(out, [[f1, f2], [b1, b2]], rtol=1e-13)


def test_gru_every_output_depends_on_every_input():
    rng = np.random.default_rng(4)
    fwd, bwd = init_gru(2, 3, seed=1), init_gru(2, 3, seed=2)
    n = 9
    x = rng.standard_normal((1, 2, n))
    base = bigru_forward(x, fwd, bwd).data
    for p in range(n):
        y = x.copy()
        y[0, :, p] += 1.0
        moved = np.any(bigru_forward(y, fwd, bwd).data != base, axis=1)[0]
        assert moved.all()


def test_gru_shape_errors():
    p = init_gru(3, 2)
    with pytest.raises(ConfigError):
        bigru_forward(np.zeros((1, 4, 5)), p, p)
    with pytest.raises(ConfigError):
        bigru_forward(np.zeros((1, 3, 0)), p, p)


def test_attention_single_position():
    p = init_self_attention(4, seed=0)
    x = np.random.default_rng(1).standard_normal((2, 4, 1))
    out, attn = self_attention_forward(x, p)
    np.testing.assert_array_equal(attn.data, np.ones((2, 1, 1)))
    np.testing.assert_allclose(out.data, x, rtol=1e-15)


def test_attention_identical_tokens_uniform():
    p = init_self_attention(3, seed=0)
    x = np.tile(np.array([0.3, -1.0, 2.0])[None, :, None], (1, 1, 5))
    _, attn = self_attention_forward(x, p)
    np.testing.assert_allclose(attn.data, np.full((1, 5, 5), 0.2), atol=1e-15)


def test_attention_orthogonal_projections():
    p = SelfAttnParams(Parameter(np.eye(2)), Parameter(np.zeros(2)))
    x = np.array([[[2.0, 0.0], [0.0, 3.0]]])  # positions e1*2 and e2*3
    _, attn = self_attention_forward(x, p)
    # scores: diag 4 and 9, off-diagonal 0
    row0 = [math.exp(4) / (math.exp(4) + 1), 1 / (math.exp(4) + 1)]
    row1 = [1 / (math.exp(9) + 1), math.exp(9) / (math.exp(9) + 1)]
    np.testing.assert_allclose(attn.data[0], [row0, row1], rtol=1e-14)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(8)
    p = init_self_attention(6, seed=3)
    _, attn = self_attention_forward(rng.standard_normal((3, 6, 20)) * 5, p)
    assert np.max(np.abs(attn.data.sum(-1) - 1)) < 1e-6


def test_attention_shape_error():
    with pytest.raises(ConfigError):
        self_attention_forward(np.zeros((1, 5, 3)), init_self_attention(4))
