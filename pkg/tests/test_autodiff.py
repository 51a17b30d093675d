import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gldr.autodiff import (
    ConfigError,
    Graph,
    NumericError,
    Parameter,
    Tensor,
    add,
    backward,
    bmm,
    concat,
    conv1d,
    dropout,
    elementwise,
    embedding,
    glu,
    linear,
    multiply,
    relu,
    reshape,
    scale,
    set_num_threads,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    stack,
    sub,
    sum_all,
    take,
    tanh,
    transpose,
    word_dropout,
)
from gldr.gradcheck import grad_check, relative_error
from gldr.optim import AdamState, adam_step
from oracles import naive_conv1d, textbook_conv1d


def conv_1ch(kernel, x, d):
    w = np.array(kernel, dtype=float).reshape(1, 1, -1)
    return conv1d(np.array(x, dtype=float).reshape(1, 1, -1), w, np.zeros(1), d).data[0, 0]


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("d", [1, 2, 3, 7])
def test_conv_identity_kernel(d):
    np.testing.assert_array_equal(conv_1ch([0, 1, 0], [1, 2, 3, 4, 5], d), [1, 2, 3, 4, 5])


def test_conv_hand_examples():
    y = conv_1ch([1, 0, 2], [1, 2, 3, 4, 5], 2)
    assert y[2] == 7  # position 3 counting from 1: x5 + 2*x1
    y = conv_1ch([1, 1, 1], [1, 2, 3, 4, 5], 2)
    assert y[0] == 4  # x3 + x1 + zero pad
    np.testing.assert_array_equal(conv_1ch([1, 0, 2], [1, 2, 3, 4, 5], 2), [3, 4, 7, 4, 6])
    np.testing.assert_array_equal(conv_1ch([1, 1, 1], [1, 2, 3, 4, 5], 2), [4, 6, 9, 6, 8])


def test_conv_dilated_dependencies():
    # y3 (index 2) depends on exactly x1, x3, x5
    w = np.ones((1, 1, 3))
    deps = set()
    for p in range(5):
        x = np.zeros((1, 1, 5))
        x[0, 0, p] = 1.0
        if conv1d(x, w, np.zeros(1), 2).data[0, 0, 2] != 0:
            deps.add(p)
    assert deps == {0, 2, 4}


def test_conv_matches_naive_oracle_1000_cases():
    rng = np.random.default_rng(1234)
    worst = 0.0
    for _ in range(1000):
        b, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.choice([1, 3, 5]))
        d = int(rng.integers(1, 9))
        n = int(rng.integers(1, 65))
        x = rng.standard_normal((b, cin, n))
        w = rng.standard_normal((cout, cin, k))
        bias = rng.standard_normal(cout)
        got = conv1d(x, w, bias, d).data
        worst = max(worst, float(np.max(np.abs(got - naive_conv1d(x, w, bias, d)))))
    assert worst < 1e-12


def test_conv_dilation_one_is_standard_convolution():
    rng = np.random.default_rng(5)
    for k in (1, 3, 5):
        x = rng.standard_normal((1, 3, 20))
        w = rng.standard_normal((4, 3, k))
        bias = rng.standard_normal(4)
        np.testing.assert_allclose(conv1d(x, w, bias, 1).data[0], textbook_conv1d(x[0], w, bias), rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 8),
    st.sampled_from([1, 3, 5]),
    st.integers(1, 40),
    st.floats(-3, 3),
    st.floats(-3, 3),
    st.integers(0, 2**31 - 1),
)
def test_conv_linear_in_input(d, k, n, alpha, beta, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, n)), rng.standard_normal((2, 2, n))
    w, zero = rng.standard_normal((3, 2, k)), np.zeros(3)
    lhs = conv1d(alpha * x + beta * y, w, zero, d).data
    rhs = alpha * conv1d(x, w, zero, d).data + beta * conv1d(y, w, zero, d).data
    assert np.max(np.abs(lhs - rhs)) < 1e-12 * max(1.0, np.max(np.abs(lhs)))


def test_conv_linear_in_weights():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 3, 17))
    w1, w2 = rng.standard_normal((2, 4, 3, 3))
    zero = np.zeros(4)
    lhs = conv1d(x, 2 * w1 - 0.5 * w2, zero, 3).data
    rhs = 2 * conv1d(x, w1, zero, 3).data - 0.5 * conv1d(x, w2, zero, 3).data
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_conv_threads_match_sequential():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 5, 300))
    w, bias = rng.standard_normal((6, 5, 3)), rng.standard_normal(6)
    ref = conv1d(x, w, bias, 4).data
    try:
        set_num_threads(4)
        par = conv1d(x, w, bias, 4).data
    finally:
        set_num_threads(1)
    assert np.max(np.abs(par - ref)) < 1e-12


def test_conv_errors():
    x = np.zeros((1, 2, 5))
    with pytest.raises(ConfigError):
        conv1d(x, np.zeros((1, 2, 2)), np.zeros(1), 1)
    with pytest.raises(ConfigError):
        conv1d(x, np.zeros((1, 2, 3)), np.zeros(1), 0)
    with pytest.raises(ConfigError):
        conv1d(x, np.zeros((1, 3, 3)), np.zeros(1), 1)
    with pytest.raises(ConfigError):
        conv1d(x, np.zeros((1, 2, 3)), np.zeros(2), 1)
    bad = x.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        conv1d(bad, np.zeros((1, 2, 3)), np.zeros(1), 1)


def test_conv_preserves_length_for_n_1():
    assert conv1d(np.ones((1, 1, 1)), np.ones((2, 1, 5)), np.zeros(2), 8).shape == (1, 2, 1)


# ---------------------------------------------------------------------------
# activations, dense and structural ops
# ---------------------------------------------------------------------------


def test_glu_examples():
    assert np.all(glu(np.concatenate([np.zeros((1, 2, 3)), np.ones((1, 2, 3)) * 5], axis=1)).data == 0)
    a = np.arange(6.0).reshape(1, 2, 3)
    np.testing.assert_array_equal(glu(np.concatenate([a, np.zeros_like(a)], axis=1)).data, a / 2)
    out = glu(np.array([[[2.0], [math.log(3)]]])).data
    assert out[0, 0, 0] == pytest.approx(1.5, abs=1e-15)
    with pytest.raises(ConfigError):
        glu(np.zeros((1, 3, 2)))


def test_scalar_activations():
    assert relu(np.array([-1.0])).data[0] == 0
    assert sigmoid(np.array([0.0])).data[0] == 0.5
    x = np.array([1.0, -2.0])
    np.testing.assert_array_equal(add(x, np.zeros(2)).data, x)
    assert elementwise("tanh", np.array([0.0])).data[0] == 0
    with pytest.raises(ConfigError):
        elementwise("cosh", x)


def test_no_broadcasting():
    with pytest.raises(ConfigError):
        add(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ConfigError):
        multiply(np.zeros((2, 3)), np.zeros((3, 2)))


def test_linear_examples():
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(linear(x, np.eye(2), np.zeros(2)).data, x)
    np.testing.assert_array_equal(linear(x, np.array([[1.0, 1], [0, 1]]), np.array([0.0, 1])).data, [3, 3])
    np.testing.assert_array_equal(linear(np.zeros(2), np.ones((3, 2)), np.array([1.0, 2, 3])).data, [1, 2, 3])
    with pytest.raises(ConfigError):
        linear(x, np.ones((2, 3)))


def test_embedding_examples():
    out = embedding(np.array([[1, 0]]), np.array([[5.0], [7.0]])).data
    np.testing.assert_array_equal(out, [[[7, 5]]])
    ids = np.array([[2, 0, 1]])
    np.testing.assert_array_equal(embedding(ids, np.eye(3)).data[0], np.eye(3)[:, ids[0]])
    assert embedding(np.zeros((1, 0), dtype=int), np.eye(3)).shape == (1, 3, 0)
    with pytest.raises(ConfigError):
        embedding(np.array([[3]]), np.eye(3))


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).standard_normal((3, 4, 5)) * 50
    np.testing.assert_allclose(softmax(x, axis=-1).data.sum(-1), 1.0, atol=1e-12)


def test_dropout():
    x = np.ones((4, 5, 6))
    np.testing.assert_array_equal(dropout(x, 0.0, True, 0).data, x)
    np.testing.assert_array_equal(dropout(x, 0.5, False, 0).data, x)
    a, b = dropout(x, 0.5, True, 7).data, dropout(x, 0.5, True, 7).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}
    with pytest.raises(ConfigError):
        dropout(x, 1.0, True, 0)


def test_word_dropout():
    ids = np.arange(10_000).reshape(100, 100) + 5
    np.testing.assert_array_equal(word_dropout(ids, 0.0, True, 0, 1), ids)
    out = word_dropout(ids, 0.1, True, 3, 1)
    assert 0.08 <= np.mean(out == 1) <= 0.12
    np.testing.assert_array_equal(out, word_dropout(ids, 0.1, True, 3, 1))
    np.testing.assert_array_equal(word_dropout(ids, 0.1, False, 3, 1), ids)


def test_word_dropout_rate_one_gives_all_unk():
    # rate 1 is outside [0, 1) for the regular dropout check, so the edge case
    # is exercised as "as close to one as representable"
    ids = np.arange(50).reshape(5, 10)
    out = word_dropout(ids, np.nextafter(1.0, 0.0), True, 0, 1)
    assert np.all(out == 1)


def test_cross_entropy_examples():
    assert softmax_cross_entropy(np.zeros((1, 2)), [0]).data == pytest.approx(math.log(2), abs=1e-15)
    a, b = 1.3, -0.4
    want = -math.log(math.exp(a) / (math.exp(a) + math.exp(b)))
    assert softmax_cross_entropy(np.array([[a, b]]), [0]).data == pytest.approx(want, abs=1e-14)
    mask = np.array([[False, True, False, False]])
    assert softmax_cross_entropy(np.random.default_rng(0).standard_normal((1, 4)), [1], mask).data == 0.0
    with pytest.raises(ConfigError):
        softmax_cross_entropy(np.zeros((1, 4)), [0], mask)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True)
    with Graph() as g:
        loss = sum_all(x)
    backward(g, loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_conv_tap_counts():
    x = Tensor(np.zeros((1, 1, 7)), requires_grad=True)
    with Graph() as g:
        loss = sum_all(conv1d(x, np.ones((1, 1, 3)), np.zeros(1), 1))
    backward(g, loss)
    np.testing.assert_array_equal(x.grad[0, 0, 1:-1], 3)
    np.testing.assert_array_equal(x.grad[0, 0, [0, -1]], 2)


def test_backward_identity_conv_passes_gradient():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((1, 2, 6)), requires_grad=True)
    w = np.zeros((2, 2, 3))
    w[0, 0, 1] = w[1, 1, 1] = 1
    up = rng.standard_normal((1, 2, 6))
    with Graph() as g:
        loss = sum_all(multiply(conv1d(x, w, np.zeros(2), 3), up))
    backward(g, loss)
    np.testing.assert_array_equal(x.grad, up)


def test_backward_errors():
    with Graph() as g:
        y = add(np.ones(2), np.ones(2))
    with pytest.raises(ConfigError):
        backward(g, y)
    with pytest.raises(ConfigError):
        backward(g, Tensor(1.0))


def test_parameter_gradients_accumulate():
    p = Parameter(np.array([1.0, 2.0]))
    for _ in range(2):
        with Graph() as g:
            loss = sum_all(multiply(p, p))
        backward(g, loss)
    np.testing.assert_array_equal(p.grad, [4.0, 8.0])


def _loss_of(fn, shape_out, seed=0):
    r = np.random.default_rng(seed + 99).standard_normal(shape_out)
    return lambda: sum_all(multiply(fn(), r))


def _op_cases():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 4, 6)), requires_grad=True)
    y = Tensor(rng.standard_normal((2, 4, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 4, 3)), requires_grad=True)
    bias = Tensor(rng.standard_normal(3), requires_grad=True)
    lw = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
    lb = Tensor(rng.standard_normal(5), requires_grad=True)
    table = Tensor(rng.standard_normal((7, 3)), requires_grad=True)
    ids = rng.integers(0, 7, size=(2, 5))
    m = Tensor(rng.standard_normal((2, 6, 4)), requires_grad=True)
    logits = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    return {
        "conv1d-d1": (_loss_of(lambda: conv1d(x, w, bias, 1), (2, 3, 6)), [x, w, bias], 1e-6),
        "conv1d-d3": (_loss_of(lambda: conv1d(x, w, bias, 3), (2, 3, 6)), [x, w, bias], 1e-6),
        "linear": (_loss_of(lambda: linear(x, lw, lb), (2, 4, 5)), [x, lw, lb], 1e-6),
        "glu": (_loss_of(lambda: glu(x), (2, 2, 6)), [x], 1e-4),
        "relu": (_loss_of(lambda: relu(x), (2, 4, 6)), [x], 1e-4),
        "sigmoid": (_loss_of(lambda: sigmoid(x), (2, 4, 6)), [x], 1e-4),
        "tanh": (_loss_of(lambda: tanh(x), (2, 4, 6)), [x], 1e-4),
        "add": (_loss_of(lambda: add(x, y), (2, 4, 6)), [x, y], 1e-6),
        "sub": (_loss_of(lambda: sub(x, y), (2, 4, 6)), [x, y], 1e-6),
        "multiply": (_loss_of(lambda: multiply(x, y), (2, 4, 6)), [x, y], 1e-4),
        "embedding": (_loss_of(lambda: embedding(ids, table), (2, 3, 5)), [table], 1e-6),
        "concat": (_loss_of(lambda: concat([x, y], 1), (2, 8, 6)), [x, y], 1e-6),
        "stack": (_loss_of(lambda: stack([x, y], 0), (2, 2, 4, 6)), [x, y], 1e-6),
        "take": (_loss_of(lambda: take(x, 2, 2), (2, 4)), [x], 1e-6),
        "transpose": (_loss_of(lambda: transpose(x, (2, 0, 1)), (6, 2, 4)), [x], 1e-6),
        "reshape": (_loss_of(lambda: reshape(x, (8, 6)), (8, 6)), [x], 1e-6),
        "scale": (_loss_of(lambda: scale(x, -2.5), (2, 4, 6)), [x], 1e-6),
        "bmm": (_loss_of(lambda: bmm(x, m), (2, 4, 4)), [x, m], 1e-4),
        "softmax": (_loss_of(lambda: softmax(x, axis=1), (2, 4, 6)), [x], 1e-4),
        "cross-entropy": (lambda: softmax_cross_entropy(logits, [0, 5, 2]), [logits], 1e-4),
    }


@pytest.mark.parametrize("name", list(_op_cases()))
def test_grad_check_every_op(name):
    build, params, tol = _op_cases()[name]
    assert grad_check(build, params, epsilon=1e-5) < tol


def test_grad_check_rejects_float32():
    p = Parameter(np.ones(3, dtype=np.float32))
    with pytest.raises(TypeError):
        grad_check(lambda: sum_all(p), [p])


def test_relative_error_floor():
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-6)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = Parameter(np.array([1.0, -2.0]))
    adam_step([p], [np.zeros(2)], AdamState())
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    p = Parameter(np.array([0.5]))
    st_ = AdamState()
    adam_step([p], [np.array([1.0])], st_)
    # m_hat = 1, v_hat = 1 after bias correction
    assert p.data[0] == pytest.approx(0.5 - 1e-4 * 1.0 / (1.0 + 1e-8), abs=1e-16)
    assert st_.step == 1


def test_adam_deterministic_and_shape_checked():
    def run():
        p = Parameter(np.array([0.1, 0.2]))
        s = AdamState(alpha=1e-2)
        for _ in range(2):
            adam_step([p], [np.array([0.3, -0.7])], s)
        return p.data.copy()

    np.testing.assert_array_equal(run(), run())
    with pytest.raises(ConfigError):
        adam_step([Parameter(np.zeros(2))], [np.zeros(3)], AdamState())
