"""Dense tensors and a tape-based reverse-mode autodiff.

Only the operations the encoders and the span reader need are provided.
Sequence tensors use the layout ``[batch, channels, positions]``.

Ops are recorded onto the innermost active :class:`Graph`; outside a graph
they run eagerly and nothing is recorded.
"""

from __future__ import annotations

import itertools
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Shapes, hyperparameters or configuration values are invalid."""


class NumericError(ArithmeticError):
    """A forward pass produced (or was fed) NaN/Inf."""


_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "id", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.id = next(_ids)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, id={self.id})"


class Parameter(Tensor):
    """A trainable leaf tensor whose gradient accumulates across backward calls."""

    __slots__ = ("trainable",)

    def __init__(self, data, name=None, trainable=True, dtype=None):
        super().__init__(data, requires_grad=trainable, name=name, dtype=dtype)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Recording
# ---------------------------------------------------------------------------


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    output: int
    shape: tuple = ()
    saved: dict = field(default_factory=dict)
    backward: Callable | None = field(default=None, repr=False)
    input_tensors: tuple = field(default=(), repr=False)


class Graph:
    """A recorded forward computation.

    Use as a context manager; every op executed inside appends one
    :class:`TapeEntry`.  Entries are kept in recording order, which is a
    topological order of the op DAG.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._producers: dict[int, int] = {}

    def __enter__(self):
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def add(self, entry: TapeEntry):
        self._producers[entry.output] = len(self.entries)
        self.entries.append(entry)

    def producer(self, node_id: int) -> int | None:
        """Index of the entry that produced ``node_id`` (None for leaves)."""
        return self._producers.get(node_id)

    def __len__(self):
        return len(self.entries)


class _State(threading.local):
    def __init__(self):
        self.stack: list[Graph] = []


_state = _State()


def current_graph() -> Graph | None:
    return _state.stack[-1] if _state.stack else None


def _check_finite(op: str, arr: np.ndarray):
    if arr.size and not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in output")


def _record(op, inputs, out_data, backward, saved=None) -> Tensor:
    _check_finite(op, out_data)
    out = Tensor(out_data)
    graph = current_graph()
    if graph is not None:
        graph.add(
            TapeEntry(
                op=op,
                inputs=tuple(t.id for t in inputs),
                output=out.id,
                shape=out_data.shape,
                saved=saved or {},
                backward=backward,
                input_tensors=tuple(inputs),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Worker threads (used by conv1d)
# ---------------------------------------------------------------------------

_num_threads = max(1, int(os.environ.get("READER_THREADS", "1") or 1))
_pools: dict[int, ThreadPoolExecutor] = {}


def set_num_threads(n: int):
    global _num_threads
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    _num_threads = int(n)


def get_num_threads() -> int:
    return _num_threads


def _pool(n):
    if n not in _pools:
        _pools[n] = ThreadPoolExecutor(max_workers=n, thread_name_prefix="gldr")
    return _pools[n]


def _chunks(total, parts):
    parts = max(1, min(parts, total))
    bounds = np.linspace(0, total, parts + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _parallel_map(fn, ranges):
    if len(ranges) <= 1 or _num_threads <= 1:
        return [fn(a, b) for a, b in ranges]
    return list(_pool(_num_threads).map(lambda r: fn(*r), ranges))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _im2col(xp, k, dilation, t0, t1):
    """Rows ``(b, t)`` for ``t0 <= t < t1`` holding the ``k`` taps of each position.

    Columns are tap-major: column ``j * Cin + c`` is channel ``c`` at offset
    ``dilation * (2l - j)`` in the padded input, i.e. the input at
    ``t - dilation * (j - l)``.
    """
    b, cin, _ = xp.shape
    l = (k - 1) // 2
    xt = xp.transpose(0, 2, 1)
    cols = np.empty((b, t1 - t0, k * cin), dtype=xp.dtype)
    for j in range(k):
        off = dilation * (2 * l - j)
        cols[:, :, j * cin : (j + 1) * cin] = xt[:, off + t0 : off + t1]
    return cols.reshape(b * (t1 - t0), k * cin)


def _flat_kernel(w):
    cout, cin, k = w.shape
    return np.ascontiguousarray(w.transpose(2, 1, 0).reshape(k * cin, cout))


def _conv_positions(xp, w, bias, dilation, n):
    """Same-padded dilated convolution of an already padded input.

    ``out[t] = sum_j w[:, :, j] @ xp[t + dilation * (2l - j)]`` which is the
    zero-padded form of ``sum_i k_i x_{t - d i}`` with ``i = j - l``.
    Each chunk of positions is one matrix product over unfolded taps.
    """
    b = xp.shape[0]
    cout, _, k = w.shape
    wm = _flat_kernel(w)
    out = np.empty((b, cout, n), dtype=np.result_type(xp, w))

    def run(t0, t1):
        acc = _im2col(xp, k, dilation, t0, t1) @ wm
        out[:, :, t0:t1] = acc.reshape(b, t1 - t0, cout).transpose(0, 2, 1)
        out[:, :, t0:t1] += bias[None, :, None]

    _parallel_map(run, _chunks(n, _num_threads))
    return out


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad)))


def conv1d(x, weights, bias, dilation: int = 1) -> Tensor:
    """Dilated 1-D convolution with zero same-padding.

    ``x`` is ``[b, Cin, n]``, ``weights`` is ``[Cout, Cin, k]`` with odd ``k``
    and ``weights[:, :, j]`` holding the tap ``k_{j-l}``.
    """
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.ndim != 3 or weights.ndim != 3 or bias.ndim != 1:
        raise ConfigError("conv1d expects x[b,Cin,n], weights[Cout,Cin,k], bias[Cout]")
    cout, cin, k = weights.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    if int(dilation) != dilation or dilation < 1:
        raise ConfigError(f"dilation must be a positive integer, got {dilation}")
    dilation = int(dilation)
    if x.shape[1] != cin:
        raise ConfigError(f"conv1d channel mismatch: input has {x.shape[1]}, kernel expects {cin}")
    if bias.shape[0] != cout:
        raise ConfigError(f"conv1d bias has {bias.shape[0]} entries, expected {cout}")
    _check_finite("conv1d input", x.data)

    n = x.shape[2]
    pad = dilation * (k - 1) // 2
    xp = _pad(x.data, pad)
    out = _conv_positions(xp, weights.data, bias.data, dilation, n)

    def backward(g):
        # dx is the same convolution with a tap-reversed, channel-transposed kernel
        w_t = weights.data[:, :, ::-1].transpose(1, 0, 2)
        gx = _conv_positions(_pad(g, pad), np.ascontiguousarray(w_t), np.zeros(cin, g.dtype), dilation, n)
        spans = _chunks(n, _num_threads)

        def dw_part(t0, t1):
            gt = g[:, :, t0:t1].transpose(0, 2, 1).reshape(-1, cout)
            part = _im2col(xp, k, dilation, t0, t1).T @ gt  # [k*Cin, Cout]
            return part.reshape(k, cin, cout).transpose(2, 1, 0)

        gw = sum(_parallel_map(dw_part, spans)) if spans else np.zeros_like(weights.data)
        gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    return _record("conv1d", (x, weights, bias), out, backward, {"dilation": dilation, "kernel": k})


# ---------------------------------------------------------------------------
# Activations and elementwise ops
# ---------------------------------------------------------------------------


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def glu(x) -> Tensor:
    """Gated linear unit over the channel axis: first half * sigmoid(second half)."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[1] % 2:
        raise ConfigError(f"glu needs an even channel count, got shape {x.shape}")
    c = x.shape[1] // 2
    a, b = x.data[:, :c], x.data[:, c:]
    gate = _sigmoid(b)
    out = a * gate

    def backward(g):
        return (np.concatenate([g * gate, g * a * gate * (1.0 - gate)], axis=1),)

    return _record("glu", (x,), out, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _record("tanh", (x,), t, lambda g: (g * (1.0 - t * t),))


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ConfigError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("multiply", a, b)
    ad, bd = a.data, b.data
    return _record("multiply", (a, b), ad * bd, lambda g: (g * bd, g * ad))


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "add": add, "multiply": multiply}


def elementwise(kind: str, *operands) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# Dense / structural ops
# ---------------------------------------------------------------------------


def linear(x, w, b=None) -> Tensor:
    """Affine map over the last axis: ``x @ w.T + b`` with ``w`` of shape [G, F]."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ConfigError(f"linear: input feature dim {x.shape[-1]} does not match weight {w.shape}")
    inputs = [x, w]
    out = x.data @ w.data.T
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ConfigError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data
        inputs.append(b)
    xd, wd = x.data, w.data

    def backward(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _record("linear", inputs, out, backward)


def embedding(ids, table) -> Tensor:
    """Look up rows of ``table`` [V, E] for integer ``ids`` [b, n]; returns [b, E, n]."""
    ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids)
    table = as_tensor(table)
    if ids.ndim != 2:
        raise ConfigError(f"embedding ids must be [batch, n], got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        if ids.size and not np.all(ids == np.round(ids)):
            raise ConfigError("embedding ids must be integers")
        ids = ids.astype(np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ConfigError(f"embedding id out of range [0, {vocab})")
    out = table.data[ids].transpose(0, 2, 1)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g.transpose(0, 2, 1))
        return (gt,)

    return _record("embedding", (table,), np.ascontiguousarray(out), backward)


def concat(tensors: Sequence, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", tensors, out, backward)


def stack(tensors: Sequence, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record("stack", tensors, out, backward)


def take(x, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    x = as_tensor(x)
    out = np.take(x.data, index, axis=axis)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _record("take", (x,), out, backward)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _record("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)), lambda g: (g.transpose(inv),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def bmm(a, b) -> Tensor:
    """Batched matrix product ``[B, i, k] @ [B, k, j]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ConfigError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _record("bmm", (a, b), ad @ bd, backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), s, backward)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, g, dtype=x.data.dtype),))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


# ---------------------------------------------------------------------------
# Regularisation
# ---------------------------------------------------------------------------


def _check_rate(rate):
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")


def dropout(x, rate: float, training: bool, seed) -> Tensor:
    """Inverted dropout; identity at inference or when ``rate`` is 0."""
    x = as_tensor(x)
    _check_rate(rate)
    if not training or rate == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    factor = keep / (1.0 - rate)
    return _record("dropout", (x,), x.data * factor, lambda g: (g * factor,), {"rate": rate})


def word_dropout(ids, rate: float, training: bool, seed, unk_id: int) -> np.ndarray:
    """Replace each token by ``unk_id`` with probability ``rate`` (training only)."""
    _check_rate(rate)
    ids = np.asarray(ids)
    if not training or rate == 0.0:
        return ids
    drop = np.random.default_rng(seed).random(ids.shape) < rate
    return np.where(drop, unk_id, ids)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits, target, mask=None) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[target]``.

    Positions with ``mask`` False get ``-inf`` logits before the softmax.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ConfigError(f"logits must be [batch, n], got {logits.shape}")
    bsz, n = logits.shape
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if target.shape != (bsz,):
        raise ConfigError(f"need one target per batch row, got {target.shape}")
    if np.any(target < 0) or np.any(target >= n):
        raise ConfigError("target position out of range")
    valid = np.ones((bsz, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if valid.shape != (bsz, n):
        raise ConfigError(f"mask shape {valid.shape} != logits shape {logits.shape}")
    rows = np.arange(bsz)
    if not valid[rows, target].all():
        raise ConfigError("target falls on a masked position")

    z = np.where(valid, logits.data, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    probs = e / denom
    loss = np.mean(np.log(denom[:, 0]) - z[rows, target])

    def backward(g):
        grad = probs.copy()
        grad[rows, target] -= 1.0
        return (grad * (g / bsz),)

    return _record("softmax_cross_entropy", (logits,), np.asarray(loss), backward)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss) back through ``graph``.

    Returns gradients keyed by node id.  Parameters and tensors created with
    ``requires_grad`` also get them accumulated into ``.grad``.
    """
    if loss.size != 1:
        raise ConfigError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph.producer(loss.id) is None:
        raise ConfigError("loss was not produced by an op recorded on this graph")

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(graph.entries):
        g = grads.get(entry.output)
        if g is None:
            continue
        in_grads = entry.backward(g)
        for t, gi in zip(entry.input_tensors, in_grads):
            if gi is None:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
            if graph.producer(t.id) is None:
                leaves[t.id] = t

    for tid, t in leaves.items():
        if not t.requires_grad:
            continue
        if isinstance(t, Parameter):
            t.grad = t.grad + grads[tid]
        else:
            t.grad = grads[tid] if t.grad is None else t.grad + grads[tid]
    return grads
