"""Span-extraction reader built from two GLDR encoders.

Question and passage are embedded and encoded separately.  Each passage
position attends over the question encoding, and two linear heads score
every position as the start or end of the answer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import (
    ConfigError,
    Graph,
    NumericError,
    Parameter,
    add,
    as_tensor,
    backward,
    bmm,
    concat,
    embedding,
    linear,
    multiply,
    reshape,
    softmax,
    softmax_cross_entropy,
    transpose,
    word_dropout,
)
from .data import MAX_SPAN, UNK, SyntheticExample
from .encoder import EncoderParams, GLDRConfig, gldr_forward, init_params, make_preset, receptive_field
from .optim import AdamState, adam_step


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step: int, history: list, reason: str = "non-finite loss"):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step
        self.history = history


# ---------------------------------------------------------------------------
# Decoding and scoring
# ---------------------------------------------------------------------------


def predict_span(start_logits, end_logits, max_len: int = MAX_SPAN) -> tuple[int, int]:
    """Best (start, end) with ``start <= end < start + max_len``.

    Ties go to the smallest start, then the smallest end.
    """
    s = np.asarray(start_logits, dtype=float)
    e = np.asarray(end_logits, dtype=float)
    if s.ndim != 1 or s.shape != e.shape:
        raise ConfigError(f"start/end logits must be 1-d and of equal length, got {s.shape} and {e.shape}")
    if s.size == 0:
        raise ConfigError("cannot decode a span from empty logits")
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    return tuple(int(v) for v in predict_spans(s[None], e[None], max_len)[0])


def predict_spans(start_logits, end_logits, max_len: int = MAX_SPAN) -> np.ndarray:
    """Row-wise :func:`predict_span` for [b, n] logits; returns [b, 2]."""
    b, n = start_logits.shape
    k = min(max_len, n)
    scores = np.full((b, n, k), -np.inf)
    for off in range(k):
        scores[:, : n - off, off] = start_logits[:, : n - off] + end_logits[:, off:]
    # argmax returns the first maximum in row-major order: smallest start, then smallest offset
    flat = scores.reshape(b, -1).argmax(axis=1)
    starts, offs = np.divmod(flat, k)
    return np.stack([starts, starts + offs], axis=1)


def span_f1(pred, gold) -> float:
    ps, pe = pred
    gs, ge = gold
    overlap = max(0, min(pe, ge) - max(ps, gs) + 1)
    if overlap == 0:
        return 0.0
    precision = overlap / (pe - ps + 1)
    recall = overlap / (ge - gs + 1)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class ReaderConfig:
    vocab: int = 64
    embed_dim: int = 32
    width: int = 32
    query_preset: str = "drqa-query-17"
    passage_preset: str = "drqa-passage-9"
    activation: str = "glu"
    dilated: bool = True
    residual: bool = True
    dropout: float = 0.0
    exact_match: bool = True

    def query_config(self) -> GLDRConfig:
        return make_preset(self.query_preset, self.embed_dim, self.width, self.activation, self.dilated,
                           self.residual, self.dropout)

    def passage_config(self) -> GLDRConfig:
        return make_preset(self.passage_preset, self.embed_dim + int(self.exact_match), self.width,
                           self.activation, self.dilated, self.residual, self.dropout)


@dataclass
class ReaderModel:
    config: ReaderConfig
    embedding: Parameter
    query: EncoderParams
    passage: EncoderParams
    start_w: Parameter
    start_b: Parameter
    end_w: Parameter
    end_b: Parameter
    query_config: GLDRConfig = field(repr=False, default=None)
    passage_config: GLDRConfig = field(repr=False, default=None)

    def __post_init__(self):
        self.query_config = self.query_config or self.config.query_config()
        self.passage_config = self.passage_config or self.config.passage_config()
        w = self.config.width
        if self.query_config.width != w or self.passage_config.width != w:
            raise ConfigError("encoder widths must match the reader width")
        if self.start_w.shape != (1, 3 * w) or self.end_w.shape != (1, 3 * w):
            raise ConfigError(f"heads must be [1, {3 * w}]")

    @property
    def passage_rf(self) -> int:
        return receptive_field(self.passage_config)

    def named_parameters(self):
        out = [("embedding", self.embedding)]
        out += self.query.named_parameters("query.")
        out += self.passage.named_parameters("passage.")
        out += [("start.weight", self.start_w), ("start.bias", self.start_b),
                ("end.weight", self.end_w), ("end.bias", self.end_b)]
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def init_reader(config: ReaderConfig, seed: int = 0) -> ReaderModel:
    """Random encoders and embeddings; zero heads so the first prediction is uniform."""
    rng = np.random.default_rng(seed)
    emb = Parameter(rng.normal(0.0, 1.0, size=(config.vocab, config.embed_dim)), name="embedding")
    qc, pc = config.query_config(), config.passage_config()
    q = init_params(qc, seed=int(rng.integers(2**31)))
    p = init_params(pc, seed=int(rng.integers(2**31)))
    h = 3 * config.width
    return ReaderModel(
        config, emb, q, p,
        Parameter(np.zeros((1, h))), Parameter(np.zeros(1)),
        Parameter(np.zeros((1, h))), Parameter(np.zeros(1)),
        qc, pc,
    )


def _question_summary(q_enc, p_enc):
    if q_enc.ndim != 3 or p_enc.ndim != 3 or q_enc.shape[:2] != p_enc.shape[:2]:
        raise ConfigError(f"question {q_enc.shape} and passage {p_enc.shape} encodings must share batch and width")
    scores = bmm(transpose(p_enc, (0, 2, 1)), q_enc)  # [b, n, q]
    weights = softmax(scores, axis=-1)
    summary = bmm(weights, transpose(q_enc, (0, 2, 1)))  # [b, n, C]
    return transpose(summary, (0, 2, 1))


def attend(q_enc, p_enc):
    """Concatenate each passage vector with its attention-weighted question summary."""
    q_enc, p_enc = as_tensor(q_enc), as_tensor(p_enc)
    return concat([p_enc, _question_summary(q_enc, p_enc)], axis=1)


def _batch_ids(examples):
    q = np.array([ex.question for ex in examples], dtype=np.int64)
    p = np.array([ex.passage for ex in examples], dtype=np.int64)
    if q.ndim != 2 or p.ndim != 2:
        raise ConfigError("all questions and all passages in a batch must have equal length")
    return q, p


def _check_ids(model, ids):
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab):
        raise ConfigError(f"token id outside vocabulary of size {model.config.vocab}")


def reader_forward(model: ReaderModel, q_ids, p_ids, training=False, word_drop=0.0, seed=0):
    """Start and end logits, each [b, n]."""
    q_ids, p_ids = np.asarray(q_ids), np.asarray(p_ids)
    _check_ids(model, q_ids)
    _check_ids(model, p_ids)
    q_ids = word_dropout(q_ids, word_drop, training, (seed, 0), UNK)
    p_ids = word_dropout(p_ids, word_drop, training, (seed, 1), UNK)
    b, n = p_ids.shape
    q_emb = embedding(q_ids, model.embedding)
    p_emb = embedding(p_ids, model.embedding)
    if model.config.exact_match:
        match = (p_ids[:, :, None] == q_ids[:, None, :]).any(axis=2) & (p_ids != UNK)
        p_emb = concat([p_emb, match[:, None, :].astype(np.float64)], axis=1)
    q_enc = gldr_forward(q_emb, model.query_config, model.query, training, (seed, 2))
    p_enc = gldr_forward(p_emb, model.passage_config, model.passage, training, (seed, 3))
    summary = _question_summary(q_enc, p_enc)
    fused = concat([p_enc, summary, multiply(p_enc, summary)], axis=1)  # [b, 3C, n]
    ft = transpose(fused, (0, 2, 1))
    start = reshape(linear(ft, model.start_w, model.start_b), (b, n))
    end = reshape(linear(ft, model.end_w, model.end_b), (b, n))
    return start, end


def span_loss(start, end, spans):
    spans = np.asarray(spans)
    return add(softmax_cross_entropy(start, spans[:, 0]), softmax_cross_entropy(end, spans[:, 1]))


def _with_dropout(cfg: GLDRConfig, rate: float) -> GLDRConfig:
    blocks = tuple(
        replace(b, conv_a=replace(b.conv_a, input_dropout=rate), conv_b=replace(b.conv_b, input_dropout=rate))
        for b in cfg.blocks
    )
    return replace(cfg, reduction=replace(cfg.reduction, input_dropout=rate), blocks=blocks)


def set_dropout(model: ReaderModel, rate: float):
    """Use ``rate`` as the input dropout of every conv in both encoders."""
    model.config.dropout = rate
    model.query_config = _with_dropout(model.query_config, rate)
    model.passage_config = _with_dropout(model.passage_config, rate)


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """``dropout`` (when set) overrides the encoders' per-layer input dropout.

    ``target_em`` stops training after the first evaluation that reaches it.
    """

    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float | None = None
    word_dropout: float = 0.0
    seed: int = 0
    max_span: int = MAX_SPAN
    eval_every: int = 100
    target_em: float | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.batch_size < 1 or self.eval_every < 1 or self.max_span < 1:
            raise ConfigError("batch_size, eval_every and max_span must be positive")
        for name in ("dropout", "word_dropout", "beta1", "beta2"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if self.lr < 0 or self.eps <= 0:
            raise ConfigError("lr must be >= 0 and eps > 0")
        if self.target_em is not None and not 0.0 < self.target_em <= 1.0:
            raise ConfigError("target_em must be in (0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class EvalResult:
    exact_match: float
    f1: float
    loss: float
    predictions: np.ndarray


def run_eval(model: ReaderModel, dataset, max_span: int = MAX_SPAN, batch_size: int = 128) -> EvalResult:
    if not dataset:
        raise ConfigError("cannot evaluate on an empty dataset")
    preds, losses = [], []
    for i in range(0, len(dataset), batch_size):
        chunk = dataset[i : i + batch_size]
        q, p = _batch_ids(chunk)
        with Graph():
            start, end = reader_forward(model, q, p)
            loss = span_loss(start, end, [ex.answer_span for ex in chunk])
        preds.append(predict_spans(start.data, end.data, max_span))
        losses.append(float(loss.data) * len(chunk))
    preds = np.concatenate(preds)
    gold = np.array([ex.answer_span for ex in dataset])
    em = float(np.mean(np.all(preds == gold, axis=1)))
    f1 = float(np.mean([span_f1(pr, g) for pr, g in zip(preds, gold)]))
    return EvalResult(em, f1, sum(losses) / len(dataset), preds)


def evaluate(model: ReaderModel, dataset, max_span: int = MAX_SPAN) -> tuple[float, float]:
    """(exact match, token F1) over ``dataset``."""
    r = run_eval(model, dataset, max_span)
    return r.exact_match, r.f1


def train(model: ReaderModel, dataset, config: TrainConfig, eval_set=None, log=None) -> list[dict]:
    """Adam on the start+end cross-entropy; returns one row per evaluation.

    Row ``loss`` is the mean loss on the evaluation set (the training set
    when ``eval_set`` is None), so step 0 reports the untrained loss.
    Raises :class:`DivergenceError` on a non-finite loss or gradient.
    """
    if not dataset:
        raise ConfigError("cannot train on an empty dataset")
    if config.dropout is not None:
        set_dropout(model, config.dropout)
    eval_set = eval_set or dataset
    params = model.parameters()
    state = AdamState(config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []

    def record(step):
        try:
            r = run_eval(model, eval_set, config.max_span)
        except NumericError as err:
            raise DivergenceError(step, history, str(err)) from err
        if not math.isfinite(r.loss):
            raise DivergenceError(step, history)
        row = {"step": step, "loss": r.loss, "em": r.exact_match, "f1": r.f1}
        history.append(row)
        if log:
            log(row)
        return config.target_em is not None and r.exact_match >= config.target_em

    if record(0):
        return history
    order, pos = rng.permutation(len(dataset)), 0
    for step in range(1, config.steps + 1):
        if pos + config.batch_size > len(order):
            order, pos = rng.permutation(len(dataset)), 0
        idx = order[pos : pos + config.batch_size]
        pos += config.batch_size
        batch = [dataset[i] for i in idx]
        q, p = _batch_ids(batch)
        for prm in params:
            prm.zero_grad()
        try:
            with Graph() as g:
                start, end = reader_forward(model, q, p, True, config.word_dropout, (config.seed, step))
                loss = span_loss(start, end, [ex.answer_span for ex in batch])
            backward(g, loss)
        except NumericError as err:
            raise DivergenceError(step, history, str(err)) from err
        grads = [prm.grad for prm in params]
        if not all(np.all(np.isfinite(gr)) for gr in grads):
            raise DivergenceError(step, history, "non-finite gradient")
        adam_step(params, grads, state)
        if (step % config.eval_every == 0 or step == config.steps) and record(step):
            break
    return history


# ---------------------------------------------------------------------------
# Ablation presets
# ---------------------------------------------------------------------------

ABLATIONS = {
    f"{act}-{dil}-{res}": {"activation": act, "dilated": dil == "dilated", "residual": res == "residual"}
    for act in ("glu", "relu")
    for dil in ("dilated", "undilated")
    for res in ("residual", "no-residual")
}


def ablation_config(name: str, base: ReaderConfig | None = None) -> ReaderConfig:
    """Reader with a 17-layer modelling-style passage encoder and one ablation applied."""
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    base = base or ReaderConfig()
    kw = asdict(base)
    kw.update(ABLATIONS[name])
    kw["passage_preset"] = "bidaf-modeling-17"
    return ReaderConfig(**kw)


@dataclass
class AblationOutcome:
    name: str
    history: list
    diverged_at: int | None = None

    @property
    def final_em(self) -> float:
        return self.history[-1]["em"] if self.history else 0.0


def run_ablation(name, train_set, eval_set, train_config: TrainConfig, base=None, seed=0) -> AblationOutcome:
    model = init_reader(ablation_config(name, base), seed)
    try:
        hist = train(model, train_set, train_config, eval_set)
    except DivergenceError as err:
        return AblationOutcome(name, err.history, err.step)
    return AblationOutcome(name, hist)
