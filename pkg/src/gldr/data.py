"""Synthetic span-extraction data with a controlled dependency distance.

Every passage holds several (key, answer span) pairs.  The question names
one key; its answer starts exactly ``distance`` positions after that key.
Every other answer span follows a different key at a gap slightly larger
than ``distance``.  Answer spans look alike, so picking the right one means
seeing the token ``distance`` positions to the left, which needs a
receptive field of at least ``2 * distance + 1``.

Vocabulary layout (``V >= 16``): 0 pad, 1 unknown, then question words,
keys, answer tokens and filler tokens in consecutive ranges.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ConfigError

class DataError(ConfigError):
    """Malformed or empty dataset file."""


PAD, UNK = 0, 1
MAX_SPAN = 3
QUESTION_LEN = 4
# answer runs are at least this many tokens apart so a span can never bridge two runs
RUN_SEPARATION = MAX_SPAN


@dataclass(frozen=True)
class SyntheticExample:
    question: tuple
    passage: tuple
    answer_span: tuple
    distance: int

    def __post_init__(self):
        s, e = self.answer_span
        if not 0 <= s <= e < len(self.passage) or e - s + 1 > MAX_SPAN:
            raise ConfigError(f"invalid answer span {self.answer_span} for passage of length {len(self.passage)}")


@dataclass(frozen=True)
class Vocab:
    size: int
    question_words: range
    keys: range
    answers: range
    fillers: range

    def token_class(self, tok: int) -> str:
        for name in ("question_words", "keys", "answers", "fillers"):
            if tok in getattr(self, name):
                return name
        return "special"


def vocab_layout(size: int) -> Vocab:
    if size < 16:
        raise ConfigError(f"vocabulary must have at least 16 entries, got {size}")
    rest = size - 2
    nq = max(2, rest // 8)
    nk = na = rest // 4
    start = 2
    q = range(start, start + nq)
    k = range(q.stop, q.stop + nk)
    a = range(k.stop, k.stop + na)
    return Vocab(size, q, k, a, range(a.stop, size))


def _place(rng, n, gaps, lengths, restarts=200, tries=50):
    """Random non-overlapping (key, start, end) triples; None if no layout was found."""
    for _ in range(restarts):
        used = np.zeros(n, dtype=bool)
        runs, pairs = [], []
        for gap, length in zip(gaps, lengths):
            hi = n - gap - length
            if hi < 0:
                return None
            for _ in range(tries):
                key = int(rng.integers(0, hi + 1))
                start = key + gap
                end = start + length - 1
                if used[key] or used[start : end + 1].any():
                    continue
                if any(not (start > e + RUN_SEPARATION or s > end + RUN_SEPARATION) for s, e in runs):
                    continue
                break
            else:
                break
            used[key] = True
            used[start : end + 1] = True
            runs.append((start, end))
            pairs.append((key, start, end))
        else:
            return pairs
    return None


def default_distractors(n: int, distance: int) -> int:
    """Five distractor spans when the passage has room, fewer for short passages."""
    return int(min(5, max(1, (n - distance) // 8 - 1)))


def gap_spread(distance: int) -> int:
    """Distractor gaps lie in ``[distance + 1, distance + spread]``.

    Keeping them just above ``distance`` makes true and distractor spans sit
    at near-identical positions, so nothing but the token exactly
    ``distance`` to the left tells them apart.
    """
    return max(2, distance // 8)


def gen_dataset(count: int, n: int, distance: int, vocab: int = 64, seed: int = 0, distractors: int | None = None):
    """Generate ``count`` examples; deterministic in ``seed``.

    ``distance`` is the offset from the key to the first answer token, so
    ``distance=1`` puts the answer right after the key.  ``distractors``
    defaults to :func:`default_distractors`.
    """
    if distance < 1:
        raise ConfigError("distance must be >= 1 (the answer cannot overlap its key)")
    if distance + 4 >= n:
        raise ConfigError(f"infeasible geometry: distance {distance} needs n > {distance + 4}")
    voc = vocab_layout(vocab)
    if distractors is None:
        distractors = default_distractors(n, distance)
    if distractors + 1 > len(voc.keys):
        raise ConfigError("not enough key tokens for the requested distractors")
    rng = np.random.default_rng(seed)
    out = []
    max_gap = distance + gap_spread(distance)
    for _ in range(count):
        lengths = rng.integers(1, MAX_SPAN + 1, size=distractors + 1)
        gaps = [distance] + [int(rng.integers(distance + 1, max_gap + 1)) for _ in range(distractors)]
        order = rng.permutation(distractors + 1)
        placed = _place(rng, n, [gaps[i] for i in order], [lengths[i] for i in order])
        if placed is None:
            raise ConfigError(f"infeasible geometry: cannot fit {distractors + 1} spans at distance {distance} in n={n}")
        pairs = [None] * (distractors + 1)
        for slot, i in enumerate(order):
            pairs[i] = placed[slot]

        keys = rng.choice(np.asarray(voc.keys), size=distractors + 1, replace=False)
        passage = rng.choice(np.asarray(voc.fillers), size=n)
        for (key_pos, start, end), key in zip(pairs, keys):
            passage[key_pos] = key
            passage[start : end + 1] = rng.choice(np.asarray(voc.answers), size=end - start + 1)
        question = list(rng.choice(np.asarray(voc.question_words), size=QUESTION_LEN - 1)) + [keys[0]]
        _, s, e = pairs[0]
        out.append(
            SyntheticExample(tuple(int(t) for t in question), tuple(int(t) for t in passage), (int(s), int(e)), distance)
        )
    return out


def candidate_starts(example: SyntheticExample, voc: Vocab) -> list[tuple[int, int]]:
    """All answer-token runs in the passage as (start, end)."""
    runs, p = [], example.passage
    i = 0
    while i < len(p):
        if p[i] in voc.answers:
            j = i
            while j + 1 < len(p) and p[j + 1] in voc.answers:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


# ---------------------------------------------------------------------------
# Text format:  Q:<ids> P:<ids> A:<start>-<end> [D:<distance>]
# ---------------------------------------------------------------------------


def _ids(seq):
    return ",".join(str(t) for t in seq)


def example_to_line(ex: SyntheticExample) -> str:
    s, e = ex.answer_span
    return f"Q:{_ids(ex.question)} P:{_ids(ex.passage)} A:{s}-{e} D:{ex.distance}"


def example_from_line(line: str) -> SyntheticExample:
    fields = {}
    for tok in line.split():
        tag, sep, val = tok.partition(":")
        if not sep or tag not in ("Q", "P", "A", "D") or tag in fields:
            raise DataError(f"malformed dataset line: {line!r}")
        fields[tag] = val
    if not {"Q", "P", "A"} <= fields.keys():
        raise DataError(f"dataset line needs Q:, P: and A: fields: {line!r}")
    try:
        q = tuple(int(t) for t in fields["Q"].split(",") if t)
        p = tuple(int(t) for t in fields["P"].split(",") if t)
        s, e = (int(v) for v in fields["A"].split("-"))
        d = int(fields.get("D", 0))
    except ValueError:
        raise DataError(f"non-integer field in dataset line: {line!r}") from None
    try:
        return SyntheticExample(q, p, (s, e), d)
    except ConfigError as err:
        raise DataError(str(err)) from None


def save_dataset(examples, path):
    Path(path).write_text("".join(example_to_line(ex) + "\n" for ex in examples))


def load_dataset(path) -> list[SyntheticExample]:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise DataError(f"cannot read dataset {path}: {err.strerror}") from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"dataset {path} is empty")
    return [example_from_line(ln) for ln in lines]
