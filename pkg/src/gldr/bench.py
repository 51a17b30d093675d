"""Latency, memory and dependency-path sweeps emitted as CSV records.

Latency is the median wall time of the forward pass alone (no graph
recording, no data preparation).  Work inside one forward is split over
positions by :func:`gldr.autodiff.set_num_threads`; BLAS itself is pinned to
one thread so the thread count is the only source of parallelism.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import astuple, dataclass, fields

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff
from .analysis import activation_count, cost_model, memory_sweep_config, longest_dependency_chain
from .autodiff import ConfigError, Graph
from .baselines import bigru_forward, init_gru, init_self_attention, self_attention_forward
from .encoder import gldr_forward, init_params, make_preset

ENCODERS = ("gldr", "bigru", "self-attn")
METRICS = ("wall_time_ms_median", "activation_elements", "longest_path", "ops_count")
MIN_TIMING_REPS = 5
WARMUP = 2
DEFAULT_MEM_LIMIT = 2 * 1024**3  # bytes of activations before a point is skipped


@dataclass
class BenchRecord:
    encoder: str
    preset: str
    n: int
    batch: int
    threads: int
    repetitions: int
    metric: str
    value: float
    status: str = "OK"


CSV_HEADER = [f.name for f in fields(BenchRecord)]


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        row = list(astuple(r))
        if isinstance(row[7], float) and row[7].is_integer() and r.metric != "wall_time_ms_median":
            row[7] = int(row[7])
        w.writerow(row)
    return buf.getvalue()


def build_encoder(kind: str, width: int = 100, preset: str = "drqa-passage-9", seed: int = 0):
    """Return ``(forward(x), preset label)`` for an encoder of the given width."""
    if kind == "gldr":
        cfg = make_preset(preset, width=width)
        params = init_params(cfg, seed)
        return (lambda x: gldr_forward(x, cfg, params)), cfg.name
    if kind == "bigru":
        fwd, bwd = init_gru(width, width // 2, seed), init_gru(width, width // 2, seed + 1)
        return (lambda x: bigru_forward(x, fwd, bwd)), f"bigru-{width}"
    if kind == "self-attn":
        p = init_self_attention(width, seed)
        return (lambda x: self_attention_forward(x, p)[0]), f"self-attn-{width}"
    raise ConfigError(f"unknown encoder {kind!r}; choose from {', '.join(ENCODERS)}")


def _estimated_bytes(kind, n, width, batch):
    kind = "dilated-conv" if kind == "gldr" else "recurrent" if kind == "bigru" else kind
    return 8 * activation_count(kind, n, width, batch).activation_elements


def time_forward(fn, x, threads: int, reps: int, warmup: int = WARMUP) -> float:
    """Median milliseconds of ``fn(x)`` over ``reps`` runs after ``warmup`` runs."""
    if reps < MIN_TIMING_REPS:
        raise ConfigError(f"timing needs at least {MIN_TIMING_REPS} repetitions")
    old = autodiff.get_num_threads()
    autodiff.set_num_threads(threads)
    try:
        with threadpool_limits(1):
            for _ in range(warmup):
                fn(x)
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                fn(x)
                times.append((time.perf_counter() - t0) * 1e3)
    finally:
        autodiff.set_num_threads(old)
    return statistics.median(times)


def bench_latency(encoders, ns, batch=1, threads=(1,), reps=MIN_TIMING_REPS, width=100,
                  preset="drqa-passage-9", seed=0, mem_limit=DEFAULT_MEM_LIMIT):
    records = []
    rng = np.random.default_rng(seed)
    for kind in encoders:
        fn, label = build_encoder(kind, width, preset, seed)
        for n in ns:
            for t in threads:
                if _estimated_bytes(kind, n, width, batch) > mem_limit:
                    records.append(BenchRecord(kind, label, n, batch, t, reps, "wall_time_ms_median", 0.0, "SKIP"))
                    continue
                try:
                    x = rng.standard_normal((batch, width, n))
                    ms = time_forward(fn, x, t, reps)
                    records.append(BenchRecord(kind, label, n, batch, t, reps, "wall_time_ms_median", ms))
                except MemoryError:
                    records.append(BenchRecord(kind, label, n, batch, t, reps, "wall_time_ms_median", 0.0, "SKIP"))
    return records


def bench_memory(ns, w=100, batch=64):
    """Activation elements for self-attention and the depth-scaled GLDR stack."""
    if list(ns) != sorted(set(ns)):
        raise ConfigError("n sweep must be strictly ascending")
    records = []
    for n in ns:
        sa = activation_count("self-attn", n, w, batch)
        records.append(BenchRecord("self-attn", f"self-attn-{w}", n, batch, 1, 1, "activation_elements",
                                   sa.activation_elements))
        cfg = memory_sweep_config(n, w)
        g = activation_count("dilated-conv", n, w, batch, cfg)
        records.append(BenchRecord("gldr", cfg.name, n, batch, 1, 1, "activation_elements", g.activation_elements))
        records.append(BenchRecord("gldr", cfg.name, n, batch, 1, 1, "ops_count",
                                   cost_model("dilated-conv", n, w, 3, cfg.depth).overall_ops))
        records.append(BenchRecord("self-attn", f"self-attn-{w}", n, batch, 1, 1, "ops_count",
                                   cost_model("self-attn", n, w).overall_ops))
    return records


def traced_path(kind: str, n: int, width: int = 8, preset: str = "drqa-passage-9", seed: int = 0) -> int:
    """Longest op chain of one recorded forward pass (independent of width)."""
    fn, _ = build_encoder(kind, width, preset, seed)
    x = np.random.default_rng(seed).standard_normal((1, width, n))
    with Graph() as g:
        fn(x)
    return longest_dependency_chain(g)


def bench_path(encoders, ns, preset="drqa-passage-9", width=8):
    records = []
    for kind in encoders:
        _, label = build_encoder(kind, width, preset)
        for n in ns:
            records.append(BenchRecord(kind, label, n, 1, 1, 1, "longest_path", traced_path(kind, n, width, preset)))
    return records
