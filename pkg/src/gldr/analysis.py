"""Operation counts, dependency depth and activation memory of the encoders.

All counts are exact integers for the arithmetic implemented in this
package, so asymptotic claims can be checked without timing noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ConfigError, Graph
from .encoder import GLDRConfig, doubling_config

KINDS = ("recurrent", "self-attn", "dilated-conv")

# multiply-accumulates per position per unit of the leading term:
#   bidirectional GRU: 2 directions x 3 gates x (input + hidden matmul)
#   self-attention: pair scores + attention-weighted mix
#   GLU conv: the conv emits twice the hidden width
OP_CONSTANTS = {"recurrent": 12, "self-attn": 2, "dilated-conv": 2}


@dataclass
class CostReport:
    kind: str
    n: int
    w: int
    kernel: int
    depth: int
    ops_per_layer: int
    overall_ops: int
    min_depth_to_cover: int
    longest_path: int


@dataclass
class MemReport:
    kind: str
    n: int
    w: int
    batch: int
    activation_elements: int
    depth: int = 1
    breakdown: dict = field(default_factory=dict)


def doubling_blocks_to_cover(n: int, kernel: int = 3) -> int:
    """Fewest doubling-dilation convs whose receptive field reaches ``n``."""
    if kernel < 3:
        raise ConfigError("a kernel of size 1 never widens the receptive field")
    blocks = 0
    while 1 + (kernel - 1) * (2**blocks - 1) < n:
        blocks += 1
    return blocks


def cost_model(kind: str, n: int, w: int, kernel: int = 3, depth: int = 1) -> CostReport:
    if min(n, w, kernel, depth) < 1:
        raise ConfigError("cost_model arguments must be positive")
    c = OP_CONSTANTS.get(kind)
    if kind == "recurrent":
        per_layer, cover, path = c * w * w * n, 1, n * depth
    elif kind == "self-attn":
        per_layer, cover, path = c * w * n * n, 1, depth
    elif kind == "dilated-conv":
        per_layer, cover, path = c * kernel * w * w * n, doubling_blocks_to_cover(n, kernel), depth
    else:
        raise ConfigError(f"unknown encoder kind {kind!r}")
    return CostReport(kind, n, w, kernel, depth, per_layer, per_layer * depth, cover, path)


def longest_dependency_chain(graph: Graph) -> int:
    """Number of ops on the longest path through the recorded op DAG."""
    depth = np.zeros(len(graph.entries), dtype=np.int64)
    for i, entry in enumerate(graph.entries):
        best = 0
        for node in entry.inputs:
            j = graph.producer(node)
            if j is None:
                continue
            if j >= i:
                raise RuntimeError("recorded graph is not in topological order")
            best = max(best, depth[j])
        depth[i] = best + 1
    return int(depth.max()) if len(depth) else 0


def memory_sweep_depth(n: int) -> int:
    """Conv layers used for length ``n``: 15 at n <= 50, two more per doubling."""
    depth, covered = 15, 50
    while covered < n:
        covered *= 2
        depth += 2
    return depth


def memory_sweep_config(n: int, w: int = 100) -> GLDRConfig:
    return doubling_config((memory_sweep_depth(n) - 1) // 2, width=w, name=f"sweep-{memory_sweep_depth(n)}")


def activation_count(kind: str, n: int, w: int = 100, batch: int = 64, config: GLDRConfig | None = None) -> MemReport:
    """Elements of every tensor produced by one forward pass (inference mode).

    These are exactly the op outputs recorded by the implementations in
    :mod:`gldr.baselines` and :mod:`gldr.encoder`.
    """
    bn = batch * n
    if kind == "self-attn":
        pairs = batch * n * n
        parts = {"attention": pairs, "scores": pairs, "position_maps": 6 * bn * w}
        depth = 1
    elif kind == "dilated-conv":
        config = config or memory_sweep_config(n, w)
        width = config.width
        convs = list(config.convs())
        pre = sum(c.pre_channels for c in convs)
        post = sum(c.out_channels for c in convs if c.activation != "none")
        parts = {
            "conv_outputs": bn * pre,
            "activations": bn * post,
            "residual_sums": bn * width * sum(b.residual for b in config.blocks),
        }
        depth = config.depth
    elif kind == "recurrent":
        # per direction: input transpose, three hoisted projections, 16 per-step
        # [b, h] tensors and the output stack; then the concatenation
        parts = {"inputs": 2 * bn * w, "projections": 6 * bn * w, "steps": 32 * bn * w, "outputs": 4 * bn * w}
        depth = 1
    else:
        raise ConfigError(f"unknown encoder kind {kind!r}")
    return MemReport(kind, n, w, batch, int(sum(parts.values())), depth, parts)


def traced_elements(graph: Graph) -> int:
    """Total size of all op outputs on a recorded graph."""
    return int(sum(np.prod(e.shape, dtype=np.int64) for e in graph.entries))


def scaling_exponent(points) -> float:
    """Least-squares slope of log(measure) against log(n)."""
    if len(points) < 4:
        raise ConfigError("need at least 4 points")
    ns = np.array([p[0] for p in points], dtype=float)
    ms = np.array([p[1] for p in points], dtype=float)
    if np.any(np.diff(ns) <= 0):
        raise ConfigError("n must be strictly increasing")
    if np.any(ms <= 0):
        raise ConfigError("measures must be positive")
    return float(np.polyfit(np.log(ns), np.log(ms), 1)[0])
