"""Central finite-difference check of recorded gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Graph, Tensor, backward

# Below this magnitude the relative error is measured against the floor
# instead, so round-off on near-zero gradients does not dominate.
REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor=REL_FLOOR):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    build: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    samples: int = 100,
    seed: int = 0,
    floor: float = REL_FLOOR,
) -> float:
    """Max relative error between backprop and central differences.

    ``build`` must construct the scalar loss from scratch on every call.
    Up to ``samples`` coordinates per parameter are drawn deterministically
    (all of them when the parameter is smaller).
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit parameters")
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
    with Graph() as graph:
        loss = build()
    grads = backward(graph, loss)
    rng = np.random.default_rng(seed)

    worst = 0.0
    for p in params:
        analytic = grads.get(p.id, np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        if flat.size <= samples:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=samples, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(build().data)
            flat[i] = orig - epsilon
            f_minus = float(build().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            worst = max(worst, float(relative_error(analytic[i], numeric, floor)))
    return worst
