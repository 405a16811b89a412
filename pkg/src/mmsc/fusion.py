"""Gated fusion: content with behaviour per task, then across the two tasks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .content import TASKS
from .errors import DimensionError


def init_gate_params(store, d, rng):
    lim = np.sqrt(6.0 / (2 * d))
    for level in ("sem", "task"):
        for task in TASKS:
            p = f"gate.{level}.{task}"
            store.add(f"{p}.w1", rng.uniform(-lim, lim, (d, d)))
            store.add(f"{p}.w2", rng.uniform(-lim, lim, (d, d)))
            store.add(f"{p}.b", np.zeros(d))


def gate(primary, auxiliary, w1, w2, b, return_gate=False):
    """g = sigmoid(primary W1 + auxiliary W2 + b); out = g*primary + (1-g)*auxiliary.

    Works on vectors ``[d]`` or row batches ``[n, d]``.
    """
    primary, auxiliary = T.as_tensor(primary), T.as_tensor(auxiliary)
    if primary.shape != auxiliary.shape:
        raise DimensionError(
            f"gate inputs differ in shape: {list(primary.shape)} vs {list(auxiliary.shape)}"
        )
    d = primary.shape[-1]
    if w1.shape != (d, d) or w2.shape != (d, d) or b.shape != (d,):
        raise DimensionError(f"gate parameters do not match dimension {d}")
    vector = primary.ndim == 1
    if vector:
        primary = T.reshape(primary, (1, d))
        auxiliary = T.reshape(auxiliary, (1, d))
    g = T.sigmoid(T.add(T.add(T.matmul(primary, w1), T.matmul(auxiliary, w2)), b))
    out = T.lerp(auxiliary, primary, g)
    if vector:
        out = T.reshape(out, (d,))
        g = T.reshape(g, (d,))
    return (out, g) if return_gate else out


def _params(store, level, task):
    p = f"gate.{level}.{task}"
    return store[f"{p}.w1"], store[f"{p}.w2"], store[f"{p}.b"]


def semantic_gate(q, p, store, task):
    """Fuse content ``q`` and behaviour ``p``; the gate weights ``p``."""
    return gate(p, q, *_params(store, "sem", task))


def task_gate(a_s, a_c, store):
    """Cross-task fusion; each task's own representation takes the gate side."""
    e_s = gate(a_s, a_c, *_params(store, "task", "s"))
    e_c = gate(a_c, a_s, *_params(store, "task", "c"))
    return e_s, e_c


def embed_item(item, model, graph):
    """Final ``{e_s, e_c}`` of one item under ``model`` on ``graph``."""
    from .content import TaskPairEmbedding

    index = model.build_index(graph)
    e = model.embed(np.array([item]), index)
    return TaskPairEmbedding(e["s"].data[0].copy(), e["c"].data[0].copy())
