"""Precomputed content embeddings and the task-specific relational fine-tuning layer."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataFormatError, DimensionError

EMB_MAGIC = b"MMEB1"
TASKS = ("s", "c")


class EmbeddingProvider:
    """Read-only map item id -> content sequence ``[S, d]``."""

    def __init__(self, sequences):
        arr = np.array(sequences, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DataFormatError(f"content must be [items, S, d], got {list(arr.shape)}")
        if not np.all(np.isfinite(arr)):
            raise DataFormatError("content embeddings contain non-finite values")
        arr.flags.writeable = False
        self.sequences = arr
        pooled = arr.mean(axis=1)
        pooled.flags.writeable = False
        self.pooled = pooled

    @property
    def n_items(self):
        return self.sequences.shape[0]

    @property
    def seq_len(self):
        return self.sequences.shape[1]

    @property
    def dim(self):
        return self.sequences.shape[2]

    def __len__(self):
        return self.n_items

    def __getitem__(self, item):
        item = int(item)
        if not 0 <= item < self.n_items:
            raise KeyError(f"item {item} unknown to the embedding provider")
        return self.sequences[item]

    def subset(self, items):
        return EmbeddingProvider(self.sequences[np.asarray(items, dtype=np.int64)])


def write_embeddings(path, sequences):
    arr = np.asarray(sequences)
    n, s, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<iii", n, s, d))
        fh.write(arr.astype("<f4").tobytes())


def load_embeddings(path, expected_dim=None):
    blob = Path(path).read_bytes()
    if not blob.startswith(EMB_MAGIC):
        raise DataFormatError(f"{path}: bad magic at byte offset 0")
    head = len(EMB_MAGIC)
    if len(blob) < head + 12:
        raise DataFormatError(f"{path}: truncated header at byte offset {len(blob)}")
    n, s, d = struct.unpack_from("<iii", blob, head)
    if n < 1 or s < 1 or d < 1:
        raise DataFormatError(f"{path}: invalid header sizes {n}x{s}x{d} at byte offset {head}")
    start = head + 12
    need = start + 4 * n * s * d
    if len(blob) < need:
        raise DataFormatError(
            f"{path}: truncated payload at byte offset {len(blob)} (expected {need} bytes)"
        )
    if len(blob) > need:
        raise DataFormatError(f"{path}: trailing bytes after byte offset {need}")
    arr = np.frombuffer(blob, dtype="<f4", count=n * s * d, offset=start).reshape(n, s, d)
    if expected_dim is not None and d != expected_dim:
        raise ConfigError(f"embedding dimension {d} does not match model dimension {expected_dim}")
    return EmbeddingProvider(arr.astype(np.float64))


# ---------------------------------------------------------------- attention


def init_content_params(store, d, n_heads, rng):
    if d % n_heads:
        raise ConfigError(f"dimension {d} is not divisible by {n_heads} heads")
    dh = d // n_heads
    limit = np.sqrt(6.0 / (d + dh))
    for task in TASKS:
        for l in range(n_heads):
            for kind in ("q", "k", "v"):
                store.add(f"content.{task}.{kind}{l}", rng.uniform(-limit, limit, (d, dh)))
        lim_o = np.sqrt(6.0 / (2 * d))
        store.add(f"content.{task}.o", rng.uniform(-lim_o, lim_o, (d, d)))


def head_params(store, task, n_heads):
    heads = [
        (store[f"content.{task}.q{l}"], store[f"content.{task}.k{l}"], store[f"content.{task}.v{l}"])
        for l in range(n_heads)
    ]
    return heads, store[f"content.{task}.o"]


def mh_self_attention(seq, heads, out_map, return_weights=False):
    """Multi-head self-attention over ``[S, d]`` or a batch ``[B, S, d]``.

    Each head attends with softmax(Q K^T / sqrt(d/L)); heads are concatenated
    along features and mapped by ``out_map`` ([d, d]).
    """
    seq = T.as_tensor(seq)
    single = seq.ndim == 2
    if single:
        seq = T.reshape(seq, (1,) + seq.shape)
    b, s, d = seq.shape
    n_heads = len(heads)
    if d % n_heads:
        raise ConfigError(f"dimension {d} is not divisible by {n_heads} heads")
    dh = d // n_heads
    if out_map.shape != (d, d):
        raise DimensionError(f"output map must be [{d}, {d}], got {list(out_map.shape)}")
    flat = T.reshape(seq, (b * s, d))
    outs, weights = [], []
    for wq, wk, wv in heads:
        if wq.shape != (d, dh):
            raise DimensionError(f"head projection must be [{d}, {dh}], got {list(wq.shape)}")
        q = T.reshape(T.matmul(flat, wq), (b, s, dh))
        k = T.reshape(T.matmul(flat, wk), (b, s, dh))
        v = T.reshape(T.matmul(flat, wv), (b, s, dh))
        scores = T.scale(T.bmm(q, T.transpose(k)), 1.0 / np.sqrt(dh))
        att = T.softmax_rows(scores)
        weights.append(att.data)
        outs.append(T.bmm(att, v))
    joined = T.reshape(T.concat(outs, axis=2), (b * s, d))
    out = T.reshape(T.matmul(joined, out_map), (b, s, d))
    if single:
        out = T.reshape(out, (s, d))
    if return_weights:
        return out, weights
    return out


def encode_content_batch(items, provider, store, n_heads, task):
    """Pooled relational-fine-tuned content vectors ``[B, d]`` for one task."""
    seq = T.constant(provider.sequences[np.asarray(items, dtype=np.int64)])
    heads, out_map = head_params(store, task, n_heads)
    attended = mh_self_attention(seq, heads, out_map)
    return T.mean(attended, axis=1)


@dataclass(frozen=True)
class TaskPairEmbedding:
    s_vec: np.ndarray
    c_vec: np.ndarray

    def __getitem__(self, task):
        return self.s_vec if task in ("s", 0) else self.c_vec


def encode_content(item, provider, store, n_heads):
    provider[item]
    q_s = encode_content_batch([item], provider, store, n_heads, "s")
    q_c = encode_content_batch([item], provider, store, n_heads, "c")
    return TaskPairEmbedding(q_s.data[0].copy(), q_c.data[0].copy())
