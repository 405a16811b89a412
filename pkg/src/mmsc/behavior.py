"""Meta-path behaviour encoder: node-level and path-level attention plus contrastive denoising."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .content import TASKS
from .errors import TapeError
from .graph import MetaPathIndex, metapath_neighbors, perturb


def init_behavior_params(store, d, n_node_heads, n_paths, rng):
    """``n_paths`` maps task -> number of meta-paths in that task's set."""
    lim = np.sqrt(6.0 / (2 * d))
    lim_att = np.sqrt(6.0 / (2 * d + 1))
    lim_mix = np.sqrt(6.0 / (n_node_heads * d + d))
    for task in TASKS:
        p = f"behavior.{task}"
        for h in range(n_node_heads):
            store.add(f"{p}.wa{h}", rng.uniform(-lim, lim, (d, d)))
        for k in range(n_paths[task]):
            for h in range(n_node_heads):
                store.add(f"{p}.att{k}.{h}", rng.uniform(-lim_att, lim_att, 2 * d))
        store.add(f"{p}.mix", rng.uniform(-lim_mix, lim_mix, (n_node_heads * d, d)))
        store.add(f"{p}.wb", rng.uniform(-lim, lim, (d, d)))
        store.add(f"{p}.b", np.zeros(d))
        store.add(f"{p}.sv", rng.uniform(-lim_att, lim_att, d))
        store.add(f"{p}.fallback", rng.uniform(-lim, lim, (d, d)))


class MaterializedIndex:
    """Meta-path neighbour lists for every item, stored CSR-style per path."""

    def __init__(self, index, n_items):
        self.paths = index.paths
        self.n_items = n_items
        self._csr = []
        for k in range(len(index.paths)):
            lists = [index.neighbors(i, k) for i in range(n_items)]
            lens = np.array([len(x) for x in lists], dtype=np.int64)
            indptr = np.concatenate([[0], np.cumsum(lens)])
            indices = np.concatenate(lists).astype(np.int64) if indptr[-1] else np.empty(0, np.int64)
            self._csr.append((indptr, indices))

    @classmethod
    def build(cls, graph, paths, fanout_cap, seed):
        return cls(MetaPathIndex(graph, paths, fanout_cap, seed), graph.n_items)

    def neighbors(self, item, k):
        indptr, indices = self._csr[k]
        return indices[indptr[item] : indptr[item + 1]]

    def counts(self, items, k):
        indptr, _ = self._csr[k]
        items = np.asarray(items, dtype=np.int64)
        return indptr[items + 1] - indptr[items]

    def gather(self, items, k):
        """``(segment, neighbour)`` arrays for the lists of ``items``."""
        indptr, indices = self._csr[k]
        items = np.asarray(items, dtype=np.int64)
        starts = indptr[items]
        lens = indptr[items + 1] - starts
        total = int(lens.sum())
        seg = np.repeat(np.arange(len(items)), lens)
        offs = np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens)
        return seg, indices[np.repeat(starts, lens) + offs]


def _att_halves(store, task, k, h, d):
    a = store[f"behavior.{task}.att{k}.{h}"]
    first = T.reshape(T.take(a, np.arange(d)), (d, 1))
    second = T.reshape(T.take(a, np.arange(d, 2 * d)), (d, 1))
    return first, second


def _node_attention(feats, centers, seg, nbrs, n_seg, store, task, k, n_heads, alphas=None):
    """z for ``n_seg`` centres given edge lists into the constant feature table ``feats``."""
    d = feats.shape[1]
    heads = []
    for h in range(n_heads):
        a1, a2 = _att_halves(store, task, k, h, d)
        score = T.add(T.take(T.matmul(feats, a1), centers[seg]), T.take(T.matmul(feats, a2), nbrs))
        alpha = T.segment_softmax(T.leaky_relu(T.reshape(score, (len(seg),))), seg, n_seg)
        if alphas is not None:
            alphas.append(alpha.data)
        proj = T.take(T.matmul(feats, store[f"behavior.{task}.wa{h}"]), nbrs)
        msg = T.mul(proj, T.reshape(alpha, (len(seg), 1)))
        heads.append(T.elu(T.segment_sum(msg, seg, n_seg)))
    return T.matmul(T.concat(heads, axis=1), store[f"behavior.{task}.mix"])


def _path_scores(z, store, task):
    """s^T tanh(W_b z + b) per row of ``z``."""
    hidden = T.tanh(T.add(T.matmul(z, store[f"behavior.{task}.wb"]), store[f"behavior.{task}.b"]))
    d = z.shape[1]
    return T.reshape(T.matmul(hidden, T.reshape(store[f"behavior.{task}.sv"], (d, 1))), (z.shape[0],))


def node_level_attention(center_h, neighbor_hs, store, task, k, n_heads, alphas=None):
    """z for one item along meta-path ``k`` of ``task``; needs at least one neighbour."""
    neighbor_hs = np.atleast_2d(np.asarray(neighbor_hs, dtype=np.float64))
    n = len(neighbor_hs)
    if n == 0 or neighbor_hs.size == 0:
        raise ValueError("node-level attention needs at least one neighbour; use the fallback")
    feats = T.constant(np.vstack([np.asarray(center_h, dtype=np.float64), neighbor_hs]))
    seg = np.zeros(n, dtype=np.int64)
    z = _node_attention(
        feats, np.array([0]), seg, np.arange(1, n + 1), 1, store, task, k, n_heads, alphas
    )
    return T.reshape(z, (z.shape[1],))


def path_level_attention(z_per_path, store, task):
    """Combine per-path node-level vectors of one item.

    ``z_per_path`` is a list of ``(z_item, z_neighbours)`` with ``z_item`` of
    shape ``[d]`` and ``z_neighbours`` ``[n_k, d]`` (``n_k`` may be 0).
    Returns ``(p, beta)``.
    """
    if not z_per_path:
        raise ValueError("path-level attention needs at least one meta-path")
    weights = []
    for _, zn in z_per_path:
        zn = T.as_tensor(zn)
        if zn.ndim == 2 and zn.shape[0] > 0:
            weights.append(T.reshape(T.tsum(_path_scores(zn, store, task)), (1,)))
        else:
            weights.append(T.constant(np.zeros(1)))
    beta = T.softmax_rows(T.concat(weights, axis=0))
    stacked = T.concat([T.reshape(T.as_tensor(zi), (1, -1)) for zi, _ in z_per_path], axis=0)
    k = len(z_per_path)
    p = T.tsum(T.mul(stacked, T.reshape(beta, (k, 1))), axis=0)
    return p, beta


def encode_behavior_batch(items, index, feats_all, store, task, n_heads, inspect=None):
    """Behaviour vectors ``[B, d]`` for distinct ``items`` of one task.

    ``index`` is a :class:`MaterializedIndex` over the task's meta-paths and
    ``feats_all`` the pooled content table ``[N, d]``. Paths with no
    neighbours drop out of the path softmax; items with no path at all use
    the learned fallback transform of their own content. When ``inspect`` is
    a dict it receives ``alpha`` (per-head attention arrays), ``alpha_seg``
    (the row each alpha entry belongs to) and ``beta`` (``(rows, values)``)
    for checking.
    """
    items = np.asarray(items, dtype=np.int64)
    n = len(items)
    row_of = {int(i): r for r, i in enumerate(items)}
    if len(row_of) != n:
        raise ValueError("encode_behavior_batch expects distinct items")
    z_pieces, w_pieces, owner = [], [], []
    for k in range(len(index.paths)):
        has = index.counts(items, k) > 0
        valid = items[has]
        if len(valid) == 0:
            continue
        _, reach = index.gather(valid, k)
        reach = np.unique(reach)
        reach = reach[index.counts(reach, k) > 0]
        targets = np.union1d(valid, reach)
        seg, nbrs = index.gather(targets, k)
        used = np.union1d(targets, nbrs)
        feats = T.constant(feats_all[used])
        local = np.searchsorted(used, targets)
        z = _node_attention(
            feats,
            local,
            seg,
            np.searchsorted(used, nbrs),
            len(targets),
            store,
            task,
            k,
            n_heads,
            None if inspect is None else inspect.setdefault("alpha", []),
        )
        if inspect is not None:
            inspect.setdefault("alpha_seg", []).extend([seg] * n_heads)
        # path weight: summed scores of the item's neighbours that have their own z
        vseg, vnbr = index.gather(valid, k)
        keep = np.isin(vnbr, targets) & (index.counts(vnbr, k) > 0)
        vseg, vnbr = vseg[keep], vnbr[keep]
        if len(vseg):
            scores = _path_scores(z, store, task)
            w = T.segment_sum(T.take(scores, np.searchsorted(targets, vnbr)), vseg, len(valid))
        else:
            w = T.constant(np.zeros(len(valid)))
        z_pieces.append(T.take(z, np.searchsorted(targets, valid)))
        w_pieces.append(w)
        owner.append(np.array([row_of[int(i)] for i in valid], dtype=np.int64))

    parts = []
    if z_pieces:
        owner = np.concatenate(owner)
        beta = T.segment_softmax(T.concat(w_pieces, axis=0), owner, n)
        if inspect is not None:
            inspect["beta"] = (owner, beta.data)
        zs = T.concat(z_pieces, axis=0)
        parts.append(T.segment_sum(T.mul(zs, T.reshape(beta, (len(owner), 1))), owner, n))
        covered = np.zeros(n, dtype=bool)
        covered[owner] = True
    else:
        covered = np.zeros(n, dtype=bool)
    lonely = np.flatnonzero(~covered)
    if len(lonely):
        fb = T.matmul(T.constant(feats_all[items[lonely]]), store[f"behavior.{task}.fallback"])
        parts.append(T.segment_sum(fb, lonely, n))
    return parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])


def encode_behavior(g, item, paths, store, provider, n_heads, fanout_cap=10, seed=0):
    """``{p_s, p_c}`` for one item; ``paths`` maps task -> list of MetaPath."""
    from .content import TaskPairEmbedding

    out = {}
    for task in TASKS:
        idx = MetaPathIndex(g, paths[task], fanout_cap, seed)
        mat = _SingleItemIndex(idx, item)
        p = encode_behavior_batch([item], mat, provider.pooled, store, task, n_heads)
        out[task] = p.data[0].copy()
    return TaskPairEmbedding(out["s"], out["c"])


class _SingleItemIndex:
    """MaterializedIndex lookalike that expands lazily, for one-off queries."""

    def __init__(self, index, item):
        self.paths = index.paths
        self._index = index

    def neighbors(self, item, k):
        return self._index.neighbors(int(item), k)

    def counts(self, items, k):
        return np.array([len(self.neighbors(i, k)) for i in np.atleast_1d(items)], dtype=np.int64)

    def gather(self, items, k):
        lists = [self.neighbors(i, k) for i in np.atleast_1d(items)]
        seg = np.repeat(np.arange(len(lists)), [len(x) for x in lists])
        nbrs = np.concatenate(lists).astype(np.int64) if lists else np.empty(0, np.int64)
        return seg, nbrs


# ---------------------------------------------------------------- denoising


def infonce_loss(anchors, positives, tau, strict=False):
    """Mean InfoNCE over a batch with in-batch negatives (other anchors).

    The positive pair sits in the denominator unless ``strict`` is set, in
    which case the denominator sums only over the other anchors.
    """
    anchors, positives = T.as_tensor(anchors), T.as_tensor(positives)
    n = anchors.shape[0]
    if n < 2:
        raise TapeError("InfoNCE needs a batch of at least 2 (no negatives otherwise)")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    a = T.normalize_rows(anchors)
    pos = T.scale(T.tsum(T.mul(a, T.normalize_rows(positives)), axis=1), 1.0 / tau)
    cross = T.scale(T.matmul(a, T.transpose(a)), 1.0 / tau)
    eye = np.eye(n)
    if strict:
        logits = T.add(T.mul(cross, 1.0 - eye), -1e300 * eye)
    else:
        logits = T.add(T.mul(cross, 1.0 - eye), T.mul(T.reshape(pos, (n, 1)), eye))
    return T.mean(T.sub(T.logsumexp_rows(logits), pos))


def ssl_pair(g, batch, drop_rate, encoder, rng, tau=0.1, strict=False):
    """Views ``(p, p')`` of ``batch`` on ``g`` and on a dropout-perturbed copy.

    ``encoder(graph, items)`` must return ``{task: Tensor [B, d]}``. Returns
    the two dicts and the summed per-task InfoNCE loss.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if len(batch) == 0:
        raise ValueError("ssl_pair needs a nonempty batch")
    view = encoder(g, batch)
    other = encoder(perturb(g, drop_rate, rng), batch)
    loss = None
    for task in TASKS:
        term = infonce_loss(view[task], other[task], tau, strict)
        loss = term if loss is None else T.add(loss, term)
    return view, other, loss


__all__ = [
    "MaterializedIndex",
    "encode_behavior",
    "encode_behavior_batch",
    "infonce_loss",
    "init_behavior_params",
    "metapath_neighbors",
    "node_level_attention",
    "path_level_attention",
    "ssl_pair",
]
