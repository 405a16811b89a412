"""Embeddings for items never seen in training, borrowed from their content neighbours."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .content import TASKS, TaskPairEmbedding
from .errors import DegenerateInputError, NumericalError
from .evaluation import RelationTests, TestSet, draw_negatives, rank_batch, report_from_ranks
from .graph import RELATIONS, RelGraph

log = logging.getLogger(__name__)


class ContentIndex:
    """Exact cosine top-k over pooled content vectors of the training items.

    ``items`` are the ids the rows stand for. Ties go to the lower id.
    """

    def __init__(self, pooled, items=None):
        pooled = np.asarray(pooled, dtype=np.float64)
        if pooled.ndim != 2 or len(pooled) == 0:
            raise ValueError("content index needs a nonempty [n, d] matrix")
        if not np.all(np.isfinite(pooled)):
            raise ValueError("content index vectors must be finite")
        items = np.arange(len(pooled)) if items is None else np.asarray(items, dtype=np.int64)
        if len(items) != len(pooled):
            raise ValueError("one item id per row is required")
        norms = np.linalg.norm(pooled, axis=1)
        if np.any(norms == 0):
            raise DegenerateInputError("zero-norm content vector in the index")
        order = np.argsort(items, kind="stable")
        self.items = items[order]
        self._unit = (pooled / norms[:, None])[order]

    def __len__(self):
        return len(self.items)

    def top_k(self, query, k):
        q = np.asarray(query, dtype=np.float64)
        norm = np.linalg.norm(q)
        if norm == 0:
            raise DegenerateInputError("zero-norm cold-start query")
        scores = self._unit @ (q / norm)
        # rows are sorted by id, so a stable sort on -score breaks ties by lower id
        best = np.argsort(-scores, kind="stable")[:k]
        return self.items[best]


def coldstart_embed(cold_seq, index, final_embeddings, k=5):
    """Mean of the stored final embeddings of the ``k`` nearest training items.

    ``cold_seq`` is the item's content sequence ``[S, d]`` (or an already
    pooled vector); ``final_embeddings`` maps task -> ``[N, d]`` array
    indexed by item id. Parameters are never touched.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise ValueError("empty content index")
    if k > len(index):
        log.warning("k=%d exceeds the %d indexed items; using all of them", k, len(index))
        k = len(index)
    seq = np.asarray(cold_seq, dtype=np.float64)
    h = seq.mean(axis=0) if seq.ndim == 2 else seq
    chosen = index.top_k(h, k)
    vec = {t: np.mean(np.asarray(final_embeddings[t])[chosen], axis=0) for t in TASKS}
    return TaskPairEmbedding(vec["s"], vec["c"])


def holdout_items(n_items, fraction, rng):
    """A sorted random ``round(fraction * n_items)`` subset of items."""
    k = int(round(fraction * n_items))
    return np.sort(rng.choice(n_items, size=k, replace=False))


def coldstart_pairs(truth, cold, warm, rng):
    """One ground-truth partner among warm items per cold item and relation."""
    warm_set = set(int(w) for w in warm)
    out = {}
    for rel in RELATIONS:
        q, p = [], []
        for item in cold:
            cands = [v for v in truth.partners(int(item), rel) if v in warm_set]
            if cands:
                q.append(int(item))
                p.append(int(cands[rng.integers(len(cands))]))
        out[rel] = (np.array(q, dtype=np.int64), np.array(p, dtype=np.int64))
    return out


def coldstart_evaluate(cold, pairs, provider, warm, warm_embeddings, k=5, rng=None,
                       n_negatives=1000):
    """Rank each cold item's partner among warm negatives using borrowed embeddings.

    ``warm_embeddings`` maps task -> ``[N, d]`` over the full item id range
    (rows of cold items are ignored). ``pairs`` maps relation ->
    ``(cold queries, warm positives)``.
    """
    cold = np.asarray(cold, dtype=np.int64)
    if len(cold) == 0:
        raise ValueError("no held-out items to evaluate")
    rng = np.random.default_rng(0) if rng is None else rng
    warm = np.sort(np.asarray(warm, dtype=np.int64))
    index = ContentIndex(provider.pooled[warm], warm)
    emb = {t: np.array(warm_embeddings[t], dtype=np.float64, copy=True) for t in TASKS}
    for item in cold:
        e = coldstart_embed(provider[item], index, warm_embeddings, k)
        for t in TASKS:
            emb[t][item] = e[t]
    # negatives come from the warm universe only; map through positions in ``warm``
    ranks = {}
    tests = {}
    for rel in RELATIONS:
        q, p = pairs[rel]
        if len(q) == 0:
            continue
        pos_idx = np.searchsorted(warm, p)
        neg_idx = draw_negatives(len(warm) + 1, np.full(len(q), len(warm)), pos_idx,
                                 n_negatives, rng)
        negs = warm[neg_idx]
        tests[rel] = RelationTests(q, p, negs)
        ranks[rel] = rank_batch(emb[rel.code], q, p, negs)
    if not ranks:
        raise ValueError("held-out items have no ground-truth partners among warm items")
    report = report_from_ranks(ranks)
    report.test_set = TestSet(provider.n_items, tests)
    return report


# ---------------------------------------------------------------- pipeline


def warm_subgraph(g, warm):
    """Edges among ``warm`` items, relabelled to positions ``0..len(warm)-1``."""
    remap = -np.ones(g.n_items, dtype=np.int64)
    remap[warm] = np.arange(len(warm))
    pairs = {}
    for rel in RELATIONS:
        e = g.edges(rel)
        keep = (remap[e[:, 0]] >= 0) & (remap[e[:, 1]] >= 0)
        pairs[rel] = remap[e[keep]]
    return RelGraph(len(warm), pairs)


class WarmJudge:
    """Wraps a judge over original ids so it answers for warm positions."""

    def __init__(self, judge, warm):
        self.judge = judge
        self.warm = np.asarray(warm)

    def __call__(self, a, b, relation):
        return self.judge(int(self.warm[a]), int(self.warm[b]), relation)


@dataclass
class ColdstartRun:
    report: object
    cold: np.ndarray
    warm: np.ndarray
    params_before: str  # sha256 of all parameters right after training
    params_after: str  # same, after cold-start inference
    train: object


def run_coldstart(graph, provider, truth, model_cfg, train_cfg, judge=None, holdout=0.1, k=5,
                  rng=None, n_negatives=1000):
    """Hold out items, train on the rest, and score the held-out items by borrowed embeddings.

    ``judge`` answers in original item ids. Raises :class:`NumericalError`
    if inference changed any model parameter.
    """
    from .model import MMSCModel
    from .trainer import fit

    rng = np.random.default_rng(0) if rng is None else rng
    cold = holdout_items(provider.n_items, holdout, rng)
    if len(cold) == 0:
        raise ValueError("holdout fraction selects no items")
    warm = np.setdiff1d(np.arange(provider.n_items), cold)
    warm_g = warm_subgraph(graph, warm)
    model = MMSCModel(model_cfg, provider.subset(warm))
    result = fit(model, warm_g, train_cfg, judge=None if judge is None else WarmJudge(judge, warm))
    before = model.params.fingerprint()
    warm_emb = model.embed_all(warm_g)
    full = {t: np.zeros((provider.n_items, warm_emb[t].shape[1])) for t in warm_emb}
    for t in warm_emb:
        full[t][warm] = warm_emb[t]
    pairs = coldstart_pairs(truth, cold, warm, rng)
    report = coldstart_evaluate(cold, pairs, provider, warm, full, k, rng, n_negatives)
    after = model.params.fingerprint()
    if after != before:
        raise NumericalError("cold-start inference changed model parameters")
    return ColdstartRun(report, cold, warm, before, after, result)
