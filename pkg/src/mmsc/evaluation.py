"""Link-prediction evaluation with sampled negatives and top-10 metrics."""

from __future__ import annotations

import csv
import decimal
import io
import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .content import TASKS
from .errors import CoverageError, DegenerateInputError
from .graph import RELATIONS, Relation, degree_groups

log = logging.getLogger(__name__)

N_NEGATIVES = 1000
METRICS = ("H@10", "MRR@10", "NDCG@10")


# ---------------------------------------------------------------- ranks & metrics


def _unit(x, what):
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateInputError(f"zero-norm {what} embedding")
    return x / norm


def rank_of_positive(query, positive, negatives):
    """1 + number of negatives scoring at least as high as the positive (cosine)."""
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.shape[0] == 0 or negatives.size == 0:
        raise ValueError("rank_of_positive needs at least one negative")
    q = _unit(query, "query")
    _unit(positive, "positive")
    _unit(negatives, "negative")
    # one product for all candidates, so equal vectors get equal scores
    cand = _unit(np.vstack([np.asarray(positive, dtype=np.float64), negatives]), "candidate")
    scores = cand @ q
    return 1 + int(np.count_nonzero(scores[1:] >= scores[0]))


def rank_batch(emb, queries, positives, negatives):
    """Vectorised ranks for rows of a test table against embedding matrix ``emb``."""
    unit = _unit(emb, "item")
    cand = np.concatenate(
        [np.asarray(positives, dtype=np.int64)[:, None], np.asarray(negatives, dtype=np.int64)],
        axis=1,
    )
    scores = np.einsum("ij,ikj->ik", unit[queries], unit[cand])
    return 1 + np.count_nonzero(scores[:, 1:] >= scores[:, :1], axis=1)


_CTX = decimal.Context(prec=40)
# 1 / log2(r + 1) for r = 1..10, to 40 significant digits
_GAIN = [None] + [
    _CTX.divide(_CTX.ln(decimal.Decimal(2)), _CTX.ln(decimal.Decimal(r + 1))) for r in range(1, 11)
]
_LCM = 2520  # lcm(1..10): reciprocal ranks become integers


def metrics_at_10(ranks):
    """H@10, MRR@10 and NDCG@10 of single-positive ranks, correctly rounded."""
    ranks = np.asarray(ranks, dtype=np.int64).ravel()
    if len(ranks) == 0:
        raise ValueError("metrics need at least one rank")
    if ranks.min() < 1:
        raise ValueError("ranks must be >= 1")
    n = len(ranks)
    counts = np.bincount(ranks[ranks <= 10], minlength=11)
    hits = int(counts.sum())
    recip = sum(int(counts[r]) * (_LCM // r) for r in range(1, 11))
    gain = decimal.Decimal(0)
    for r in range(1, 11):
        gain = _CTX.add(gain, _CTX.multiply(int(counts[r]), _GAIN[r]))
    gain = _CTX.divide(gain, n)
    return {
        "H@10": hits / n,
        "MRR@10": float(Fraction(recip, _LCM * n)),
        "NDCG@10": float(gain),
    }


# ---------------------------------------------------------------- test sets


@dataclass
class RelationTests:
    queries: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self):
        return len(self.queries)

    def items(self):
        return np.unique(np.concatenate([self.queries, self.positives, self.negatives.ravel()]))


@dataclass
class TestSet:
    n_items: int
    tests: dict = field(default_factory=dict)
    candidates: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def __getitem__(self, relation):
        return self.tests[Relation(relation)]

    def __len__(self):
        return sum(len(t) for t in self.tests.values())

    def items(self):
        parts = [t.items() for t in self.tests.values() if len(t)]
        return np.unique(np.concatenate(parts)) if parts else np.empty(0, np.int64)


def draw_negatives(n_items, queries, positives, n_negatives, rng):
    """Per query, ``k`` distinct items other than the query and its positive.

    ``k = min(n_negatives, n_items - 2)``; when that exhausts the universe
    every other item is used.
    """
    k = min(n_negatives, n_items - 2)
    out = np.empty((len(queries), k), dtype=np.int64)
    for row, (q, p) in enumerate(zip(queries, positives)):
        if k == n_items - 2:
            mask = np.ones(n_items, dtype=bool)
            mask[[q, p]] = False
            out[row] = np.flatnonzero(mask)
            continue
        pool = rng.choice(n_items - 2, size=k, replace=False)
        lo, hi = sorted((int(q), int(p)))
        pool = pool + (pool >= lo)
        pool = pool + (pool >= hi)
        out[row] = pool
    return out


def _empty_tests():
    return RelationTests(
        np.empty(0, np.int64), np.empty(0, np.int64), np.empty((0, 0), np.int64)
    )


def build_test_set(g, judge, rng, n_negatives=N_NEGATIVES):
    """Hold out one edge per item per relation; keep those the judge confirms.

    Every candidate edge leaves the returned training graph whether or not
    the judge keeps it. ``judge=None`` keeps all candidates. Returns
    ``(train_graph, TestSet)``.
    """
    for rel in RELATIONS:
        if g.n_edges(rel) == 0:
            raise ValueError(f"graph has no {rel.name.lower()} edges to hold out")
    removed = {}
    tests = {}
    candidates = {}
    rejected_all = True
    for rel in RELATIONS:
        taken = set()
        chosen = []
        for item in range(g.n_items):
            nbrs = g.neighbors(item, rel)
            if len(nbrs) == 0:
                continue
            v = int(nbrs[rng.integers(len(nbrs))])
            pair = (min(item, v), max(item, v))
            if pair in taken:
                continue
            taken.add(pair)
            chosen.append((item, v))
        removed[rel] = np.array([sorted(p) for p in chosen], dtype=np.int64).reshape(-1, 2)
        candidates[rel] = len(chosen)
        kept = []
        for u, v in chosen:
            try:
                ok = True if judge is None else bool(judge(u, v, rel))
            except Exception as exc:  # a broken judge answer drops the pair
                log.warning("judge failed on test pair (%d, %d): %s", u, v, exc)
                ok = False
            if ok:
                kept.append((u, v))
        if kept:
            rejected_all = False
            q = np.array([u for u, _ in kept], dtype=np.int64)
            p = np.array([v for _, v in kept], dtype=np.int64)
            tests[rel] = RelationTests(q, p, draw_negatives(g.n_items, q, p, n_negatives, rng))
        else:
            tests[rel] = _empty_tests()
    if rejected_all:
        log.warning("judge rejected every test candidate; the test set is empty")
    return g.without(removed), TestSet(g.n_items, tests, candidates)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    metrics: dict  # relation code -> {metric: value}
    counts: dict  # relation code -> number of test queries
    groups: list | None = None  # rows of the degree-group table

    def value(self, relation, metric):
        return self.metrics[Relation(relation).code][metric]

    def summary(self):
        parts = []
        for rel in RELATIONS:
            for m in METRICS:
                v = self.metrics.get(rel.code, {}).get(m, float("nan"))
                parts.append(f"{rel.code}_{m}={v:.6f}")
        return " ".join(parts)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["relation", "queries"] + list(METRICS))
        for rel in RELATIONS:
            row = self.metrics.get(rel.code)
            if row is None:
                continue
            w.writerow([rel.code, self.counts[rel.code]] + [f"{row[m]:.6f}" for m in METRICS])
        return buf.getvalue()


def _check_coverage(test_set, n_items):
    items = test_set.items()
    bad = items[(items < 0) | (items >= n_items)]
    if len(bad):
        raise CoverageError([int(i) for i in bad])


def rank_test_set(emb, test_set):
    """``{relation: ranks}`` for precomputed ``{task: [N, d]}`` embeddings."""
    n_items = next(iter(emb.values())).shape[0]
    _check_coverage(test_set, n_items)
    out = {}
    for rel in RELATIONS:
        t = test_set[rel]
        if len(t) == 0:
            continue
        out[rel] = rank_batch(emb[rel.code], t.queries, t.positives, t.negatives)
    return out


def report_from_ranks(ranks):
    metrics = {rel.code: metrics_at_10(r) for rel, r in ranks.items()}
    counts = {rel.code: len(r) for rel, r in ranks.items()}
    return EvalReport(metrics, counts)


def evaluate(model, graph, test_set, embeddings=None):
    """Metrics of ``model`` (embedding items on ``graph``) over ``test_set``."""
    if test_set.n_items != model.n_items:
        items = test_set.items()
        raise CoverageError([int(i) for i in items[items >= model.n_items]])
    emb = embeddings if embeddings is not None else model.embed_all(graph)
    return report_from_ranks(rank_test_set(emb, test_set))


def degree_group_report(ranks, test_set, graph, n_groups=10):
    """Per query-degree-group metrics; rows ``(relation, group, queries, H, MRR, NDCG)``."""
    groups = degree_groups(graph, n_groups)
    rows = []
    for rel, r in ranks.items():
        g_of = groups[test_set[rel].queries]
        for gi in range(n_groups):
            sel = r[g_of == gi]
            if len(sel) == 0:
                continue
            m = metrics_at_10(sel)
            rows.append((rel.code, gi, len(sel), m["H@10"], m["MRR@10"], m["NDCG@10"]))
    return rows


def groups_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["relation", "group", "queries"] + list(METRICS))
    for rel, gi, n, h, m, nd in rows:
        w.writerow([rel, gi, n, f"{h:.6f}", f"{m:.6f}", f"{nd:.6f}"])
    return buf.getvalue()


__all__ = [
    "EvalReport",
    "TASKS",
    "TestSet",
    "build_test_set",
    "degree_group_report",
    "draw_negatives",
    "evaluate",
    "metrics_at_10",
    "rank_batch",
    "rank_of_positive",
]
