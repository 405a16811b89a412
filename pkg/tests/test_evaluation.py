import logging

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmsc.content import EmbeddingProvider
from mmsc.errors import CoverageError, DegenerateInputError
from mmsc.evaluation import (
    METRICS,
    RelationTests,
    TestSet,
    build_test_set,
    degree_group_report,
    draw_negatives,
    evaluate,
    groups_to_csv,
    metrics_at_10,
    rank_batch,
    rank_of_positive,
    rank_test_set,
    report_from_ranks,
)
from mmsc.graph import Behavior, EdgeRecord, Relation, build_graph
from mmsc.judge import AlwaysJudge, OracleJudge
from mmsc.model import MMSCModel, ModelConfig
from mmsc.synth import SynthConfig, generate_planted_graph

S, C = Relation.SUB, Relation.COMP


def brute_metrics(ranks):
    """High-precision reference, one rank at a time."""
    mpmath.mp.dps = 50
    n = len(ranks)
    h = mrr = ndcg = mpmath.mpf(0)
    for r in ranks:
        if r <= 10:
            h += 1
            mrr += mpmath.mpf(1) / r
            ndcg += 1 / mpmath.log(r + 1, 2)
    return {"H@10": float(h / n), "MRR@10": float(mrr / n), "NDCG@10": float(ndcg / n)}


def sort_rank(query, positive, negatives):
    """Rank by sorting all candidates, positive placed after equal-scoring negatives."""
    unit = lambda x: x / np.linalg.norm(x)
    q = unit(query)
    scored = [(float(unit(positive) @ q), 0)] + [(float(unit(n) @ q), 1) for n in negatives]
    scored.sort(key=lambda t: (-t[0], -t[1]))
    return 1 + [flag for _, flag in scored].index(0)


def test_metric_examples():
    assert metrics_at_10([1, 1, 1]) == {"H@10": 1.0, "MRR@10": 1.0, "NDCG@10": 1.0}
    m = metrics_at_10([3])
    assert m["H@10"] == 1.0 and m["MRR@10"] == 1 / 3 and m["NDCG@10"] == 0.5
    assert metrics_at_10([11]) == {"H@10": 0.0, "MRR@10": 0.0, "NDCG@10": 0.0}
    with pytest.raises(ValueError):
        metrics_at_10([])
    with pytest.raises(ValueError):
        metrics_at_10([0, 2])


def test_metrics_match_reference_exactly():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        ranks = rng.integers(1, 30, size=rng.integers(1, 40))
        assert metrics_at_10(ranks) == brute_metrics(ranks.tolist())


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 2000), min_size=1, max_size=50))
def test_metrics_bounded_and_ordered(ranks):
    m = metrics_at_10(ranks)
    assert all(0 <= m[k] <= 1 for k in METRICS)
    assert m["MRR@10"] <= m["NDCG@10"] <= m["H@10"]


def test_rank_examples():
    q = np.array([1.0, 0.0])
    pos = np.array([0.9, np.sqrt(1 - 0.81)])
    negs = [np.array([0.5, np.sqrt(0.75)]), np.array([0.1, np.sqrt(0.99)])]
    assert rank_of_positive(q, pos, negs) == 1
    assert rank_of_positive(q, pos, negs + [pos.copy()]) == 2
    with pytest.raises(DegenerateInputError):
        rank_of_positive(np.zeros(2), pos, negs)
    with pytest.raises(ValueError):
        rank_of_positive(q, pos, np.empty((0, 2)))


def test_rank_matches_sort_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        q, p = rng.standard_normal(3), rng.standard_normal(3)
        negs = rng.standard_normal((rng.integers(1, 20), 3))
        if rng.random() < 0.3:
            negs[0] = p * 2.0  # exact tie in cosine
        assert rank_of_positive(q, p, negs) == sort_rank(q, p, negs)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_rank_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    q, p = rng.standard_normal(4), rng.standard_normal(4)
    negs = rng.standard_normal((15, 4))
    assert rank_of_positive(q, p, negs) == rank_of_positive(q, p, negs[rng.permutation(15)])


def test_rank_batch_agrees_with_scalar():
    rng = np.random.default_rng(2)
    emb = rng.standard_normal((30, 5))
    queries, positives = rng.integers(0, 30, 12), rng.integers(0, 30, 12)
    negatives = rng.integers(0, 30, (12, 7))
    got = rank_batch(emb, queries, positives, negatives)
    for i in range(12):
        assert got[i] == rank_of_positive(emb[queries[i]], emb[positives[i]], emb[negatives[i]])


def test_draw_negatives():
    rng = np.random.default_rng(3)
    out = draw_negatives(5, [0, 1], [1, 4], 1000, rng)
    assert out.shape == (2, 3)
    assert sorted(out[0]) == [2, 3, 4] and sorted(out[1]) == [0, 2, 3]
    out = draw_negatives(50, [7] * 20, [9] * 20, 10, rng)
    for row in out:
        assert len(set(row.tolist())) == 10 and 7 not in row and 9 not in row


def test_small_universe_cap():
    recs = [EdgeRecord(0, 1, Behavior.CO_VIEW), EdgeRecord(2, 3, Behavior.CO_PURCHASE)]
    train, ts = build_test_set(build_graph(5, recs), None, np.random.default_rng(0))
    assert ts[S].negatives.shape[1] == 3
    assert train.n_edges() == 0


def test_reject_all_judge_gives_empty_set(caplog):
    g, _ = generate_planted_graph(SynthConfig(n_clusters=4, items_per_cluster=5))
    with caplog.at_level(logging.WARNING):
        train, ts = build_test_set(g, AlwaysJudge(False), np.random.default_rng(0))
    assert len(ts) == 0
    assert "empty" in caplog.text
    # candidates still leave the training graph
    assert train.n_edges() < g.n_edges()


def test_oracle_test_pairs_are_true_and_held_out():
    cfg = SynthConfig(n_clusters=10, items_per_cluster=6, seed=2)
    g, truth = generate_planted_graph(cfg)
    from mmsc.synth import inject_noise

    noisy = inject_noise(g, truth, 0.5, np.random.default_rng(1))
    train, ts = build_test_set(noisy, OracleJudge(truth), np.random.default_rng(4))
    assert len(ts[S]) > 0 and len(ts[C]) > 0
    for rel in (S, C):
        t = ts[rel]
        for q, p, negs in zip(t.queries, t.positives, t.negatives):
            assert truth.is_true(q, p, rel)
            assert not train.has_edge(q, p, rel)
            assert q not in negs and p not in negs
        assert ts.candidates[rel] >= len(t)


def test_coverage_error_lists_items():
    ts = TestSet(10, {S: RelationTests(np.array([0, 12]), np.array([1, 2]), np.array([[3], [4]])),
                      C: RelationTests(np.array([0]), np.array([11]), np.array([[5]]))})
    emb = {"s": np.ones((10, 2)), "c": np.ones((10, 2))}
    with pytest.raises(CoverageError) as err:
        rank_test_set(emb, ts)
    assert err.value.items == [11, 12]


def random_setup(n=1100, seed=0):
    rng = np.random.default_rng(seed)
    prov = EmbeddingProvider(rng.standard_normal((n, 2, 8)))
    pairs = [EdgeRecord(int(u), int(v), Behavior.CO_VIEW if k % 2 else Behavior.CO_PURCHASE)
             for k, (u, v) in enumerate(rng.integers(0, n, (3 * n, 2))) if u != v]
    return prov, build_graph(n, pairs)


def test_null_model_hit_rate():
    prov, g = random_setup()
    model = MMSCModel(ModelConfig(dim=8, seed=0), prov)
    train, ts = build_test_set(g, None, np.random.default_rng(1))
    report = evaluate(model, train, ts)
    p0 = 10 / 1001
    for rel in (S, C):
        n = report.counts[rel.code]
        sd = np.sqrt(p0 * (1 - p0) / n)
        assert abs(report.value(rel, "H@10") - p0) < 3 * sd


def test_partition_identity_and_csv():
    prov, g = random_setup(n=300, seed=1)
    model = MMSCModel(ModelConfig(dim=8, seed=1), prov)
    train, ts = build_test_set(g, None, np.random.default_rng(2))
    ranks = rank_test_set(model.embed_all(train), ts)
    report = report_from_ranks(ranks)
    rows = degree_group_report(ranks, ts, train, n_groups=10)
    for rel in (S, C):
        mine = [r for r in rows if r[0] == rel.code]
        total = sum(r[2] for r in mine)
        assert total == report.counts[rel.code]
        for k, name in enumerate(METRICS):
            recomposed = sum(r[2] * r[3 + k] for r in mine) / total
            assert recomposed == pytest.approx(report.value(rel, name), abs=1e-12)
    text = groups_to_csv(rows)
    assert text.splitlines()[0] == "relation,group,queries,H@10,MRR@10,NDCG@10"
    assert report.to_csv().splitlines()[0] == "relation,queries,H@10,MRR@10,NDCG@10"
    assert report.summary().count("=") == 6


def test_uniform_degree_groups_are_similar():
    # ring-like graph: every item has the same degree, ranks from random embeddings
    n = 400
    recs = [EdgeRecord(i, (i + 1) % n, Behavior.CO_VIEW) for i in range(n)]
    recs += [EdgeRecord(i, (i + 7) % n, Behavior.CO_PURCHASE) for i in range(n)]
    g = build_graph(n, recs)
    ranks = {S: np.random.default_rng(5).integers(1, 40, n)}
    ts = TestSet(n, {S: RelationTests(np.arange(n), (np.arange(n) + 1) % n, np.zeros((n, 1), int))})
    rows = degree_group_report(ranks, ts, g, n_groups=4)
    hs = np.array([r[3] for r in rows])
    p = hs.mean()
    assert np.all(np.abs(hs - p) < 4 * np.sqrt(p * (1 - p) / 100))
