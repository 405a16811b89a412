import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmsc.coldstart import (
    ContentIndex,
    coldstart_embed,
    coldstart_evaluate,
    coldstart_pairs,
    holdout_items,
)
from mmsc.content import EmbeddingProvider
from mmsc.errors import DegenerateInputError
from mmsc.evaluation import rank_batch
from mmsc.graph import Relation
from mmsc.synth import SynthConfig, generate_planted_graph

S, C = Relation.SUB, Relation.COMP


def setup(n=12, d=4, seed=0):
    rng = np.random.default_rng(seed)
    pooled = rng.standard_normal((n, d))
    final = {"s": rng.standard_normal((n, 3)), "c": rng.standard_normal((n, 3))}
    return pooled, final


def test_exact_match_k1_is_bit_identical():
    pooled, final = setup()
    index = ContentIndex(pooled)
    for x in range(len(pooled)):
        e = coldstart_embed(pooled[x] * 3.0, index, final, k=1)
        assert np.array_equal(e["s"], final["s"][x]) and np.array_equal(e["c"], final["c"][x])


def test_full_pool_is_global_mean_and_clamps(caplog):
    pooled, final = setup()
    index = ContentIndex(pooled)
    e = coldstart_embed(np.ones(4), index, final, k=len(pooled))
    assert np.allclose(e["s"], final["s"].mean(axis=0), atol=1e-15)
    with caplog.at_level(logging.WARNING):
        big = coldstart_embed(np.ones(4), index, final, k=100)
    assert "exceeds" in caplog.text
    assert np.allclose(big["c"], final["c"].mean(axis=0), atol=1e-15)


def test_sequence_input_is_pooled():
    pooled, final = setup()
    index = ContentIndex(pooled)
    seq = np.stack([pooled[5] + 1.0, pooled[5] - 1.0])
    assert np.array_equal(coldstart_embed(seq, index, final, 1)["s"], final["s"][5])


def test_ties_go_to_lower_id():
    pooled = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [1.0, 0.0]])
    index = ContentIndex(pooled, items=[7, 3, 5, 9])
    assert index.top_k([1.0, 0.0], 1).tolist() == [5]
    assert index.top_k([1.0, 0.0], 3).tolist() == [5, 7, 9]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_index_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    # coarse grid vectors so exact ties happen often
    pooled = rng.integers(-2, 3, (15, 3)).astype(float)
    pooled[np.linalg.norm(pooled, axis=1) == 0] = 1.0
    ids = rng.permutation(100)[:15]
    query = rng.integers(-2, 3, 3).astype(float) + 0.5
    perm = rng.permutation(15)
    a = ContentIndex(pooled, ids).top_k(query, 5)
    b = ContentIndex(pooled[perm], ids[perm]).top_k(query, 5)
    assert np.array_equal(a, b)


def test_errors():
    pooled, final = setup()
    index = ContentIndex(pooled)
    with pytest.raises(ValueError):
        coldstart_embed(np.ones(4), index, final, k=0)
    with pytest.raises(DegenerateInputError):
        coldstart_embed(np.zeros(4), index, final, k=1)
    with pytest.raises(ValueError):
        ContentIndex(np.empty((0, 4)))
    prov = EmbeddingProvider(pooled[:, None, :])
    with pytest.raises(ValueError):
        coldstart_evaluate([], {}, prov, np.arange(12), final)


def test_holdout_and_pairs():
    _, truth = generate_planted_graph(SynthConfig(n_clusters=10, items_per_cluster=10))
    rng = np.random.default_rng(0)
    cold = holdout_items(100, 0.1, rng)
    assert len(cold) == 10 and len(set(cold.tolist())) == 10
    warm = np.setdiff1d(np.arange(100), cold)
    pairs = coldstart_pairs(truth, cold, warm, rng)
    for rel in (S, C):
        q, p = pairs[rel]
        assert len(q) == 10
        for a, b in zip(q, p):
            assert truth.is_true(a, b, rel) and b in warm


def test_duplicates_reduce_to_warm_metrics():
    rng = np.random.default_rng(1)
    n_warm = 30
    seqs = rng.standard_normal((n_warm + 3, 2, 4))
    twins = {30: 4, 31: 11, 32: 20}
    for cold, src in twins.items():
        seqs[cold] = seqs[src]
    prov = EmbeddingProvider(seqs)
    final = {"s": rng.standard_normal((n_warm + 3, 5)), "c": rng.standard_normal((n_warm + 3, 5))}
    warm = np.arange(n_warm)
    cold = np.array(list(twins))
    partners = np.array([7, 2, 25])
    pairs = {S: (cold, partners), C: (cold, partners[::-1].copy())}
    report = coldstart_evaluate(cold, pairs, prov, warm, final, k=1, rng=np.random.default_rng(2))
    for rel in (S, C):
        t = report.test_set[rel]
        assert np.all(np.isin(t.negatives, warm))
        src = np.array([twins[int(c)] for c in t.queries])
        ok = ~np.any(t.negatives == src[:, None], axis=1)
        warm_ranks = rank_batch(final[rel.code], src, t.positives, t.negatives)
        cold_emb = {k: v.copy() for k, v in final.items()}
        cold_emb[rel.code][t.queries] = final[rel.code][src]
        cold_ranks = rank_batch(cold_emb[rel.code], t.queries, t.positives, t.negatives)
        assert np.array_equal(cold_ranks[ok], warm_ranks[ok])
    assert report.counts == {"s": 3, "c": 3}
