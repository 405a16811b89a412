import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmsc import tensor as T
from mmsc.content import EmbeddingProvider, encode_content_batch
from mmsc.errors import DimensionError
from mmsc.fusion import embed_item, gate, semantic_gate, task_gate
from mmsc.graph import Behavior, EdgeRecord, build_graph
from mmsc.model import MMSCModel, ModelConfig

D = 4
finite = st.floats(-10, 10, allow_nan=False)


def zeros():
    return T.Tensor(np.zeros((D, D))), T.Tensor(np.zeros((D, D))), T.Tensor(np.zeros(D))


def random_params(rng, scale=1.0):
    return (
        T.Tensor(scale * rng.standard_normal((D, D))),
        T.Tensor(scale * rng.standard_normal((D, D))),
        T.Tensor(scale * rng.standard_normal(D)),
    )


def gate_store(rng, zero=False):
    store = T.ParamStore()
    for level in ("sem", "task"):
        for task in ("s", "c"):
            w1, w2, b = zeros() if zero else random_params(rng)
            store.add(f"gate.{level}.{task}.w1", w1.data)
            store.add(f"gate.{level}.{task}.w2", w2.data)
            store.add(f"gate.{level}.{task}.b", b.data)
    return store


def test_zero_parameters_give_midpoint():
    p, q = np.array([1.0, 2.0, -3.0, 0.5]), np.array([3.0, -2.0, 1.0, 0.5])
    out, g = gate(p, q, *zeros(), return_gate=True)
    assert np.all(g.data == 0.5)
    assert np.allclose(out.data, (p + q) / 2, atol=1e-15)


def test_saturated_gate_returns_primary():
    p, q = np.array([1.0, 2.0, -3.0, 0.5]), np.array([3.0, -2.0, 1.0, 7.0])
    w1, w2, _ = zeros()
    out = gate(p, q, w1, w2, T.Tensor(np.full(D, 50.0)))
    assert np.max(np.abs(out.data - p)) <= 1e-15
    out = gate(p, q, w1, w2, T.Tensor(np.full(D, -50.0)))
    assert np.max(np.abs(out.data - q)) <= 1e-15


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        gate(np.ones(D), np.ones(D + 1), *zeros())
    w1, w2, b = zeros()
    with pytest.raises(DimensionError):
        gate(np.ones(3), np.ones(3), w1, w2, b)


@settings(max_examples=300, deadline=None)
@given(arrays(float, (5, D), elements=finite), arrays(float, (5, D), elements=finite),
       st.integers(0, 10_000))
def test_gate_betweenness(p, q, seed):
    params = random_params(np.random.default_rng(seed), scale=3.0)
    out, g = gate(p, q, *params, return_gate=True)
    assert np.all((g.data >= 0) & (g.data <= 1))
    lo, hi = np.minimum(p, q), np.maximum(p, q)
    assert np.all((out.data >= lo) & (out.data <= hi))


@settings(max_examples=100, deadline=None)
@given(arrays(float, (3, D), elements=finite), arrays(float, (3, D), elements=finite),
       st.integers(0, 10_000))
def test_swap_identity(p, q, seed):
    w1, w2, b = random_params(np.random.default_rng(seed))
    a = gate(p, q, w1, w2, b).data
    neg = lambda t: T.Tensor(-t.data)
    swapped = gate(q, p, neg(w2), neg(w1), neg(b)).data
    assert np.allclose(a, swapped, atol=1e-9)


def test_semantic_gate_weights_behaviour_side():
    store = gate_store(np.random.default_rng(0), zero=True)
    store.set("gate.sem.s.b", np.full(D, 50.0))
    p, q = np.arange(4.0), -np.arange(4.0)
    assert np.allclose(semantic_gate(q, p, store, "s").data, p)


def test_task_gate_midpoint_and_identity_limit():
    store = gate_store(np.random.default_rng(0), zero=True)
    a_s, a_c = np.array([1.0, 0, 2, 3]), np.array([-1.0, 4, 0, 1])
    e_s, e_c = task_gate(a_s, a_c, store)
    assert np.allclose(e_s.data, (a_s + a_c) / 2) and np.allclose(e_c.data, (a_s + a_c) / 2)
    for t in ("s", "c"):
        store.set(f"gate.task.{t}.b", np.full(D, 50.0))
    e_s, e_c = task_gate(a_s, a_c, store)
    assert np.allclose(e_s.data, a_s, atol=1e-14) and np.allclose(e_c.data, a_c, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(arrays(float, (4, D), elements=finite), arrays(float, (4, D), elements=finite),
       st.integers(0, 10_000))
def test_task_gate_betweenness(a_s, a_c, seed):
    store = gate_store(np.random.default_rng(seed))
    lo, hi = np.minimum(a_s, a_c), np.maximum(a_s, a_c)
    for e in task_gate(a_s, a_c, store):
        assert np.all((e.data >= lo) & (e.data <= hi))


def small_model(zero_gates=False, content=None):
    content = np.random.default_rng(1).standard_normal((6, 2, D)) if content is None else content
    model = MMSCModel(ModelConfig(dim=D, content_heads=2, node_heads=2), EmbeddingProvider(content))
    if zero_gates:
        for name in model.params.names():
            if name.startswith("gate."):
                model.params.set(name, np.zeros_like(model.params[name].data))
    return model


def test_isolated_item_with_zero_gates_by_hand():
    model = small_model(zero_gates=True)
    g = build_graph(6, [EdgeRecord(0, 1, Behavior.CO_VIEW)])
    e = embed_item(5, model, g)
    prov, store = model.provider, model.params
    a = {}
    for t in ("s", "c"):
        q = encode_content_batch([5], prov, store, 2, t).data[0]
        p = prov.pooled[5] @ store[f"behavior.{t}.fallback"].data
        a[t] = (q + p) / 2
    mid = (a["s"] + a["c"]) / 2
    assert np.allclose(e["s"], mid, atol=1e-14) and np.allclose(e["c"], mid, atol=1e-14)


def test_twin_items_get_identical_embeddings():
    content = np.random.default_rng(2).standard_normal((6, 2, D))
    content[3] = content[2]
    model = small_model(content=content)
    recs = [EdgeRecord(2, 0, Behavior.CO_VIEW), EdgeRecord(3, 0, Behavior.CO_VIEW),
            EdgeRecord(2, 4, Behavior.CO_PURCHASE), EdgeRecord(3, 4, Behavior.CO_PURCHASE)]
    g = build_graph(6, recs)
    e2, e3 = embed_item(2, model, g), embed_item(3, model, g)
    assert np.array_equal(e2["s"], e3["s"]) and np.array_equal(e2["c"], e3["c"])
    again = embed_item(2, model, g)
    assert np.array_equal(again["s"], e2["s"])
