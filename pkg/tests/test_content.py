import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmsc import tensor as T
from mmsc.content import (
    EMB_MAGIC,
    EmbeddingProvider,
    encode_content,
    encode_content_batch,
    head_params,
    init_content_params,
    load_embeddings,
    mh_self_attention,
    write_embeddings,
)
from mmsc.errors import ConfigError, DataFormatError
from mmsc.synth import SynthConfig, generate_embeddings, generate_planted_graph


def reference_attention(x, heads, wo):
    """Straight-line numpy multi-head attention, one head at a time."""
    d = x.shape[1]
    dh = d // len(heads)
    cols = []
    for wq, wk, wv in heads:
        q, k, v = x @ wq, x @ wk, x @ wv
        out = np.zeros((x.shape[0], dh))
        for i in range(x.shape[0]):
            logits = np.array([q[i] @ k[j] for j in range(x.shape[0])]) / np.sqrt(dh)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            for j in range(x.shape[0]):
                out[i] += w[j] * v[j]
        cols.append(out)
    return np.concatenate(cols, axis=1) @ wo


def params(d=4, heads=2, seed=0):
    store = T.ParamStore()
    init_content_params(store, d, heads, np.random.default_rng(seed))
    return store


def test_minimal_file(tmp_path):
    p = tmp_path / "one.emb"
    p.write_bytes(EMB_MAGIC + struct.pack("<iii", 1, 1, 2) + np.array([1, 0], "<f4").tobytes())
    prov = load_embeddings(p)
    assert prov[0].tolist() == [[1.0, 0.0]]


def test_file_roundtrip_bit_identical(tmp_path):
    arr = np.random.default_rng(0).standard_normal((7, 3, 5)).astype(np.float32)
    p = tmp_path / "x.emb"
    write_embeddings(p, arr)
    prov = load_embeddings(p)
    assert prov.sequences.astype(np.float32).tobytes() == arr.tobytes()
    write_embeddings(tmp_path / "y.emb", prov.sequences)
    assert (tmp_path / "y.emb").read_bytes() == p.read_bytes()


def test_file_errors(tmp_path):
    arr = np.ones((2, 2, 2), np.float32)
    p = tmp_path / "x.emb"
    write_embeddings(p, arr)
    blob = p.read_bytes()
    (tmp_path / "t.emb").write_bytes(blob[:-3])
    with pytest.raises(DataFormatError, match="offset"):
        load_embeddings(tmp_path / "t.emb")
    (tmp_path / "m.emb").write_bytes(b"NOPE!" + blob[5:])
    with pytest.raises(DataFormatError, match="offset 0"):
        load_embeddings(tmp_path / "m.emb")
    with pytest.raises(ConfigError):
        load_embeddings(p, expected_dim=3)


def test_provider_rejects_bad_input():
    with pytest.raises(DataFormatError):
        EmbeddingProvider(np.ones((2, 3)))
    with pytest.raises(DataFormatError):
        EmbeddingProvider(np.full((1, 1, 2), np.nan))
    with pytest.raises(KeyError):
        EmbeddingProvider(np.ones((2, 1, 2)))[5]


def test_single_token_collapse():
    store = params()
    heads, wo = head_params(store, "s", 2)
    x = np.random.default_rng(1).standard_normal((1, 4))
    got = mh_self_attention(x, heads, wo).data
    v = np.concatenate([x @ h[2].data for h in heads], axis=1)
    assert np.allclose(got, v @ wo.data, atol=1e-14)


def test_identical_tokens_give_identical_rows():
    store = params()
    heads, wo = head_params(store, "c", 2)
    row = np.random.default_rng(2).standard_normal(4)
    out = mh_self_attention(np.stack([row, row]), heads, wo).data
    assert np.array_equal(out[0], out[1])


@pytest.mark.parametrize("seed", range(10))
def test_matches_reference_implementation(seed):
    store = params(seed=seed)
    heads, wo = head_params(store, "s", 2)
    x = np.random.default_rng(seed + 100).standard_normal((3, 4))
    ref = reference_attention(x, [tuple(w.data for w in h) for h in heads], wo.data)
    assert np.allclose(mh_self_attention(x, heads, wo).data, ref, atol=1e-12)


def test_heads_must_divide_dimension():
    with pytest.raises(ConfigError):
        init_content_params(T.ParamStore(), 5, 2, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_attention_rows_stochastic_and_equivariant(seed, s):
    rng = np.random.default_rng(seed)
    store = params(d=8, heads=2, seed=seed)
    heads, wo = head_params(store, "s", 2)
    x = rng.standard_normal((s, 8)) * 3
    out, weights = mh_self_attention(x, heads, wo, return_weights=True)
    for w in weights:
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-9)
    perm = rng.permutation(s)
    permuted = mh_self_attention(x[perm], heads, wo).data
    assert np.allclose(permuted, out.data[perm], atol=1e-12)


def test_pooling_and_shared_params():
    store = params(d=4, heads=2, seed=3)
    for l in range(2):
        for kind in "qkv":
            store.set(f"content.c.{kind}{l}", store[f"content.s.{kind}{l}"].data)
    store.set("content.c.o", store["content.s.o"].data)
    prov = EmbeddingProvider(np.random.default_rng(4).standard_normal((3, 1, 4)))
    emb = encode_content(1, prov, store, 2)
    assert np.array_equal(emb["s"], emb["c"])
    heads, wo = head_params(store, "s", 2)
    single = mh_self_attention(prov[1], heads, wo).data[0]
    assert np.allclose(emb["s"], single, atol=1e-15)
    with pytest.raises(KeyError):
        encode_content(9, prov, store, 2)


def test_random_params_keep_cluster_signal():
    cfg = SynthConfig(n_clusters=10, items_per_cluster=5, embed_dim=16)
    _, truth = generate_planted_graph(cfg)
    prov = EmbeddingProvider(generate_embeddings(truth, cfg, np.random.default_rng(0)))
    store = params(d=16, heads=2, seed=5)
    q = encode_content_batch(np.arange(50), prov, store, 2, "s").data
    u = q / np.linalg.norm(q, axis=1, keepdims=True)
    sim = u @ u.T
    same = truth.cluster[:, None] == truth.cluster[None, :]
    off = ~np.eye(50, dtype=bool)
    assert sim[same & off].mean() > sim[~same].mean()


def test_content_gradients():
    prov = EmbeddingProvider(np.random.default_rng(6).standard_normal((4, 3, 4)))
    store = params(d=4, heads=2, seed=7)
    w = np.random.default_rng(8).standard_normal((4, 4))

    def closure(p):
        q = encode_content_batch([0, 2, 3, 1], prov, p, 2, "s")
        return T.tsum(T.mul(q, w))

    assert T.finite_diff_check(closure, store) < 1e-4
