"""Planted-cluster item graphs with heavy-tailed degrees and clustered content."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import networkx as nx
import numpy as np

from .errors import CapacityError, ConfigError, DataFormatError
from .graph import RELATIONS, RelGraph, Relation


@dataclass
class SynthConfig:
    n_clusters: int = 50
    items_per_cluster: int = 10
    intra_sub_prob: float = 0.5
    cluster_pairing_degree: int = 1
    noise_ratio: float = 0.0
    embed_dim: int = 32
    embed_noise_std: float = 0.1
    seed: int = 0
    zipf_exponent: float = 1.1
    seq_len: int = 4

    @property
    def n_items(self):
        return self.n_clusters * self.items_per_cluster

    def validate(self):
        for name in ("n_clusters", "items_per_cluster", "cluster_pairing_degree", "seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("intra_sub_prob",):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.noise_ratio < 0:
            raise ConfigError("noise_ratio must be >= 0")
        if self.embed_dim < 2:
            raise ConfigError("embed_dim must be >= 2")
        if self.embed_noise_std < 0:
            raise ConfigError("embed_noise_std must be >= 0")
        if self.n_items < 4:
            raise ConfigError(f"need at least 4 items, got {self.n_items}")
        if self.cluster_pairing_degree >= self.n_clusters:
            raise ConfigError(
                f"cluster_pairing_degree {self.cluster_pairing_degree} needs more than "
                f"{self.n_clusters} cluster(s)"
            )
        if (self.cluster_pairing_degree * self.n_clusters) % 2:
            raise ConfigError("cluster_pairing_degree * n_clusters must be even")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class GroundTruth:
    cluster: np.ndarray
    sub_pairs: frozenset
    comp_pairs: frozenset

    def pairs(self, relation):
        return self.sub_pairs if Relation(relation) is Relation.SUB else self.comp_pairs

    def is_true(self, u, v, relation):
        u, v = int(u), int(v)
        return (min(u, v), max(u, v)) in self.pairs(relation)

    def precision(self, g):
        """Fraction of the graph's edges that are ground-truth pairs of their relation."""
        total = g.n_edges()
        if total == 0:
            return float("nan")
        hits = sum(
            sum((int(u), int(v)) in self.pairs(rel) for u, v in g.edges(rel)) for rel in RELATIONS
        )
        return hits / total

    def partners(self, item, relation):
        return sorted(
            v if u == item else u for u, v in self.pairs(relation) if item in (u, v)
        )


def _cluster_pairing(cfg, rng):
    seed = int(rng.integers(2**31))
    pairing = nx.random_regular_graph(cfg.cluster_pairing_degree, cfg.n_clusters, seed=seed)
    return sorted(tuple(sorted(e)) for e in pairing.edges())


def _weighted_block(pairs, weight, prob, rng):
    """Binomial(len(pairs), prob) pairs drawn without replacement, proportional to weight."""
    count = rng.binomial(len(pairs), prob)
    if count == 0:
        return pairs[:0]
    if count == len(pairs):
        return pairs
    w = weight[pairs[:, 0]] * weight[pairs[:, 1]]
    chosen = rng.choice(len(pairs), size=count, replace=False, p=w / w.sum())
    return pairs[np.sort(chosen)]


def generate_planted_graph(cfg):
    """Returns ``(RelGraph, GroundTruth)``, a pure function of ``cfg``.

    Every within-cluster pair is a true substitute and every pair across
    paired clusters a true complement; observed edges are a Zipf-weighted
    sample of these, so a few items per cluster collect most edges.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, size = cfg.n_items, cfg.items_per_cluster
    cluster = np.repeat(np.arange(cfg.n_clusters), size)
    ranks = rng.permutation(n) + 1
    activity = ranks.astype(float) ** -cfg.zipf_exponent

    sub_true, comp_true = [], []
    sub_edges, comp_edges = [], []
    for c in range(cfg.n_clusters):
        members = np.arange(c * size, (c + 1) * size)
        iu = np.triu_indices(size, k=1)
        block = np.stack([members[iu[0]], members[iu[1]]], axis=1)
        sub_true.append(block)
        sub_edges.append(_weighted_block(block, activity, cfg.intra_sub_prob, rng))
    for a, b in _cluster_pairing(cfg, rng):
        ma = np.arange(a * size, (a + 1) * size)
        mb = np.arange(b * size, (b + 1) * size)
        block = np.stack(np.meshgrid(ma, mb, indexing="ij"), axis=-1).reshape(-1, 2)
        comp_true.append(block)
        comp_edges.append(_weighted_block(block, activity, cfg.intra_sub_prob, rng))

    def as_set(blocks):
        return frozenset((int(u), int(v)) for blk in blocks for u, v in np.sort(blk, axis=1))

    truth = GroundTruth(
        cluster=cluster,
        sub_pairs=as_set(sub_true),
        comp_pairs=as_set(comp_true),
    )
    g = RelGraph(
        n,
        {
            Relation.SUB: np.concatenate(sub_edges),
            Relation.COMP: np.concatenate(comp_edges) if comp_edges else (),
        },
    )
    return g, truth


def inject_noise(g, truth, ratio, rng):
    """Add ``floor(ratio * |E|)`` random non-edges with uniformly drawn relation types.

    Noise never lands on an existing edge or on any ground-truth pair; the
    returned graph's ``noise`` attribute lists the injected edges.
    """
    if ratio < 0:
        raise ValueError("noise ratio must be >= 0")
    n = g.n_items
    want = math.floor(ratio * g.n_edges())
    if want == 0:
        return g
    taken = set(truth.sub_pairs) | set(truth.comp_pairs)
    for rel in RELATIONS:
        taken.update((int(u), int(v)) for u, v in g.edges(rel))
    capacity = n * (n - 1) // 2 - len(taken)
    if want > capacity:
        raise CapacityError(f"requested {want} noise edges but only {capacity} non-edges exist")

    added = {Relation.SUB: [], Relation.COMP: []}
    noise = set()
    while len(noise) < want:
        u, v = rng.integers(0, n, size=2)
        if u == v:
            continue
        pair = (int(min(u, v)), int(max(u, v)))
        if pair in taken:
            continue
        taken.add(pair)
        rel = RELATIONS[int(rng.integers(2))]
        added[rel].append(pair)
        noise.add(pair + (int(rel),))
    pairs = {
        rel: np.concatenate([g.edges(rel), np.array(added[rel], dtype=np.int64).reshape(-1, 2)])
        for rel in RELATIONS
    }
    return RelGraph(n, pairs, set(g.noise) | noise)


def generate_embeddings(truth, cfg, rng):
    """Content sequences ``[N, seq_len, embed_dim]``: unit cluster centroid + Gaussian noise.

    Values are rounded through float32 so that in-memory data equals what
    the embedding file round-trips.
    """
    if cfg.embed_dim < 2:
        raise ConfigError("embed_dim must be >= 2")
    n_clusters = int(truth.cluster.max()) + 1
    centroids = rng.standard_normal((n_clusters, cfg.embed_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    seq = np.repeat(centroids[truth.cluster][:, None, :], cfg.seq_len, axis=1)
    if cfg.embed_noise_std > 0:
        seq = seq + cfg.embed_noise_std * rng.standard_normal(seq.shape)
    return seq.astype(np.float32).astype(np.float64)


def make_dataset(cfg):
    """Planted graph, ground truth and content for one config (noise applied if set)."""
    g, truth = generate_planted_graph(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    content = generate_embeddings(truth, cfg, rng)
    if cfg.noise_ratio > 0:
        g = inject_noise(g, truth, cfg.noise_ratio, np.random.default_rng([cfg.seed, 2]))
    return g, truth, content


# ---------------------------------------------------------------- files


def write_truth_file(path, truth):
    lines = ["# mmsc ground truth", "# section: clusters (item_id<TAB>cluster_id)"]
    lines += [f"{i}\t{c}" for i, c in enumerate(truth.cluster)]
    lines.append("# section: substitutable")
    lines += [f"{u}\t{v}" for u, v in sorted(truth.sub_pairs)]
    lines.append("# section: complementary")
    lines += [f"{u}\t{v}" for u, v in sorted(truth.comp_pairs)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_truth_file(path):
    section = None
    cluster = {}
    pairs = {"substitutable": set(), "complementary": set()}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# section:"):
                    section = line[len("# section:") :].split()[0]
                continue
            parts = line.split("\t")
            try:
                a, b = int(parts[0]), int(parts[1])
            except (ValueError, IndexError):
                raise DataFormatError(f"{path}:{lineno}: expected two integers") from None
            if section == "clusters":
                cluster[a] = b
            elif section in pairs:
                pairs[section].add((min(a, b), max(a, b)))
            else:
                raise DataFormatError(f"{path}:{lineno}: data outside a known section")
    if sorted(cluster) != list(range(len(cluster))):
        raise DataFormatError(f"{path}: cluster ids must cover items 0..N-1")
    return GroundTruth(
        cluster=np.array([cluster[i] for i in range(len(cluster))], dtype=np.int64),
        sub_pairs=frozenset(pairs["substitutable"]),
        comp_pairs=frozenset(pairs["complementary"]),
    )
