"""Heterogeneous item-item graph with typed (substitutable / complementary) edges."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, SamplingPoolError


class Relation(enum.IntEnum):
    SUB = 0
    COMP = 1

    @property
    def code(self):
        return "s" if self is Relation.SUB else "c"

    @classmethod
    def parse(cls, text):
        text = str(text).strip().lower()
        if text in ("s", "sub", "substitutable"):
            return cls.SUB
        if text in ("c", "comp", "complementary"):
            return cls.COMP
        raise ValueError(f"unknown relation {text!r}")


RELATIONS = (Relation.SUB, Relation.COMP)


class Behavior(enum.Enum):
    CO_VIEW = "co_view"
    BUY_AFTER_VIEW = "buy_after_view"
    CO_PURCHASE = "co_purchase"

    @property
    def relation(self):
        return Relation.COMP if self is Behavior.CO_PURCHASE else Relation.SUB


@dataclass(frozen=True)
class EdgeRecord:
    src: int
    dst: int
    behavior: Behavior

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError(f"self-loop on item {self.src}")

    @property
    def relation(self):
        return self.behavior.relation


class RelGraph:
    """Immutable symmetric adjacency per relation (CSR, neighbours sorted).

    ``noise`` optionally marks edges known to be injected noise, as a set of
    ``(u, v, relation)`` with ``u < v``.
    """

    def __init__(self, n_items, pairs, noise=frozenset()):
        self.n_items = int(n_items)
        self._indptr, self._indices, self._keys, self._pairs = [], [], [], []
        for rel in RELATIONS:
            p = np.asarray(pairs.get(rel, ()), dtype=np.int64).reshape(-1, 2)
            p = np.unique(np.sort(p, axis=1), axis=0)
            both = np.concatenate([p, p[:, ::-1]])
            both = both[np.lexsort((both[:, 1], both[:, 0]))]
            counts = np.bincount(both[:, 0], minlength=self.n_items)
            indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
            indices = both[:, 1].copy()
            keys = both[:, 0] * self.n_items + both[:, 1]
            for arr in (indptr, indices, keys, p):
                arr.flags.writeable = False
            self._indptr.append(indptr)
            self._indices.append(indices)
            self._keys.append(keys)
            self._pairs.append(p)
        self.noise = frozenset(e for e in noise if self.has_edge(e[0], e[1], e[2]))

    def neighbors(self, item, relation):
        r = int(relation)
        lo, hi = self._indptr[r][item], self._indptr[r][item + 1]
        return self._indices[r][lo:hi]

    def degree(self, item, relation=None):
        if relation is None:
            return sum(self.degree(item, r) for r in RELATIONS)
        r = int(relation)
        return int(self._indptr[r][item + 1] - self._indptr[r][item])

    def degrees(self, relation=None):
        rels = RELATIONS if relation is None else (relation,)
        return sum(np.diff(self._indptr[int(r)]) for r in rels)

    def edges(self, relation):
        """Undirected edges as an ``[m, 2]`` array with ``u < v``."""
        return self._pairs[int(relation)]

    def n_edges(self, relation=None):
        if relation is None:
            return sum(len(p) for p in self._pairs)
        return len(self._pairs[int(relation)])

    def has_edges(self, u, v, relation):
        """Vectorised membership test for (u[i], v[i]) under ``relation``."""
        keys = self._keys[int(relation)]
        q = np.asarray(u, dtype=np.int64) * self.n_items + np.asarray(v, dtype=np.int64)
        if len(keys) == 0:
            return np.zeros(q.shape, dtype=bool)
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, len(keys) - 1)
        return keys[pos] == q

    def has_edge(self, u, v, relation):
        return bool(self.has_edges([u], [v], relation)[0])

    def pair_dict(self):
        return {rel: self.edges(rel) for rel in RELATIONS}

    def without(self, removed):
        """Copy with the given ``{relation: [m, 2] pairs}`` edges dropped."""
        pairs = {}
        for rel in RELATIONS:
            p = self.edges(rel)
            drop = np.asarray(removed.get(rel, ()), dtype=np.int64).reshape(-1, 2)
            if len(drop):
                p = p[~_rows_in(p, np.sort(drop, axis=1), self.n_items)]
            pairs[rel] = p
        return RelGraph(self.n_items, pairs, self.noise)

    def __eq__(self, other):
        return (
            isinstance(other, RelGraph)
            and self.n_items == other.n_items
            and all(np.array_equal(self.edges(r), other.edges(r)) for r in RELATIONS)
        )

    def __repr__(self):
        return (
            f"RelGraph(n_items={self.n_items}, sub={self.n_edges(Relation.SUB)}, "
            f"comp={self.n_edges(Relation.COMP)})"
        )


def _rows_in(rows, table, n):
    keys = rows[:, 0] * n + rows[:, 1]
    other = table[:, 0] * n + table[:, 1]
    return np.isin(keys, other)


def build_graph(n_items, edges):
    pairs = {rel: [] for rel in RELATIONS}
    for e in edges:
        for end in (e.src, e.dst):
            if not 0 <= end < n_items:
                raise IndexError(f"edge endpoint {end} outside [0, {n_items})")
        if e.src == e.dst:
            raise ValueError(f"self-loop on item {e.src}")
        pairs[e.relation].append((e.src, e.dst))
    return RelGraph(n_items, {r: np.array(p, dtype=np.int64).reshape(-1, 2) for r, p in pairs.items()})


# ---------------------------------------------------------------- meta-paths


@dataclass(frozen=True)
class MetaPath:
    relations: tuple

    def __post_init__(self):
        if not 1 <= len(self.relations) <= 3:
            raise ValueError(f"meta-path length must be in [1, 3], got {len(self.relations)}")

    @classmethod
    def parse(cls, text):
        parts = [p for p in str(text).strip().split(".") if p]
        return cls(tuple(Relation.parse(p) for p in parts))

    def __len__(self):
        return len(self.relations)

    def __iter__(self):
        return iter(self.relations)

    def __str__(self):
        return ".".join(r.code for r in self.relations)


DEFAULT_SUB_PATHS = ("s", "s.s", "s.s.s")
DEFAULT_COMP_PATHS = ("c", "c.s", "s.c", "s.s.c", "s.c.s", "c.s.s")


def parse_paths(value):
    if isinstance(value, str):
        value = [s for s in value.replace(";", ",").split(",") if s.strip()]
    paths = [p if isinstance(p, MetaPath) else MetaPath.parse(p) for p in value]
    if not paths:
        raise ValueError("meta-path set must be nonempty")
    return paths


def metapath_neighbors(g, start, path, fanout_cap=None, rng=None):
    """Endpoints of typed walks from ``start`` following ``path``, start excluded.

    Each hop's frontier is uniformly subsampled to ``fanout_cap`` when larger
    (``None`` means unlimited). Returns a sorted array.
    """
    frontier = np.array([start], dtype=np.int64)
    hops = len(path)
    for h, rel in enumerate(path):
        parts = [g.neighbors(u, rel) for u in frontier]
        nxt = np.unique(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
        if h == hops - 1:
            nxt = nxt[nxt != start]
        if fanout_cap is not None and len(nxt) > fanout_cap:
            if rng is None:
                rng = np.random.default_rng(0)
            nxt = np.sort(rng.choice(nxt, size=fanout_cap, replace=False))
        frontier = nxt
        if len(frontier) == 0:
            break
    return frontier


class MetaPathIndex:
    """Lazily cached meta-path neighbour sets of one graph.

    Sampling for item ``i`` under path ``k`` uses a generator seeded by
    ``(seed, i, k)``, so results do not depend on query order.
    """

    def __init__(self, graph, paths, fanout_cap=10, seed=0):
        self.graph = graph
        self.paths = list(paths)
        self.fanout_cap = fanout_cap
        self.seed = int(seed)
        self._cache = {}

    def neighbors(self, item, k):
        key = (int(item), k)
        hit = self._cache.get(key)
        if hit is None:
            rng = np.random.default_rng([self.seed, int(item), k])
            hit = metapath_neighbors(self.graph, int(item), self.paths[k], self.fanout_cap, rng)
            self._cache[key] = hit
        return hit


# ---------------------------------------------------------------- sampling


def perturb(g, drop_rate, rng):
    """Graph-level dropout: keep each undirected edge with probability 1 - drop_rate."""
    if not 0.0 <= drop_rate <= 1.0:
        raise ValueError(f"drop_rate must lie in [0, 1], got {drop_rate}")
    pairs = {}
    for rel in RELATIONS:
        p = g.edges(rel)
        keep = rng.random(len(p)) < 1.0 - drop_rate
        pairs[rel] = p[keep]
    return RelGraph(g.n_items, pairs, g.noise)


def sample_negatives(g, anchor, relation, n, rng):
    """``n`` distinct items, uniformly among those not adjacent to ``anchor``."""
    banned = np.zeros(g.n_items, dtype=bool)
    banned[anchor] = True
    banned[g.neighbors(anchor, relation)] = True
    pool = np.flatnonzero(~banned)
    if len(pool) < n:
        raise SamplingPoolError(
            f"only {len(pool)} eligible negatives for item {anchor}, need {n}", len(pool)
        )
    return rng.choice(pool, size=n, replace=False)


def sample_negatives_batch(g, anchors, relation, n, rng):
    """Row-wise :func:`sample_negatives` for many anchors, by rejection."""
    anchors = np.asarray(anchors, dtype=np.int64)
    out = np.empty((len(anchors), n), dtype=np.int64)
    deg = np.diff(g._indptr[int(relation)])
    for row, a in enumerate(anchors):
        pool = g.n_items - 1 - deg[a]
        if pool < n:
            raise SamplingPoolError(
                f"only {pool} eligible negatives for item {a}, need {n}", int(pool)
            )
        if pool < 4 * n:
            out[row] = sample_negatives(g, a, relation, n, rng)
            continue
        chosen = []
        while len(chosen) < n:
            cand = rng.integers(0, g.n_items, size=2 * n)
            ok = (cand != a) & ~g.has_edges(np.full(len(cand), a), cand, relation)
            for c in cand[ok]:
                if c not in chosen:
                    chosen.append(int(c))
                    if len(chosen) == n:
                        break
        out[row] = chosen
    return out


def degree_groups(g, n_groups):
    """Item -> group index; groups ordered by total degree, ties by item id."""
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    deg = g.degrees()
    order = np.lexsort((np.arange(g.n_items), deg))
    groups = np.empty(g.n_items, dtype=np.int64)
    for gi, chunk in enumerate(np.array_split(order, n_groups)):
        groups[chunk] = gi
    return groups


# ---------------------------------------------------------------- edge files


def read_edge_file(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                src, dst = int(parts[0]), int(parts[1])
                behavior = Behavior(parts[2].strip())
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if src < 0 or dst < 0:
                raise DataFormatError(f"{path}:{lineno}: negative item id")
            if src == dst:
                raise DataFormatError(f"{path}:{lineno}: self-loop on item {src}")
            records.append(EdgeRecord(src, dst, behavior))
    return records


def load_graph(path, n_items=None):
    records = read_edge_file(path)
    if n_items is None:
        n_items = 1 + max((max(r.src, r.dst) for r in records), default=-1)
    try:
        return build_graph(n_items, records)
    except IndexError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def write_edge_file(path, g, header=None):
    """Substitutable edges are written as co_view, complementary as co_purchase."""
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header)
    names = {Relation.SUB: Behavior.CO_VIEW.value, Relation.COMP: Behavior.CO_PURCHASE.value}
    for rel in RELATIONS:
        for u, v in g.edges(rel):
            lines.append(f"{u}\t{v}\t{names[rel]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
