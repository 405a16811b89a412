"""Multi-task training: judge-filtered positives, triplet + contrastive loss, early stopping."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .behavior import infonce_loss
from .content import TASKS
from .errors import ConfigError, IncompatibleCheckpointError, NumericalError
from .evaluation import RelationTests, draw_negatives, metrics_at_10, rank_batch
from .graph import RELATIONS, Relation, perturb, sample_negatives_batch
from .model import MMSCModel, ModelConfig, config_hash

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.001, 0.005, 0.01)
LOG_FIELDS = (
    "epoch",
    "L_triplet_s",
    "L_triplet_c",
    "L_self",
    "val_H10_s",
    "val_M10_s",
    "val_H10_c",
    "val_M10_c",
)


@dataclass
class TrainConfig:
    learning_rate: float = 0.003
    dropout: float = 0.2
    negatives_per_positive: int = 5
    margin: float = 0.5
    tau: float = 0.1
    ssl_weight: float = 0.005
    batch_size: int = 256
    max_epochs: int = 80
    patience: int = 10
    seed: int = 0
    judge_budget: int | None = None
    val_fraction: float = 0.05
    strict_infonce: bool = False
    cross_negative_share: float = 0.6

    def validate(self):
        for name in ("learning_rate", "margin", "tau"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive number, got {v!r}")
        if not (math.isfinite(self.ssl_weight) and self.ssl_weight >= 0):
            raise ConfigError(f"ssl_weight (lambda) must be >= 0, got {self.ssl_weight!r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout!r}")
        for name in ("negatives_per_positive", "batch_size", "max_epochs", "patience"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)!r}")
        if self.judge_budget is not None and self.judge_budget < 0:
            raise ConfigError(f"judge_budget must be >= 0, got {self.judge_budget!r}")
        if not 0 <= self.cross_negative_share <= 1:
            raise ConfigError(
                f"cross_negative_share must lie in [0, 1], got {self.cross_negative_share!r}"
            )
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown training option(s): {', '.join(sorted(extra))}")
        return cls(**data)


# ---------------------------------------------------------------- judge filtering


@dataclass
class AugmentedEdgeSet:
    pairs: dict  # Relation -> [m, 2]
    submitted: dict = field(default_factory=dict)
    accepted: dict = field(default_factory=dict)
    failed: dict = field(default_factory=dict)

    def __len__(self):
        return sum(len(p) for p in self.pairs.values())

    def acceptance_rate(self):
        sub = sum(self.submitted.values())
        return sum(self.accepted.values()) / sub if sub else float("nan")

    def precision(self, truth):
        total = len(self)
        if total == 0:
            return float("nan")
        hits = sum(
            truth.is_true(u, v, rel) for rel, p in self.pairs.items() for u, v in p
        )
        return hits / total


def augment_edges(judge, g, budget, rng):
    """Ask ``judge`` about up to ``budget`` uniformly sampled edges, half per relation.

    Only confirmed pairs are kept, so the result is a subset of the graph's
    edges. A judge raising on a pair skips it and is counted in ``failed``.
    """
    if budget is None:
        share = {rel: len(g.edges(rel)) for rel in RELATIONS}
    elif budget < 1:
        raise ValueError("judge budget must be >= 1")
    else:
        share = {Relation.SUB: budget - budget // 2, Relation.COMP: budget // 2}
    out = AugmentedEdgeSet({})
    for rel in RELATIONS:
        edges = g.edges(rel)
        k = min(share[rel], len(edges))
        pick = np.sort(rng.choice(len(edges), size=k, replace=False)) if k else np.empty(0, int)
        kept, failed = [], 0
        for u, v in edges[pick]:
            try:
                ok = bool(judge(int(u), int(v), rel))
            except Exception as exc:
                log.warning("judge failed on (%d, %d): %s", u, v, exc)
                failed += 1
                continue
            if ok:
                kept.append((u, v))
        out.pairs[rel] = np.array(kept, dtype=np.int64).reshape(-1, 2)
        out.submitted[rel] = int(k)
        out.accepted[rel] = len(kept)
        out.failed[rel] = failed
    return out


# ---------------------------------------------------------------- losses


def triplet_loss(anchor, pos, neg, margin):
    """max(0, margin - cos(anchor, pos) + cos(anchor, neg))."""
    anchor, pos, neg = T.as_tensor(anchor), T.as_tensor(pos), T.as_tensor(neg)
    if not (anchor.shape == pos.shape == neg.shape):
        raise ValueError(
            f"triplet vectors differ in shape: {anchor.shape}, {pos.shape}, {neg.shape}"
        )
    gap = T.add(T.sub(T.cosine_sim(anchor, neg), T.cosine_sim(anchor, pos)), margin)
    return T.relu(gap)


def triplet_batch(emb, anchors, positives, negatives, margin):
    """Mean over positive pairs of the hinge terms summed over each pair's negatives.

    ``emb`` is a ``[U, d]`` tensor; the index arrays point into its rows.
    """
    m, k = negatives.shape
    a = T.normalize_rows(emb)
    pos = T.tsum(T.mul(T.take(a, anchors), T.take(a, positives)), axis=1)
    rep = np.repeat(anchors, k)
    neg = T.tsum(T.mul(T.take(a, rep), T.take(a, negatives.ravel())), axis=1)
    gap = T.add(T.sub(neg, T.take(pos, np.repeat(np.arange(m), k))), margin)
    return T.scale(T.tsum(T.relu(gap)), 1.0 / m)


@dataclass
class TrainBatch:
    """Per relation ``(anchors, positives, negatives[m, k])`` as item ids."""

    triples: dict

    def items(self):
        parts = [np.concatenate([a, p, n.ravel()]) for a, p, n in self.triples.values()]
        return np.unique(np.concatenate(parts))

    def anchors(self):
        return np.unique(np.concatenate([a for a, _, _ in self.triples.values()]))


def total_loss(batch, model, cfg, index, perturbed_index=None):
    """Triplet terms of both relations plus ``ssl_weight`` times the contrastive term.

    Returns ``(loss, parts)`` where ``parts`` holds the component tensors.
    """
    items = batch.items()
    if len(items) == 0:
        raise ValueError("empty training batch")
    e, extra = model.embed(items, index, return_parts=True)
    loc = lambda ids: np.searchsorted(items, ids)
    parts = {}
    loss = None
    for rel in RELATIONS:
        if rel not in batch.triples or len(batch.triples[rel][0]) == 0:
            continue
        a, p, n = batch.triples[rel]
        term = triplet_batch(e[rel.code], loc(a), loc(p), loc(n), cfg.margin)
        parts[f"triplet_{rel.code}"] = term
        loss = term if loss is None else T.add(loss, term)
    if loss is None:
        raise ValueError("training batch holds no positive pairs")
    anchors = batch.anchors()
    if cfg.ssl_weight > 0 and model.config.use_behavior and len(anchors) >= 2:
        if perturbed_index is None:
            raise ValueError("contrastive term needs a perturbed-graph index")
        other = model.behavior(perturbed_index, anchors)
        ssl = None
        for t in TASKS:
            view = T.take(extra["p"][t], loc(anchors))
            term = infonce_loss(view, other[t], cfg.tau, cfg.strict_infonce)
            ssl = term if ssl is None else T.add(ssl, term)
        parts["self"] = ssl
        loss = T.add(loss, T.scale(ssl, cfg.ssl_weight))
    return loss, parts


# ---------------------------------------------------------------- fitting


@dataclass
class TrainResult:
    params: T.ParamStore
    log: list
    best_epoch: int
    augmented: AugmentedEdgeSet | None
    positives: dict
    validation: dict
    train_graph: object
    fell_back: bool = False

    def best_row(self):
        return next(r for r in self.log if r["epoch"] == self.best_epoch)


def split_validation(positives, fraction, rng):
    """Hold out ``round(fraction * m)`` positives per relation (none if fewer than 2)."""
    train, val = {}, {}
    for rel in RELATIONS:
        p = positives[rel]
        k = int(round(fraction * len(p))) if len(p) >= 2 else 0
        k = min(k, len(p) - 1) if len(p) else 0
        perm = rng.permutation(len(p))
        val[rel] = p[np.sort(perm[:k])]
        train[rel] = p[np.sort(perm[k:])]
    return train, val


def validation_tests(n_items, val, seed):
    rng = np.random.default_rng([seed, 12])
    out = {}
    for rel in RELATIONS:
        p = val[rel]
        if len(p) == 0:
            continue
        q, pos = p[:, 0].copy(), p[:, 1].copy()
        out[rel] = RelationTests(q, pos, draw_negatives(n_items, q, pos, 1000, rng))
    return out


def validation_metrics(model, index, tests):
    row = {}
    if not tests:
        return row
    emb = model.embed_all(index=index)
    for rel, t in tests.items():
        m = metrics_at_10(rank_batch(emb[rel.code], t.queries, t.positives, t.negatives))
        row[f"val_H10_{rel.code}"] = m["H@10"]
        row[f"val_M10_{rel.code}"] = m["MRR@10"]
    return row


def _score(row):
    """Geometric mean of the per-relation validation M@10.

    The substitutable metric starts near its ceiling, so an arithmetic mean
    lets its epoch-to-epoch jitter hide progress on the other relation.
    """
    vals = [v for k, v in row.items() if k.startswith("val_M10_")]
    return math.prod(vals) ** (1.0 / len(vals)) if vals else float("nan")


def cross_negatives(graph, anchors, negatives, relation, share, rng):
    """Swap part of each row of ``negatives`` for the anchor's other-relation neighbours.

    ``round(share * k)`` slots per row are redrawn (without replacement) from
    items linked to the anchor by the other relation but not by ``relation``;
    rows whose anchor has too few such items keep their uniform draws there.
    """
    k = negatives.shape[1]
    n_hard = int(round(share * k))
    if n_hard == 0:
        return negatives
    other = Relation.COMP if Relation(relation) is Relation.SUB else Relation.SUB
    out = negatives.copy()
    for row, a in enumerate(anchors):
        pool = graph.neighbors(a, other)
        if len(pool) == 0:
            continue
        pool = pool[~graph.has_edges(np.full(len(pool), a), pool, relation)]
        take = min(n_hard, len(pool))
        if take == 0:
            continue
        hard = rng.choice(pool, size=take, replace=False)
        keep = out[row][~np.isin(out[row], hard)][: k - take]
        out[row] = np.concatenate([hard, keep])
    return out


def _epoch_triples(positives, graph, cfg, rng):
    out = {}
    for rel in RELATIONS:
        p = positives[rel]
        if len(p) == 0:
            continue
        p = p[rng.permutation(len(p))]
        flip = rng.random(len(p)) < 0.5
        a = np.where(flip, p[:, 1], p[:, 0])
        b = np.where(flip, p[:, 0], p[:, 1])
        neg = sample_negatives_batch(graph, a, rel, cfg.negatives_per_positive, rng)
        neg = cross_negatives(graph, a, neg, rel, cfg.cross_negative_share, rng)
        out[rel] = (a, b, neg)
    return out


def fit(model, graph, cfg, judge=None, progress=None):
    """Train ``model`` in place on ``graph``; returns a :class:`TrainResult`.

    Positives are the judge-confirmed edges (all edges without a judge or
    when the judge rejects everything). A share of them is held out for
    validation, removed from the message-passing graph, and drives early
    stopping on the geometric mean of per-relation M@10. The best
    parameters are restored at the end.
    """
    cfg.validate()
    if graph.n_edges() == 0:
        raise ConfigError("training graph has no edges")
    if graph.n_items != model.n_items:
        raise ConfigError(f"graph has {graph.n_items} items but the model has {model.n_items}")
    rng = np.random.default_rng([cfg.seed, 11])

    augmented, fell_back = None, False
    if judge is not None and cfg.judge_budget != 0:
        augmented = augment_edges(judge, graph, cfg.judge_budget, rng)
        if len(augmented) == 0:
            log.warning("judge accepted no training pair; falling back to raw behaviour edges")
            positives, fell_back = graph.pair_dict(), True
        else:
            positives = dict(augmented.pairs)
    else:
        positives = graph.pair_dict()

    positives, val = split_validation(positives, cfg.val_fraction, rng)
    train_graph = graph.without(val)
    tests = validation_tests(graph.n_items, val, cfg.seed)
    index = model.build_index(train_graph)

    store = model.params
    history = []
    row = {"epoch": 0, "L_triplet_s": math.nan, "L_triplet_c": math.nan, "L_self": math.nan}
    row.update(validation_metrics(model, index, tests))
    history.append(row)
    best, best_epoch, best_params, stale = _score(row), 0, store.copy(), 0
    if progress:
        progress(row)

    n_steps = max(math.ceil(len(p) / cfg.batch_size) for p in positives.values())
    n_steps = max(n_steps, 1)
    for epoch in range(1, cfg.max_epochs + 1):
        triples = _epoch_triples(positives, train_graph, cfg, rng)
        use_ssl = cfg.ssl_weight > 0 and model.config.use_behavior
        p_index = model.build_index(perturb(train_graph, cfg.dropout, rng)) if use_ssl else None
        chunks = {rel: np.array_split(np.arange(len(t[0])), n_steps) for rel, t in triples.items()}
        sums = {"triplet_s": 0.0, "triplet_c": 0.0, "self": 0.0}
        for step in range(n_steps):
            batch = TrainBatch(
                {
                    rel: tuple(x[chunks[rel][step]] for x in triples[rel])
                    for rel in triples
                    if len(chunks[rel][step])
                }
            )
            if not batch.triples:
                continue
            try:
                with T.Tape(params=store) as tape:
                    loss, parts = total_loss(batch, model, cfg, index, p_index)
                grads = T.backward(tape, loss)
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise NumericalError("non-finite gradient")
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {step}: {exc}") from exc
            T.adam_step(store, grads, cfg.learning_rate)
            for name, t in parts.items():
                sums[name] += t.item()
        row = {
            "epoch": epoch,
            "L_triplet_s": sums["triplet_s"] / n_steps,
            "L_triplet_c": sums["triplet_c"] / n_steps,
            "L_self": sums["self"] / n_steps,
        }
        row.update(validation_metrics(model, index, tests))
        history.append(row)
        if progress:
            progress(row)
        score = _score(row)
        if not tests:
            best_epoch, best_params = epoch, store.copy()
            continue
        if score > best:
            best, best_epoch, best_params, stale = score, epoch, store.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    model.params = best_params
    return TrainResult(
        params=best_params,
        log=history,
        best_epoch=best_epoch,
        augmented=augmented,
        positives=positives,
        validation=tests,
        train_graph=train_graph,
        fell_back=fell_back,
    )


# ---------------------------------------------------------------- files


def format_log(rows, header_lines=()):
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow(
            [r["epoch"]]
            + [
                "nan" if (v := r.get(f, math.nan)) != v else f"{v:.6f}"
                for f in LOG_FIELDS[1:]
            ]
        )
    return buf.getvalue()


def save_checkpoint(path, model, meta=None):
    cfg = model.config.to_dict()
    full = {"model_config": cfg, "config_hash": config_hash(cfg)}
    full.update(meta or {})
    T.write_checkpoint(path, model.params, full)


def load_checkpoint(path, provider=None, expected_config=None):
    """Returns ``(params, meta)`` or, with ``provider``, ``(model, meta)``."""
    store, meta = T.read_checkpoint(path)
    cfg_dict = meta.get("model_config")
    if cfg_dict is None or config_hash(cfg_dict) != meta.get("config_hash"):
        raise IncompatibleCheckpointError(f"{path}: config hash does not match its contents")
    if expected_config is not None:
        want = config_hash(expected_config.to_dict())
        if want != meta["config_hash"]:
            raise IncompatibleCheckpointError(
                f"{path}: checkpoint config hash {meta['config_hash'][:12]} differs from "
                f"the requested model's {want[:12]}"
            )
    cfg = ModelConfig.from_dict(cfg_dict)
    fresh = MMSCModel.init_params(cfg)
    if sorted(fresh.names()) != sorted(store.names()) or any(
        fresh[n].shape != store[n].shape for n in fresh.names()
    ):
        raise IncompatibleCheckpointError(f"{path}: parameters do not fit the stored config")
    if provider is None:
        return store, meta
    return MMSCModel(cfg, provider, store), meta
