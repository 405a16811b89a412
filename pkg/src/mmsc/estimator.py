"""scikit-learn style front end over the model and trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .content import TASKS, EmbeddingProvider
from .errors import ConfigError
from .graph import DEFAULT_COMP_PATHS, DEFAULT_SUB_PATHS, RelGraph, Relation
from .model import MMSCModel, ModelConfig
from .trainer import TrainConfig, fit


def check_content(X):
    """Validate a content tensor ``[n_items, seq_len, dim]`` of finite floats."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3:
        raise ValueError(f"content must be [n_items, seq_len, dim], got {X.ndim} dimensions")
    return X


def check_items(items, n_items):
    items = check_array(np.asarray(items).reshape(-1, 1), dtype=np.int64, ensure_min_samples=1)
    items = items.ravel()
    if np.any((items < 0) | (items >= n_items)):
        bad = items[(items < 0) | (items >= n_items)]
        raise ValueError(f"unknown item id(s): {sorted(set(bad.tolist()))[:10]}")
    return items


class MMSCRecommender(BaseEstimator):
    """Learns substitute and complement embeddings from content plus a behaviour graph.

    ``fit(X, graph=...)`` takes the content tensor and a :class:`RelGraph`;
    ``transform(items)`` returns ``[n, 2 * dim]`` rows ``[e_s | e_c]``.
    """

    def __init__(
        self,
        content_heads=2,
        node_heads=2,
        sub_paths=DEFAULT_SUB_PATHS,
        comp_paths=DEFAULT_COMP_PATHS,
        fanout_cap=10,
        max_hop=3,
        use_content=True,
        use_behavior=True,
        use_task_gate=True,
        learning_rate=0.003,
        dropout=0.2,
        negatives_per_positive=5,
        margin=0.5,
        tau=0.1,
        ssl_weight=0.005,
        batch_size=256,
        max_epochs=80,
        patience=10,
        judge_budget=None,
        cross_negative_share=0.6,
        seed=0,
    ):
        self.content_heads = content_heads
        self.node_heads = node_heads
        self.sub_paths = sub_paths
        self.comp_paths = comp_paths
        self.fanout_cap = fanout_cap
        self.max_hop = max_hop
        self.use_content = use_content
        self.use_behavior = use_behavior
        self.use_task_gate = use_task_gate
        self.learning_rate = learning_rate
        self.dropout = dropout
        self.negatives_per_positive = negatives_per_positive
        self.margin = margin
        self.tau = tau
        self.ssl_weight = ssl_weight
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.judge_budget = judge_budget
        self.cross_negative_share = cross_negative_share
        self.seed = seed

    def _configs(self, dim):
        model_cfg = ModelConfig(
            dim=dim,
            content_heads=self.content_heads,
            node_heads=self.node_heads,
            sub_paths=tuple(self.sub_paths),
            comp_paths=tuple(self.comp_paths),
            fanout_cap=self.fanout_cap,
            max_hop=self.max_hop,
            use_content=self.use_content,
            use_behavior=self.use_behavior,
            use_task_gate=self.use_task_gate,
            seed=self.seed,
        )
        train_cfg = TrainConfig(
            learning_rate=self.learning_rate,
            dropout=self.dropout,
            negatives_per_positive=self.negatives_per_positive,
            margin=self.margin,
            tau=self.tau,
            ssl_weight=self.ssl_weight,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            judge_budget=self.judge_budget,
            cross_negative_share=self.cross_negative_share,
            seed=self.seed,
        )
        return model_cfg, train_cfg.validate()

    def fit(self, X, y=None, graph=None, judge=None):
        X = check_content(X)
        if not isinstance(graph, RelGraph):
            raise ConfigError("fit needs graph=RelGraph")
        if graph.n_items != X.shape[0]:
            raise ConfigError(f"graph has {graph.n_items} items but X has {X.shape[0]} rows")
        model_cfg, train_cfg = self._configs(X.shape[2])
        self.model_ = MMSCModel(model_cfg, EmbeddingProvider(X))
        self.result_ = fit(self.model_, graph, train_cfg, judge=judge)
        self.graph_ = graph
        self.embeddings_ = self.model_.embed_all(graph)
        self.n_items_ = X.shape[0]
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, items=None):
        check_is_fitted(self, "embeddings_")
        items = np.arange(self.n_items_) if items is None else check_items(items, self.n_items_)
        return np.hstack([self.embeddings_[t][items] for t in TASKS])

    def fit_transform(self, X, y=None, graph=None, judge=None):
        return self.fit(X, graph=graph, judge=judge).transform()

    def predict_scores(self, queries, candidates, relation):
        """Cosine scores ``[len(queries), len(candidates)]`` under ``relation``."""
        check_is_fitted(self, "embeddings_")
        q = check_items(queries, self.n_items_)
        c = check_items(candidates, self.n_items_)
        e = self.embeddings_[Relation.parse(relation).code]
        unit = e / np.linalg.norm(e, axis=1, keepdims=True)
        return unit[q] @ unit[c].T

    def recommend(self, query, relation, k=10):
        """Top-``k`` items for ``query`` (excluding itself), best first."""
        scores = self.predict_scores([query], np.arange(self.n_items_), relation)[0]
        scores[int(query)] = -np.inf
        return np.argsort(-scores, kind="stable")[:k]
