"""Full item encoder: content and behaviour branches fused into ``(e_s, e_c)``."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .behavior import MaterializedIndex, encode_behavior_batch, init_behavior_params
from .content import TASKS, encode_content_batch, init_content_params
from .errors import ConfigError
from .fusion import init_gate_params, semantic_gate, task_gate
from .graph import DEFAULT_COMP_PATHS, DEFAULT_SUB_PATHS, parse_paths


@dataclass
class ModelConfig:
    dim: int = 32
    content_heads: int = 2
    node_heads: int = 2
    sub_paths: tuple = DEFAULT_SUB_PATHS
    comp_paths: tuple = DEFAULT_COMP_PATHS
    fanout_cap: int | None = 10
    max_hop: int = 3
    use_content: bool = True
    use_behavior: bool = True
    use_task_gate: bool = True
    seed: int = 0

    def __post_init__(self):
        self.sub_paths = tuple(str(p) for p in parse_paths(self.sub_paths))
        self.comp_paths = tuple(str(p) for p in parse_paths(self.comp_paths))

    def validate(self):
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        for name in ("content_heads", "node_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dim % self.content_heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.content_heads} heads")
        if self.fanout_cap is not None and self.fanout_cap < 1:
            raise ConfigError("fanout_cap must be >= 1 or None")
        if not 1 <= self.max_hop <= 3:
            raise ConfigError("max_hop must be 1, 2 or 3")
        if not (self.use_content or self.use_behavior):
            raise ConfigError("at least one of content and behaviour must be enabled")
        for task in TASKS:
            if not self.paths()[task]:
                raise ConfigError(f"no meta-path of task {task} within max_hop={self.max_hop}")
        return self

    def paths(self):
        keep = lambda ps: [p for p in parse_paths(ps) if len(p) <= self.max_hop]
        return {"s": keep(self.sub_paths), "c": keep(self.comp_paths)}

    def to_dict(self):
        out = asdict(self)
        out["sub_paths"] = list(self.sub_paths)
        out["comp_paths"] = list(self.comp_paths)
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown model option(s): {', '.join(sorted(extra))}")
        return cls(**data)


def config_hash(obj):
    """sha256 over canonical JSON of a config dict."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class MMSCModel:
    """Parameters plus the forward pass; stateless apart from ``params``."""

    def __init__(self, config, provider, params=None):
        self.config = config.validate()
        if provider.dim != config.dim:
            raise ConfigError(
                f"content dimension {provider.dim} does not match model dimension {config.dim}"
            )
        self.provider = provider
        self.task_paths = config.paths()
        if params is None:
            params = self.init_params(config)
        self.params = params

    @staticmethod
    def init_params(config):
        rng = np.random.default_rng([config.seed, 7])
        store = T.ParamStore()
        paths = config.paths()
        init_content_params(store, config.dim, config.content_heads, rng)
        init_behavior_params(
            store, config.dim, config.node_heads, {t: len(paths[t]) for t in TASKS}, rng
        )
        init_gate_params(store, config.dim, rng)
        return store

    @property
    def n_items(self):
        return self.provider.n_items

    def build_index(self, graph, seed=None):
        if graph.n_items != self.n_items:
            raise ConfigError(
                f"graph has {graph.n_items} items but content covers {self.n_items}"
            )
        seed = self.config.seed if seed is None else seed
        return {
            t: MaterializedIndex.build(graph, self.task_paths[t], self.config.fanout_cap, seed)
            for t in TASKS
        }

    def content(self, items):
        return {
            t: encode_content_batch(items, self.provider, self.params, self.config.content_heads, t)
            for t in TASKS
        }

    def behavior(self, index, items):
        return {
            t: encode_behavior_batch(
                items, index[t], self.provider.pooled, self.params, t, self.config.node_heads
            )
            for t in TASKS
        }

    def behavior_view(self, graph, items):
        """Behaviour vectors of ``items`` on ``graph`` (the ssl encoder callable)."""
        return self.behavior(self.build_index(graph), np.asarray(items, dtype=np.int64))

    def fuse(self, q, p):
        cfg = self.config
        a = {}
        for t in TASKS:
            if not cfg.use_behavior:
                a[t] = q[t]
            elif not cfg.use_content:
                a[t] = p[t]
            else:
                a[t] = semantic_gate(q[t], p[t], self.params, t)
        if not cfg.use_task_gate:
            return a
        e_s, e_c = task_gate(a["s"], a["c"], self.params)
        return {"s": e_s, "c": e_c}

    def embed(self, items, index, return_parts=False):
        """``{task: Tensor [B, d]}`` for distinct ``items``."""
        items = np.asarray(items, dtype=np.int64)
        q = self.content(items) if self.config.use_content else None
        p = self.behavior(index, items) if self.config.use_behavior else None
        e = self.fuse(q, p)
        if return_parts:
            return e, {"q": q, "p": p}
        return e

    def embed_all(self, graph=None, index=None, chunk=None):
        """Final embeddings ``{task: ndarray [N, d]}`` for every item."""
        if index is None:
            index = self.build_index(graph)
        items = np.arange(self.n_items)
        chunk = chunk or self.n_items
        out = {t: [] for t in TASKS}
        for start in range(0, self.n_items, chunk):
            e = self.embed(items[start : start + chunk], index)
            for t in TASKS:
                out[t].append(e[t].data)
        return {t: np.concatenate(out[t]) for t in TASKS}
