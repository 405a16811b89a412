"""End-to-end synthetic runs: data, held-out test set, noise, training, evaluation, sweeps."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace

import numpy as np

from .content import EmbeddingProvider
from .errors import ConfigError
from .evaluation import (
    METRICS,
    build_test_set,
    degree_group_report,
    rank_test_set,
    report_from_ranks,
)
from .graph import RELATIONS
from .judge import AlwaysJudge, OracleJudge
from .model import MMSCModel, ModelConfig
from .synth import SynthConfig, generate_embeddings, generate_planted_graph, inject_noise
from .trainer import TrainConfig, fit

log = logging.getLogger(__name__)

ABLATIONS = ("no-ssl", "no-task-gate", "no-content", "no-behavior", "no-judge", "max-hop-2")
JUDGES = ("oracle", "none", "always-yes", "always-no")


def apply_ablation(name, model_cfg, train_cfg, judge):
    """Configs and judge kind with one component switched off."""
    if name in (None, "", "full"):
        return model_cfg, train_cfg, judge
    if name == "no-ssl":
        return model_cfg, replace(train_cfg, ssl_weight=0.0), judge
    if name == "no-task-gate":
        return replace(model_cfg, use_task_gate=False), train_cfg, judge
    if name == "no-content":
        return replace(model_cfg, use_content=False), train_cfg, judge
    if name == "no-behavior":
        return replace(model_cfg, use_behavior=False), train_cfg, judge
    if name == "no-judge":
        return model_cfg, train_cfg, "none"
    if name == "max-hop-2":
        return replace(model_cfg, max_hop=2), train_cfg, judge
    raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")


def make_judge(kind, truth):
    if kind == "oracle":
        return OracleJudge(truth)
    if kind == "none":
        return None
    if kind == "always-yes":
        return AlwaysJudge(True)
    if kind == "always-no":
        return AlwaysJudge(False)
    raise ConfigError(f"unknown judge {kind!r}; choose from {', '.join(JUDGES)}")


@dataclass
class SyntheticData:
    graph: object  # clean planted graph
    truth: object
    provider: EmbeddingProvider
    train_graph: object  # test edges removed, noise injected
    test_set: object


def prepare_data(synth_cfg, noise_ratio=None, seed=None):
    """Planted data with a held-out, ground-truth-confirmed test set and noisy training graph.

    The test set is drawn before noise is added, so the noise ratio is
    measured against the remaining training edges.
    """
    seed = synth_cfg.seed if seed is None else seed
    synth_cfg = replace(synth_cfg, seed=seed)
    noise_ratio = synth_cfg.noise_ratio if noise_ratio is None else noise_ratio
    g, truth = generate_planted_graph(synth_cfg)
    provider = EmbeddingProvider(
        generate_embeddings(truth, synth_cfg, np.random.default_rng([seed, 1]))
    )
    train_g, tests = build_test_set(g, OracleJudge(truth), np.random.default_rng([seed, 3]))
    if noise_ratio > 0:
        train_g = inject_noise(train_g, truth, noise_ratio, np.random.default_rng([seed, 2]))
    return SyntheticData(g, truth, provider, train_g, tests)


@dataclass
class RunResult:
    report: object
    train: object
    model: object
    ranks: dict
    train_precision: float

    def m10(self, relation):
        return self.report.value(relation, "MRR@10")


def run_experiment(data, model_cfg, train_cfg, judge="oracle", ablation=None):
    model_cfg, train_cfg, judge = apply_ablation(ablation, model_cfg, train_cfg, judge)
    model = MMSCModel(model_cfg, data.provider)
    result = fit(model, data.train_graph, train_cfg, judge=make_judge(judge, data.truth))
    emb = model.embed_all(data.train_graph)
    ranks = rank_test_set(emb, data.test_set)
    report = report_from_ranks(ranks)
    report.groups = degree_group_report(ranks, data.test_set, data.train_graph)
    return RunResult(report, result, model, ranks, data.truth.precision(data.train_graph))


# ---------------------------------------------------------------- sweeps

SWEEP_FIELDS = ("axis", "value", "variant", "seed", "train_precision") + tuple(
    f"{r}_{m}" for r in ("s", "c") for m in METRICS
)


def _row(axis, value, variant, seed, run):
    row = {"axis": axis, "value": value, "variant": variant, "seed": seed,
           "train_precision": run.train_precision}
    for rel in RELATIONS:
        for m in METRICS:
            row[f"{rel.code}_{m}"] = run.report.value(rel, m)
    return row


def _runner(workers):
    if workers and workers > 1:
        from joblib import Parallel, delayed

        return lambda jobs: Parallel(n_jobs=workers)(delayed(f)(*a) for f, a in jobs)
    return lambda jobs: [f(*a) for f, a in jobs]


def _noise_job(synth_cfg, ratio, seed, variant, model_cfg, train_cfg, judge):
    data = prepare_data(synth_cfg, noise_ratio=ratio, seed=seed)
    run = run_experiment(
        data,
        replace(model_cfg, seed=seed),
        replace(train_cfg, seed=seed),
        judge,
        None if variant == "full" else variant,
    )
    return _row("noise", ratio, variant, seed, run)


def noise_sweep(synth_cfg, ratios, variants, model_cfg, train_cfg, seeds=(0,), judge="oracle",
                workers=1):
    """One row per (ratio, variant, seed); variants are ``"full"`` or ablation names."""
    for r in ratios:
        if not 0 <= r <= 1:
            raise ConfigError(f"noise ratios must lie in [0, 1], got {r}")
    jobs = [
        (_noise_job, (synth_cfg, r, s, v, model_cfg, train_cfg, judge))
        for r in ratios
        for v in variants
        for s in seeds
    ]
    return _runner(workers)(jobs)


def _sens_job(synth_cfg, axis, value, seed, model_cfg, train_cfg, judge):
    data = prepare_data(synth_cfg, seed=seed)
    train_cfg = replace(train_cfg, seed=seed)
    if axis == "lambda":
        train_cfg = replace(train_cfg, ssl_weight=float(value))
    else:
        value = int(value)
        train_cfg = replace(train_cfg, judge_budget=value)
        if value == 0:
            judge = "none"
    run = run_experiment(data, replace(model_cfg, seed=seed), train_cfg, judge)
    return _row(axis, value, "full", seed, run)


def sensitivity_sweep(axis, values, synth_cfg, model_cfg, train_cfg, seeds=(0,), judge="oracle",
                      workers=1):
    """Train and evaluate per value of ``lambda`` (0 always included) or ``judge_budget``."""
    if axis not in ("lambda", "judge_budget"):
        raise ConfigError(f"sweep axis must be lambda or judge_budget, got {axis!r}")
    values = list(values)
    if axis == "lambda" and 0 not in values and 0.0 not in values:
        values = [0.0] + values
    if len(values) < 2:
        raise ConfigError("a sensitivity sweep needs at least 2 values")
    jobs = [
        (_sens_job, (synth_cfg, axis, v, s, model_cfg, train_cfg, judge))
        for v in values
        for s in seeds
    ]
    return _runner(workers)(jobs)


def rows_to_csv(rows, fields=SWEEP_FIELDS, header_lines=()):
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([f"{r[f]:.6f}" if isinstance(r[f], float) else r[f] for f in fields])
    return buf.getvalue()


__all__ = [
    "ABLATIONS",
    "ModelConfig",
    "SynthConfig",
    "TrainConfig",
    "apply_ablation",
    "noise_sweep",
    "prepare_data",
    "run_experiment",
    "sensitivity_sweep",
]
