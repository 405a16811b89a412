"""Command-line entry point: ``mmsc {synth,train,eval,coldstart,sweep}``.

Results go to standard output as ``key=value`` summaries and to CSV files
in the output directory; progress and warnings go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from .coldstart import run_coldstart
from .content import load_embeddings, write_embeddings
from .errors import ConfigError, DataFormatError, NumericalError
from .evaluation import (
    RelationTests,
    TestSet,
    build_test_set,
    degree_group_report,
    groups_to_csv,
    rank_test_set,
    report_from_ranks,
)
from .experiments import ABLATIONS, apply_ablation, noise_sweep, rows_to_csv, sensitivity_sweep
from .graph import RELATIONS, Relation, load_graph, write_edge_file
from .judge import AlwaysJudge, ExternalJudge, OracleJudge
from .model import MMSCModel
from .synth import (
    generate_embeddings,
    generate_planted_graph,
    inject_noise,
    read_truth_file,
    write_truth_file,
)
from .trainer import fit, format_log, load_checkpoint, save_checkpoint

log = logging.getLogger("mmsc")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4


def _config_lines(cfg):
    return [f"config: {cfg.to_json()}"]


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)


# ---------------------------------------------------------------- test-set files


def write_test_file(path, tests, header_lines=()):
    lines = [f"# {h}" for h in header_lines]
    lines.append(f"# n_items={tests.n_items}")
    lines.append("# relation<TAB>query<TAB>positive<TAB>negatives (comma separated)")
    for rel in RELATIONS:
        t = tests[rel]
        for q, p, negs in zip(t.queries, t.positives, t.negatives):
            lines.append(f"{rel.code}\t{q}\t{p}\t{','.join(map(str, negs))}")
    _write(path, "\n".join(lines) + "\n")


def read_test_file(path):
    n_items = None
    rows = {rel: [] for rel in RELATIONS}
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError:
        raise DataFormatError(f"test file {path} not found") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.startswith("# n_items="):
                n_items = int(line.split("=", 1)[1])
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                rel = Relation.parse(parts[0])
                rows[rel].append(
                    (int(parts[1]), int(parts[2]), [int(x) for x in parts[3].split(",")])
                )
            except (ValueError, IndexError):
                raise DataFormatError(f"{path}:{lineno}: malformed test row") from None
    if n_items is None:
        raise DataFormatError(f"{path}: missing '# n_items=' header")
    tests = {}
    for rel, r in rows.items():
        if r:
            tests[rel] = RelationTests(
                np.array([x[0] for x in r], dtype=np.int64),
                np.array([x[1] for x in r], dtype=np.int64),
                np.array([x[2] for x in r], dtype=np.int64),
            )
        else:
            tests[rel] = RelationTests(
                np.empty(0, np.int64), np.empty(0, np.int64), np.empty((0, 0), np.int64)
            )
    return TestSet(n_items, tests)


# ---------------------------------------------------------------- helpers


def _judge(cfg, truth):
    kind = cfg.judge.kind
    if kind == "oracle":
        if truth is None:
            raise ConfigError("the oracle judge needs data.truth")
        return OracleJudge(truth)
    if kind == "none":
        return None
    if kind == "always-yes":
        return AlwaysJudge(True)
    if kind == "always-no":
        return AlwaysJudge(False)
    return ExternalJudge(cfg.judge.command)


def _load_data(cfg, need_truth=False):
    d = cfg.data
    if not d.edges or not d.embeddings:
        raise ConfigError("data.edges and data.embeddings are required (use --edges/--embeddings)")
    try:
        provider = load_embeddings(d.embeddings, expected_dim=cfg.model.dim)
        g = load_graph(d.edges, n_items=provider.n_items)
        truth = read_truth_file(d.truth) if d.truth else None
    except FileNotFoundError as exc:
        raise DataFormatError(f"missing input file: {exc.filename}") from None
    if need_truth and truth is None:
        raise ConfigError("this command needs data.truth (use --truth)")
    return g, provider, truth


def _apply_common(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg = C.with_seed(cfg, args.seed)
    cfg = C.override(cfg, None, out=getattr(args, "out", None),
                     workers=getattr(args, "workers", None))
    cfg = C.override(
        cfg,
        "data",
        edges=getattr(args, "edges", None),
        embeddings=getattr(args, "embeddings", None),
        truth=getattr(args, "truth", None),
    )
    cfg = C.override(
        cfg,
        "train",
        learning_rate=getattr(args, "lr", None),
        ssl_weight=getattr(args, "lam", None),
        max_epochs=getattr(args, "epochs", None),
        batch_size=getattr(args, "batch_size", None),
        margin=getattr(args, "margin", None),
        tau=getattr(args, "tau", None),
        dropout=getattr(args, "dropout", None),
        patience=getattr(args, "patience", None),
        judge_budget=getattr(args, "judge_budget", None),
    )
    cfg = C.override(cfg, "judge", kind=getattr(args, "judge", None),
                     command=getattr(args, "judge_command", None))
    ablate = getattr(args, "ablate", None)
    if ablate:
        model, train, judge = apply_ablation(ablate, cfg.model, cfg.train, cfg.judge.kind)
        cfg = replace(cfg, model=model, train=train, judge=replace(cfg.judge, kind=judge))
    return cfg.validate()


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg):
    cfg = C.override(
        cfg,
        "synth",
        n_clusters=args.clusters,
        items_per_cluster=args.items,
        intra_sub_prob=args.intra_prob,
        cluster_pairing_degree=args.pairing,
        noise_ratio=args.noise,
        embed_dim=args.dim,
        embed_noise_std=args.embed_noise,
        seq_len=args.seq_len,
    )
    if args.seed is not None:
        cfg = C.with_seed(cfg, args.seed)
    cfg.synth.validate()
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.synth
    g, truth = generate_planted_graph(s)
    seqs = generate_embeddings(truth, s, np.random.default_rng([s.seed, 1]))
    if s.noise_ratio > 0:
        g = inject_noise(g, truth, s.noise_ratio, np.random.default_rng([s.seed, 2]))
    header = [f"config: {json.dumps(s.to_dict(), sort_keys=True)}"]
    write_edge_file(out / "edges.tsv", g, header)
    write_embeddings(out / "content.emb", seqs)
    _write(out / "content.emb.json", json.dumps({"config": s.to_dict()}, sort_keys=True) + "\n")
    write_truth_file(out / "truth.tsv", truth)
    print(f"items={s.n_items} sub_edges={g.n_edges(0)} comp_edges={g.n_edges(1)} out={out}")
    return 0


def cmd_train(args, cfg):
    out = Path(cfg.out)
    g, provider, truth = _load_data(cfg)
    if cfg.judge.kind == "oracle" and truth is None:
        raise ConfigError("the oracle judge needs data.truth")
    judge = _judge(cfg, truth)
    test_judge = OracleJudge(truth) if truth is not None else judge
    train_g, tests = build_test_set(
        g, test_judge, np.random.default_rng([cfg.seed, 3]), cfg.eval.negatives
    )
    noise = args.noise if args.noise is not None else 0.0
    if noise > 0:
        if truth is None:
            raise ConfigError("--noise needs data.truth")
        train_g = inject_noise(train_g, truth, noise, np.random.default_rng([cfg.seed, 2]))
    model = MMSCModel(cfg.model, provider)

    def progress(row):
        log.info("epoch %s: %s", row["epoch"], {k: v for k, v in row.items() if k != "epoch"})

    try:
        result = fit(model, train_g, cfg.train, judge=judge, progress=progress)
    finally:
        if isinstance(judge, ExternalJudge):
            judge.close()
    lines = _config_lines(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_edge_file(out / "train_edges.tsv", train_g, lines)
    write_test_file(out / "test.tsv", tests, lines)
    _write(out / "train_log.csv", format_log(result.log, lines))
    best = result.best_row()
    save_checkpoint(
        out / "model.ckpt",
        model,
        {"run_config": cfg.to_dict(), "best_epoch": result.best_epoch,
         "best_validation": {k: v for k, v in best.items() if k.startswith("val_")}},
    )
    print(f"best_epoch={result.best_epoch} epochs={len(result.log) - 1} "
          f"fell_back={int(result.fell_back)} checkpoint={out / 'model.ckpt'}")
    return 0


def cmd_eval(args, cfg):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise DataFormatError(f"checkpoint {ckpt} not found")
    store, meta = load_checkpoint(ckpt)
    run = meta.get("run_config", {})
    data = run.get("data", {})
    embeddings = cfg.data.embeddings or data.get("embeddings")
    edges = args.edges or str(ckpt.parent / "train_edges.tsv")
    test_path = args.test or str(ckpt.parent / "test.tsv")
    if not embeddings:
        raise ConfigError("eval needs --embeddings")
    try:
        provider = load_embeddings(embeddings)
    except FileNotFoundError as exc:
        raise DataFormatError(f"missing input file: {exc.filename}") from None
    model, _ = load_checkpoint(ckpt, provider)
    try:
        g = load_graph(edges, n_items=provider.n_items)
    except FileNotFoundError as exc:
        raise DataFormatError(f"missing input file: {exc.filename}") from None
    tests = read_test_file(test_path)
    emb = model.embed_all(g)
    ranks = rank_test_set(emb, tests)
    report = report_from_ranks(ranks)
    lines = [f"checkpoint_config_hash: {meta['config_hash']}"] + _config_lines(cfg)
    out = Path(cfg.out)
    _write(out / "eval.csv", "".join(f"# {x}\n" for x in lines) + report.to_csv())
    rows = degree_group_report(ranks, tests, g, cfg.eval.n_groups)
    _write(out / "groups.csv", "".join(f"# {x}\n" for x in lines) + groups_to_csv(rows))
    print(report.summary())
    return 0


def cmd_coldstart(args, cfg):
    cfg = C.override(cfg, "coldstart", holdout=args.holdout, k=args.k)
    cfg.validate()
    g, provider, truth = _load_data(cfg, need_truth=True)
    try:
        run = run_coldstart(g, provider, truth, cfg.model, cfg.train, _judge(cfg, truth),
                            cfg.coldstart.holdout, cfg.coldstart.k,
                            np.random.default_rng([cfg.seed, 5]), cfg.eval.negatives)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(cfg.out)
    header = "".join(f"# {x}\n" for x in _config_lines(cfg))
    header += (f"# held_out_items={len(run.cold)} k={cfg.coldstart.k} "
               f"params_sha256={run.params_after}\n")
    _write(out / "coldstart.csv", header + run.report.to_csv())
    print(run.report.summary())
    return 0


def cmd_sweep(args, cfg):
    synth = cfg.synth
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    if args.axis == "noise":
        if not args.ratios:
            raise ConfigError("--ratios is required for the noise axis")
        ratios = [float(x) for x in args.ratios.split(",")]
        variants = args.variants.split(",") if args.variants else ["full"]
        for v in variants:
            if v != "full" and v not in ABLATIONS:
                raise ConfigError(f"unknown variant {v!r}")
        rows = noise_sweep(synth, ratios, variants, cfg.model, cfg.train, seeds,
                           cfg.judge.kind, cfg.workers)
    else:
        if not args.values:
            raise ConfigError("--values is required for this axis")
        values = [float(x) for x in args.values.split(",")]
        rows = sensitivity_sweep(args.axis, values, synth, cfg.model, cfg.train, seeds,
                                 cfg.judge.kind, cfg.workers)
    _write(Path(cfg.out) / f"sweep_{args.axis}.csv", rows_to_csv(rows, header_lines=_config_lines(cfg)))
    print(f"rows={len(rows)} out={Path(cfg.out) / f'sweep_{args.axis}.csv'}")
    return 0


# ---------------------------------------------------------------- parser


def _common(p, training=True):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int)
    p.add_argument("--edges")
    p.add_argument("--embeddings")
    p.add_argument("--truth")
    if training:
        p.add_argument("--lr", type=float)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--margin", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--dropout", type=float)
        p.add_argument("--patience", type=int)
        p.add_argument("--judge", choices=["oracle", "none", "always-yes", "always-no", "external"])
        p.add_argument("--judge-command")
        p.add_argument("--judge-budget", type=int)
        p.add_argument("--ablate", choices=ABLATIONS)


def build_parser():
    parser = argparse.ArgumentParser(prog="mmsc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a planted synthetic dataset")
    _common(p, training=False)
    p.add_argument("--clusters", type=int)
    p.add_argument("--items", type=int, help="items per cluster")
    p.add_argument("--intra-prob", type=float)
    p.add_argument("--pairing", type=int, help="complementary partner clusters per cluster")
    p.add_argument("--noise", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--embed-noise", type=float)
    p.add_argument("--seq-len", type=int)

    p = sub.add_parser("train", help="hold out a test set, train, checkpoint")
    _common(p)
    p.add_argument("--noise", type=float, help="inject this noise ratio after the test split")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test file")
    _common(p, training=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test")

    p = sub.add_parser("coldstart", help="hold out items and evaluate content-borrowed embeddings")
    _common(p)
    p.add_argument("--holdout", type=float)
    p.add_argument("--k", type=int)

    p = sub.add_parser("sweep", help="noise or sensitivity sweep on synthetic data")
    _common(p)
    p.add_argument("--axis", choices=["noise", "lambda", "judge_budget"], required=True)
    p.add_argument("--ratios", help="comma separated noise ratios")
    p.add_argument("--values", help="comma separated lambda or budget values")
    p.add_argument("--seeds", help="comma separated seeds")
    p.add_argument("--variants", help="comma separated: full and/or ablation names")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "coldstart": cmd_coldstart,
    "sweep": cmd_sweep,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = C.load_config(args.config)
        if args.command != "synth":
            cfg = _apply_common(cfg, args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
