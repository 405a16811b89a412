import csv
import io

import pytest

from mmsc.cli import main, read_test_file
from mmsc.experiments import ABLATIONS

SMALL = """
seed = 3
[synth]
n_clusters = 6
items_per_cluster = 5
[train]
max_epochs = 2
[eval]
negatives = 50
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--clusters", "8", "--items", "6", "--seed", "1", "--out", str(root)]) == 0
    return root


def data_args(root):
    return ["--edges", str(root / "edges.tsv"), "--embeddings", str(root / "content.emb"),
            "--truth", str(root / "truth.tsv")]


def test_synth_minimal_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "nested" / "missing" / "b"
    args = ["synth", "--clusters", "2", "--items", "2", "--intra-prob", "1", "--seed", "7"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert "items=4" in capsys.readouterr().out
    for name in ("edges.tsv", "content.emb", "truth.tsv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = [ln.split("\t") for ln in (a / "edges.tsv").read_text().splitlines() if not ln.startswith("#")]
    assert [r for r in rows if r[2] == "co_view"] == [["0", "1", "co_view"], ["2", "3", "co_view"]]
    assert len(rows) == 6


def test_synth_bad_config_exits_2(tmp_path, capsys):
    assert main(["synth", "--clusters", "0", "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_exit_codes(dataset, tmp_path, capsys):
    out = ["--out", str(tmp_path)]
    assert main(["train", *data_args(dataset), "--lambda", "-1", *out]) == 2
    assert "ssl_weight" in capsys.readouterr().err
    missing = ["--edges", str(dataset / "nope.tsv"), "--embeddings", str(dataset / "content.emb")]
    assert main(["train", *missing, *out]) == 3
    with pytest.warns(RuntimeWarning):
        code = main(["train", *data_args(dataset), "--epochs", "2", "--lr", "1e300", *out])
    assert code == 4
    assert "numerical error" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text("[train]\nlearning_rat = 0.1\n")
    assert main(["train", "--config", str(cfg)]) == 2


def test_train_eval_roundtrip(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    args = ["train", *data_args(dataset), "--epochs", "3", "--seed", "1", "--out", str(out)]
    assert main(args) == 0
    for name in ("model.ckpt", "train_log.csv", "test.tsv", "train_edges.tsv"):
        assert (out / name).exists()
    log_lines = (out / "train_log.csv").read_text().splitlines()
    assert log_lines[0].startswith("# config: ")
    tests = read_test_file(out / "test.tsv")
    assert tests.n_items == 48
    capsys.readouterr()
    ev = ["eval", "--checkpoint", str(out / "model.ckpt"), "--embeddings",
          str(dataset / "content.emb"), "--out", str(out)]
    assert main(ev) == 0
    summary = capsys.readouterr().out.strip()
    assert summary.count("=") == 6 and summary.startswith("s_H@10=")
    first = (out / "eval.csv").read_bytes()
    # same command again: byte-identical metrics
    assert main(args) == 0 and main(ev) == 0
    assert (out / "eval.csv").read_bytes() == first
    body = [ln for ln in first.decode().splitlines() if not ln.startswith("#")]
    assert body[0] == "relation,queries,H@10,MRR@10,NDCG@10" and len(body) == 3


def test_eval_missing_checkpoint_exits_3(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == 3


@pytest.mark.parametrize("flag", ABLATIONS)
def test_each_ablation_runs_from_one_flag(dataset, tmp_path, flag):
    assert main(["train", *data_args(dataset), "--epochs", "1", "--ablate", flag,
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "model.ckpt").exists()


def test_coldstart_csv(dataset, tmp_path, capsys):
    args = ["coldstart", *data_args(dataset), "--epochs", "2", "--holdout", "0.1", "--k", "5",
            "--out", str(tmp_path)]
    assert main(args) == 0
    assert capsys.readouterr().out.count("=") == 6
    text = (tmp_path / "coldstart.csv").read_text()
    assert "params_sha256=" in text
    rows = list(csv.reader(io.StringIO("\n".join(ln for ln in text.splitlines() if not ln.startswith("#")))))
    assert rows[0] == ["relation", "queries", "H@10", "MRR@10", "NDCG@10"]
    assert [r[0] for r in rows[1:]] == ["s", "c"]
    first = (tmp_path / "coldstart.csv").read_bytes()
    assert main(args) == 0
    assert (tmp_path / "coldstart.csv").read_bytes() == first


def test_noise_sweep_rows(tmp_path, capsys):
    cfg = tmp_path / "small.toml"
    cfg.write_text(SMALL)
    args = ["sweep", "--config", str(cfg), "--axis", "noise", "--ratios", "0,0.2,0.6,1.0",
            "--out", str(tmp_path)]
    assert main(args) == 0
    assert "rows=4" in capsys.readouterr().out
    path = tmp_path / "sweep_noise.csv"
    first = path.read_bytes()
    rows = [ln for ln in first.decode().splitlines() if not ln.startswith("#")]
    assert len(rows) == 5
    assert main(args) == 0
    assert path.read_bytes() == first


def test_sweep_needs_values(tmp_path):
    assert main(["sweep", "--axis", "lambda", "--out", str(tmp_path)]) == 2
    assert main(["sweep", "--axis", "noise", "--ratios", "0", "--variants", "bogus",
                 "--out", str(tmp_path)]) == 2
