import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from growformer import checkpoint
from growformer.cli import main, parse_strategies, read_summary, summarize, UsageError
from growformer.training import LossLog, LossRecord

CORPUS = "markov:24:6000:1"
SMALL = ["--layers", "2", "--hidden", "16", "--heads", "2", "--ffn", "32", "--max-seq", "8", "--seq", "8",
         "--batch", "8", "--warmup", "5"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def source(tmp_path_factory):
    out = tmp_path_factory.mktemp("src")
    assert run("pretrain", "--corpus", CORPUS, "--out", out, "--steps", 40, *SMALL) == 0
    return out / "model.grwf"


def test_pretrain_smoke_loss_drops(tmp_path, capsys):
    code = run("pretrain", "--corpus", "markov:24:20000:2:0.05", "--out", tmp_path, "--steps", 200,
               "--layers", 2, "--hidden", 64, "--heads", 4, "--ffn", 128, "--seq", 16, "--max-seq", 16,
               "--batch", 16, "--lr", "3e-3", "--window", 20)
    assert code == 0
    text = capsys.readouterr().out
    first = float(text.split("initial_loss=")[1].split()[0])
    last = float(text.split("final_loss=")[1].split()[0])
    assert last < first
    rows = list(csv.DictReader(open(tmp_path / "loss.csv")))
    assert len(rows) == 200 and rows[-1]["step"] == "200"


def test_pretrain_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("pretrain", "--corpus", CORPUS, "--out", tmp_path / name, "--steps", 15, *SMALL) == 0
    for f in ("model.grwf", "loss.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_missing_corpus_is_usage_error(tmp_path, capsys):
    assert run("pretrain", "--out", tmp_path) == 2
    assert "--corpus" in capsys.readouterr().err
    assert run("pretrain", "--corpus", tmp_path / "nope.txt", "--out", tmp_path) == 2
    assert run("pretrain", "--corpus", CORPUS, "--out", tmp_path, "--layers", 0) == 2


def test_invalid_flag_exits_with_2():
    with pytest.raises(SystemExit) as exc:
        main(["expand", "--strategy", "bogus"])
    assert exc.value.code == 2


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"steps": 7, "hidden": 8, "heads": 2, "layers": 1, "seq": 8, "max-seq": 8,
                               "batch": 4, "ffn": 16}))
    assert run("pretrain", "--config", cfg, "--corpus", CORPUS, "--out", tmp_path / "o", "--steps", 3) == 0
    config, _ = checkpoint.load(tmp_path / "o" / "model.grwf")
    assert config.hidden == 8 and config.n_layers == 1
    assert len(LossLog.read_csv(tmp_path / "o" / "loss.csv")) == 3
    assert run("pretrain", "--config", tmp_path / "missing.json", "--corpus", CORPUS, "--out", tmp_path) == 2


def test_expand_passthrough_is_byte_identical(source, tmp_path):
    assert run("expand", "--source", source, "--strategy", "fpi", "--out", tmp_path) == 0
    assert (tmp_path / "model.grwf").read_bytes() == source.read_bytes()


def test_expand_then_verify(source, tmp_path, capsys):
    assert run("expand", "--source", source, "--strategy", "fpi", "--mapping", "balanced",
               "--target-hidden", 32, "--target-layers", 3, "--out", tmp_path / "fpi") == 0
    config, _ = checkpoint.load(tmp_path / "fpi" / "model.grwf")
    assert (config.n_layers, config.hidden, config.n_heads, config.d_ff) == (3, 32, 4, 64)
    report = (tmp_path / "fpi" / "report.txt").read_text()
    assert "stack order: [0, 1, 1]" in report and "verify.max_logit_gap" in report

    assert run("expand", "--source", source, "--strategy", "fpi", "--mapping", "balanced",
               "--target-hidden", 32, "--out", tmp_path / "wide") == 0
    capsys.readouterr()
    assert run("verify", "--source", source, "--target", tmp_path / "wide" / "model.grwf",
               "--out", tmp_path / "v") == 0
    assert "status=PASS" in capsys.readouterr().out
    assert run("expand", "--source", source, "--strategy", "directcopy", "--target-hidden", 32,
               "--out", tmp_path / "dc") == 0
    assert run("verify", "--source", source, "--target", tmp_path / "dc" / "model.grwf") == 1


def test_expand_geometry_errors(source, tmp_path, capsys):
    one = tmp_path / "one"
    assert run("pretrain", "--corpus", CORPUS, "--out", one, "--steps", 2, *SMALL[:-10], "--layers", 1,
               "--max-seq", 8, "--seq", 8, "--batch", 8) == 0
    assert run("expand", "--source", one / "model.grwf", "--strategy", "aki", "--target-hidden", 32,
               "--out", tmp_path / "x") == 2
    assert "AKI" in capsys.readouterr().err
    assert run("expand", "--source", source, "--target-hidden", 12, "--out", tmp_path / "y") == 2


def test_corrupt_checkpoint_is_reported(source, tmp_path, capsys):
    bad = tmp_path / "bad.grwf"
    bad.write_bytes(b"XXXX" + source.read_bytes()[4:])
    assert run("verify", "--source", bad, "--target", source) == 2
    assert "checkpoint error" in capsys.readouterr().err


def test_compare_writes_one_csv_per_strategy(source, tmp_path):
    out = tmp_path / "cmp"
    code = run("compare", "--source", source, "--corpus", CORPUS, "--out", out, "--target-hidden", 32,
               "--target-layers", 3, "--steps", 12, "--seq", 8, "--batch", 8, "--warmup", 2,
               "--window", 3, "--flush-every", 5)
    assert code == 0
    names = ["scratch", "directcopy", "fpi", "aki", "aki+two-stage"]
    for name in names:
        assert len(LossLog.read_csv(out / name / "loss.csv")) == 12
    summary = read_summary(out / "summary.csv")
    assert list(summary) == names
    assert summary["scratch"]["step_savings_pct"] == 0.0
    assert (out / "report.txt").exists()


def test_compare_rejects_unknown_strategy(source, tmp_path):
    assert run("compare", "--source", source, "--corpus", CORPUS, "--out", tmp_path,
               "--strategies", "fpi,magic") == 2


def test_parse_strategies_and_summary_math():
    assert parse_strategies("scratch, aki+two-stage") == [("scratch", "scratch", False),
                                                           ("aki+two-stage", "aki", True)]
    with pytest.raises(UsageError):
        parse_strategies("")

    def log_of(values):
        lg = LossLog()
        for i, v in enumerate(values, 1):
            lg.append(LossRecord(i, "full", 1, v, 0.0, 10.0 * i))
        return lg

    logs = {"scratch": log_of([4, 3, 2, 1]), "fpi": log_of([2, 1, 1, 1])}
    threshold, rows = summarize(logs, window=1, threshold=None)
    assert threshold == 1.0
    by = {r["strategy"]: r for r in rows}
    assert by["scratch"]["steps_to_threshold"] == 4 and by["scratch"]["step_savings_pct"] == 0.0
    assert by["fpi"]["steps_to_threshold"] == 2 and by["fpi"]["step_savings_pct"] == 50.0
    assert by["fpi"]["flop_savings_pct"] == 50.0


def test_dump_attention(source, tmp_path):
    assert run("dump-attention", "--source", source, "--corpus", CORPUS, "--out", tmp_path) == 0
    rows = list(csv.reader(open(tmp_path / "attention.csv")))
    assert rows[0] == ["layer", "head", "row", "col", "value"]
    assert len(rows) - 1 == 2 * 2 * 8 * 8
    assert run("dump-attention", "--source", source, "--out", tmp_path) == 2


def test_module_entry_point_and_thread_cap(tmp_path):
    env = {"GROWFORMER_THREADS": "1", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run([sys.executable, "-m", "growformer", "--help"], capture_output=True, text=True,
                          env=env)
    assert proc.returncode == 0 and "pretrain" in proc.stdout
