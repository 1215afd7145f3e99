import json
import subprocess
import sys

import numpy as np
import pytest

from srvcc.cli import main
from srvcc.data import load_matrix
from srvcc.export import load_permutation, read_embeddings

FAST = ["--set", "row_latent=2", "--set", "col_latent=2", "--set", "joint_latent=2",
        "--set", "row_hidden=8", "--set", "col_hidden=8", "--set", "joint_hidden=8",
        "--set", "pretrain_epochs=2", "--set", "em_cells=100", "--set", "cells_per_epoch=64"]


def kv(text):
    return dict(line.split("=", 1) for line in text.strip().splitlines() if "=" in line)


@pytest.fixture
def synth_dir(tmp_path, capsys):
    out = tmp_path / "syn"
    assert main(["synth", "--n", "24", "--d", "12", "--g", "2", "--m", "2",
                 "--noise-level", "0.2", "--missing-fraction", "0.1", "--seed", "3",
                 "--out", str(out)]) == 0
    capsys.readouterr()
    return out


def test_synth_writes_matrix_and_labels(synth_dir):
    m = load_matrix(synth_dir / "matrix.csv")
    assert (m.n, m.d) == (24, 12) and not m.mask.all()
    assert len((synth_dir / "row_labels.txt").read_text().split()) == 24


def test_synth_spec_file(tmp_path, capsys):
    spec = tmp_path / "s.toml"
    spec.write_text("[synth]\nn = 10\nd = 6\ng = 2\nm = 3\nseed = 1\n")
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 0
    assert kv(capsys.readouterr().out)["observed"] == "60"


def test_fit_eval_export(synth_dir, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["fit", "--input", str(synth_dir / "matrix.csv"), "--g", "2", "--m", "2",
                 "--max-epochs", "3", "--holdout", "0.1", "--true-rows",
                 str(synth_dir / "row_labels.txt"), "--true-cols",
                 str(synth_dir / "col_labels.txt"), "--out", str(out)] + FAST)
    assert code == 0
    printed = kv(capsys.readouterr().out)
    assert {"row_acc", "col_nmi", "holdout_rmse", "epochs"} <= set(printed)
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["epochs"] == 3 and 0 <= metrics["row_acc"] <= 1
    assert kv((out / "metrics.txt").read_text())["n"] == "24"
    assert len((out / "history.csv").read_text().splitlines()) == 4

    assert main(["eval", "--pred", str(out / "row_labels.txt"), "--true",
                 str(synth_dir / "row_labels.txt"), "--json", str(tmp_path / "e.json")]) == 0
    ev = kv(capsys.readouterr().out)
    assert float(ev["acc"]) == metrics["row_acc"]

    blocks = tmp_path / "blocks.csv"
    assert main(["export", "--checkpoint", str(out / "checkpoint.npz"), "--input",
                 str(synth_dir / "matrix.csv"), "--mode", "cocluster", "--out", str(blocks)]) == 0
    ro, co = load_permutation(tmp_path / "blocks.permutation.csv")
    assert sorted(ro) == list(range(24)) and sorted(co) == list(range(12))

    assert main(["export", "--checkpoint", str(out / "checkpoint.npz"), "--input",
                 str(synth_dir / "matrix.csv"), "--mode", "embeddings",
                 "--out", str(tmp_path / "emb.csv")]) == 0
    emb = read_embeddings(tmp_path / "emb.rows.csv")
    assert emb.coords.shape == (24, 2)
    assert np.allclose(emb.gamma.sum(1), 1, atol=1e-9)


def test_config_file_and_override(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[train]\ng = 2\nm = 2\nmax_epochs = 5\nmode = \"simple_cascade\"\n")
    out = tmp_path / "run"
    assert main(["fit", "--input", str(synth_dir / "matrix.csv"), "--config", str(cfg),
                 "--max-epochs", "1", "--out", str(out)] + FAST) == 0
    assert kv(capsys.readouterr().out)["epochs"] == "1"


def test_missing_input_is_data_error(tmp_path, capsys):
    assert main(["fit", "--input", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 2


def test_bad_matrix_is_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2\n3\n")
    assert main(["fit", "--input", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main(["fit"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["fit", "--input", "x.csv", "--out", str(tmp_path), "--set", "nokey=1"]) == 1
    assert main(["fit", "--input", "x.csv", "--out", str(tmp_path), "--set", "K=abc"]) == 1


def test_invalid_config_value_exits_one(synth_dir, tmp_path, capsys):
    assert main(["fit", "--input", str(synth_dir / "matrix.csv"), "--g", "0",
                 "--out", str(tmp_path / "o")]) == 1


def test_eval_length_mismatch(tmp_path, capsys):
    (tmp_path / "a").write_text("0\n1\n")
    (tmp_path / "b").write_text("0\n")
    assert main(["eval", "--pred", str(tmp_path / "a"), "--true", str(tmp_path / "b")]) == 2


def test_console_entry_point_runs():
    r = subprocess.run([sys.executable, "-m", "srvcc.cli", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and "fit" in r.stdout
