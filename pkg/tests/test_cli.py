import json
import os
import subprocess
import sys

import pytest

from gprompt.cli import main

TINY = """
epochs = 2
k = 3
h = 1
batch_size = 16
readout = mean
generator.graphs_per_class = 8
generator.min_nodes = 5
generator.max_nodes = 7
generator.feature_dim = 3
pretrain.epochs = 1
gin_hidden = 6
gin_layers = 2
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def jsonl(path):
    return [json.loads(line) for line in open(path)]


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "verify" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train", "--variant", "NOPE"], ["verify", "--cases", "x"]])
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1


def test_config_errors_exit_one(tmp_path, cfg, capsys):
    out = str(tmp_path / "o")
    assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", out]) == 1
    assert main(["train", "--config", cfg, "--set", "bogus_key=1", "--out", out]) == 1
    assert "bogus_key" in capsys.readouterr().err
    assert main(["ablate", "--config", cfg, "--variants", "FULL,XX", "--out", out]) == 1
    assert main(["sweep", "--config", cfg, "--seeds", "1,a", "--out", out]) == 1


def test_verify_default_passes(tmp_path, capsys):
    out = tmp_path / "v"
    assert main(["verify", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.strip().endswith("PASS")
    assert len(jsonl(out / "trials.jsonl")) == 3 * 200 + 100
    assert (out / "residuals.png").exists()


def test_verify_zero_cases_and_zero_tolerance(tmp_path, capsys):
    assert main(["verify", "--cases", "0", "--necessity", "0", "--out", str(tmp_path / "a"), "--no-plots"]) == 0
    assert main(["verify", "--tolerance", "0", "--cases", "20", "--out", str(tmp_path / "b"), "--no-plots"]) == 2
    assert capsys.readouterr().out.strip().endswith("FAIL")


def test_gen_manifest_and_determinism(tmp_path, cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen", "--config", cfg, "--seed", "3", "--out", str(a)]) == 0
    assert main(["gen", "--config", cfg, "--seed", "3", "--out", str(b)]) == 0
    doc = json.load(open(a / "manifest.json"))
    assert len(doc["graphs"]) == 16
    files = sorted(os.listdir(a))
    assert files == sorted(os.listdir(b))
    assert sorted(e["file"] for e in doc["graphs"]) + ["manifest.json"] == files
    assert all(read(a / f) == read(b / f) for f in files)


def test_pretrain_outputs(tmp_path, cfg):
    out = tmp_path / "p"
    assert main(["pretrain", "--config", cfg, "--out", str(out)]) == 0
    rec = jsonl(out / "metrics.jsonl")[0]
    assert rec["config"]["pretrain.epochs"] == 1 and rec["seed"] == 0
    assert (out / "backbone.ckpt").exists() and (out / "pretrain_curve.png").exists()
    assert open(out / "pretrain_curve.tsv").readline().split() == ["epoch", "loss"]


def test_train_is_byte_identical(tmp_path, cfg):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", cfg, "--seed", "7", "--out", str(out), "--dump-trajectories",
                     "--no-plots"]) == 0
        runs.append(out)
    for f in ("metrics.jsonl", "curve.tsv", "summary.tsv", "checkpoint.ckpt", "trajectories.jsonl"):
        assert read(runs[0] / f) == read(runs[1] / f), f
    rec = jsonl(runs[0] / "metrics.jsonl")[0]
    assert rec["seed"] == 7 and rec["config"]["seed"] == 7 and rec["config"]["epochs"] == 2
    header = open(runs[0] / "curve.tsv").readline().split("\t")
    assert header[:3] == ["epoch", "train_loss", "val_loss"]


def test_output_dir_from_environment(tmp_path, cfg, monkeypatch):
    monkeypatch.setenv("GPROMPT_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["train", "--config", cfg, "--variant", "HEAD_ONLY", "--no-plots"]) == 0
    assert (tmp_path / "env" / "metrics.jsonl").exists()


def test_ablate_records(tmp_path, cfg):
    out = tmp_path / "ab"
    assert main(["ablate", "--config", cfg, "--variants", "FULL,NO_ECR,GPF", "--out", str(out)]) == 0
    recs = jsonl(out / "metrics.jsonl")
    assert [r["variant"] for r in recs] == ["FULL", "NO_ECR", "GPF"]
    assert recs[1]["config"]["lambda_e"] == recs[0]["config"]["lambda_e"]
    assert recs[1]["config"]["variant"] == "NO_ECR"
    assert (out / "variants.png").exists()


def test_sweep_emits_per_seed_and_aggregate(tmp_path, cfg):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", cfg, "--seeds", "1,2,3,4,5", "--out", str(out), "--no-plots"]) == 0
    recs = jsonl(out / "metrics.jsonl")
    assert len(recs) == 6
    assert [r["seed"] for r in recs[:5]] == [1, 2, 3, 4, 5]
    agg = recs[5]
    assert agg["aggregate"]["roc_auc"]["n"] == 5 and "config" in agg


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "gprompt", "verify", "--cases", "2", "--necessity", "2",
                        "--out", str(tmp_path), "--no-plots"], capture_output=True, text=True)
    assert r.returncode == 0 and "PASS" in r.stdout
