import json
import subprocess
import sys

import pytest

from flmface.cli import main, parse_args
from flmface.harness import read_csv


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"method": "gflm", "eps": 0.02, "max-iters": 7, "regions": [1, 4], "seed": 3}))
    args = parse_args(["attack", "--config", str(cfg), "--eps", "0.05"])
    assert (args.method, args.eps, args.max_iters, args.regions, args.seed) == ("gflm", 0.05, 7, (1, 4), 3)


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit):
        parse_args(["train", "--config", str(cfg)])
    assert "bogus" in capsys.readouterr().err


def test_symmetry_flag():
    assert parse_args(["attack", "--symmetry", "off"]).symmetry is False
    with pytest.raises(SystemExit):
        parse_args(["attack", "--symmetry", "maybe"])


def test_report_without_results(tmp_path, capsys):
    assert main(["report", str(tmp_path / "missing")]) == 0
    assert capsys.readouterr().out == "no results\n"


def test_missing_dataset_is_an_error(tmp_path, capsys):
    assert main(["attack", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "x")]) == 2
    assert "dataset not found" in capsys.readouterr().err


def test_end_to_end_pipeline(tmp_path):
    def run(*argv):
        r = subprocess.run([sys.executable, "-m", "flmface", *argv], capture_output=True, text=True, cwd=tmp_path)
        assert r.returncode == 0, r.stderr
        return r.stdout

    run("gen-data", "--out", "data", "--classes", "3", "--per-class", "8", "--size", "24", "--margin", "0.8", "--seed", "2")
    run("train", "--data", "data", "--out", "v.fgck", "--epochs", "4", "--batch", "8")
    run("advtrain", "--data", "data", "--out", "d.fgck", "--kind", "pgd_at", "--pgd-steps", "2", "--epochs", "1", "--batch", "8")
    out = run("attack", "--data", "data", "--checkpoint", "v.fgck", "--method", "flm,gflm,fgsm", "--max-iters", "4",
              "--out", "res", "--dump-images", "1")
    assert "whitebox" in out
    run("attack", "--data", "data", "--experiment", "defense", "--defended", "PGD-AT=d.fgck", "--method", "fgsm,flm",
        "--max-iters", "3", "--out", "res")
    run("sweep", "--data", "data", "--checkpoint", "v.fgck", "--variables", "3", "--steps", "3", "--out", "res")
    _, header, rows = read_csv(tmp_path / "res" / "whitebox_metrics.csv")
    assert [r[0] for r in rows] == ["flm", "gflm", "fgsm"]
    first = run("report", "res")
    assert first == run("report", "res")
    assert "PGD-AT" in first and "sweep peaks" in first
