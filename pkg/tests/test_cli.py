"""End-to-end command tests through ``main`` and the installed console script."""

import csv
import json
import subprocess
import sys

import pytest

from invstreams.cli import RunManifest, main, parse_grid
from invstreams.trainer import ConfigError

DATA = {"source": "synth", "nuisances": "both", "n": 40, "size": 12, "test_n": 20}


def _config(tmp_path, name="cfg.json", **train):
    t = {"arch": {"preset": "std", "widths": [2, 2, 2], "size": 12, "classifier_only": True},
         "epochs": 1, "batch_size": 20, "lr": 0.01}
    t.update(train)
    p = tmp_path / name
    p.write_text(json.dumps({"data": DATA, "train": t}))
    return p


def test_train_writes_artifacts_and_is_deterministic(tmp_path):
    cfg = _config(tmp_path)
    assert main(["train", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "b")]) == 0
    for f in ("model.ckpt", "metrics.csv", "result.json", "manifest.json"):
        assert (tmp_path / "a" / f).exists()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_malformed_config_exits_1_without_output(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert not (tmp_path / "x").exists()
    wrong = _config(tmp_path, "wrong.json", optimizer="lbfgs")
    assert main(["train", "--config", str(wrong), "--out", str(tmp_path / "y")]) == 1
    assert not (tmp_path / "y").exists()
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "z")]) == 1
    assert main(["train", "--out", str(tmp_path / "z")]) == 1
    assert main(["frobnicate"]) == 1


def test_invariance_layers(tmp_path):
    out = tmp_path / "ws"
    assert main(["invariance", "--layer", "scale-ii-ws", "--samples", "20", "--out", str(out)]) == 0
    rep = json.loads((out / "invariance.json").read_text())
    assert rep["delta"] <= 1e-6 and rep["n_samples"] == 20
    rows = list(csv.reader((out / "invariance.csv").open()))
    assert rows[0] == ["transform", "sample", "error", "aggregate"] and len(rows) == 1 + 11 * 20
    out = tmp_path / "avg"
    assert main(["invariance", "--layer", "avg-pool", "--samples", "20", "--out", str(out)]) == 0
    assert json.loads((out / "invariance.json").read_text())["delta"] >= 1e-2
    out = tmp_path / "id"
    assert main(["invariance", "--layer", "avg-pool", "--grid", "1:1:0.1", "--samples", "10", "--out", str(out)]) == 0
    assert json.loads((out / "invariance.json").read_text())["delta"] == 0.0
    assert main(["invariance", "--layer", "avg-pool", "--grid", "1:0.5", "--out", str(out)]) == 1


def test_invariance_of_trained_model(tmp_path):
    cfg = _config(tmp_path, epochs=0)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "m")]) == 0
    out = tmp_path / "inv"
    assert main(["invariance", "--model", str(tmp_path / "m" / "model.ckpt"), "--samples", "10", "--grid",
                 "0.5:1.0:0.25", "--out", str(out)]) == 0
    rep = json.loads((out / "invariance.json").read_text())
    assert rep["meta"]["at"] == "invariant" and len(rep["per_transform"]) == 3


def test_sweep_rows_sorted(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg), "--sizes", "20,10", "--seeds", "0", "--out", str(out)]) == 0
    rows = list(csv.reader((out / "sweep.csv").open()))
    assert rows[0] == ["size", "mean_test_error", "std_test_error", "n_seeds"]
    assert [r[0] for r in rows[1:]] == ["10", "20"]
    cells = list(csv.reader((out / "cells.csv").open()))
    assert cells[0] == ["size", "seed", "test_error"] and len(cells) == 3


def test_combine_and_replay(tmp_path):
    e2 = tmp_path / "e2.json"
    e2.write_text(json.dumps({"data": DATA, "train": {
        "arch": {"preset": "e2", "widths": [2, 2, 2], "size": 12, "classifier_only": True}, "epochs": 1,
        "batch_size": 20}}))
    sc = tmp_path / "sc.json"
    sc.write_text(json.dumps({"data": DATA, "train": {
        "arch": {"preset": "scale", "widths": [2, 2, 2], "size": 12, "classifier_only": True}, "epochs": 1,
        "batch_size": 20}}))
    assert main(["train", "--config", str(e2), "--out", str(tmp_path / "se2")]) == 0
    assert main(["train", "--config", str(sc), "--out", str(tmp_path / "ssc")]) == 0
    head = tmp_path / "head.json"
    head.write_text(json.dumps({"data": DATA, "train": {"epochs": 4, "batch_size": 20}, "head": {}}))
    streams = ["e2=" + str(tmp_path / "se2" / "model.ckpt"), "scale=" + str(tmp_path / "ssc" / "model.ckpt")]
    out = tmp_path / "comb"
    assert main(["combine", "--streams", *streams, "--head", "map-e2", "--config", str(head), "--out", str(out)]) == 0
    res = json.loads((out / "result.json").read_text())
    assert res["weight_sum_max_error"] <= 1e-12 and (out / "combined.ckpt").exists()
    again = tmp_path / "again"
    assert main(["replay", str(out / "manifest.json"), "--out", str(again)]) == 0
    for f in ("metrics.csv", "result.json", "combined.ckpt"):
        assert (again / f).read_bytes() == (out / f).read_bytes()
    assert RunManifest.read(again / "manifest.json").content_hash == RunManifest.read(out / "manifest.json").content_hash
    assert main(["combine", "--streams", "e2=" + str(tmp_path / "nope.ckpt"), "--head", "map-e2",
                 "--config", str(head), "--out", str(tmp_path / "c2")]) == 1
    (tmp_path / "se2" / "model.ckpt").write_bytes(b"changed")
    assert main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / "r2")]) == 1


def test_parse_grid():
    assert parse_grid("0.5:1.0:0.05")[-1] == 1.0
    for bad in ("0.5:1.0", "a:b:c", "1:0:0.1"):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_console_script_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "invstreams.cli", "--help"], capture_output=True, text=True)
    assert ok.returncode == 0 and "invariance" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "invstreams.cli", "train", "--config", str(tmp_path / "none.json"),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert bad.returncode == 1 and "does not exist" in bad.stderr
