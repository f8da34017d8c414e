from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from rankshift.cli import main
from rankshift.config import ExperimentConfig
from rankshift.experiment import run_experiment, run_single

FAST = ["--epochs", "4", "--decay-epochs", "2,3", "--n", "120"]


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_budget_published_numbers(capsys):
    rc = main(["budget", "--d", "272762", "--d-low", "155170", "--epochs", "150",
               "--inflate-epoch", "60", "--deflate-epoch", "135"])
    out = json.loads(capsys.readouterr().out)
    assert rc == 0 and out["comp_ratio"] == pytest.approx(0.7844, abs=1e-4)


def test_budget_auto_place_from_config_network(capsys):
    rc = main(["budget", "--epochs", "150", "--decay-epochs", "100"])
    out = json.loads(capsys.readouterr().out)
    assert rc == 0 and (out["I"], out["D"]) == (50, 125)


def test_run_writes_all_artifacts(tmp_path):
    out = tmp_path / "run"
    rc = main(["run", *FAST, "--out", str(out), "--seed", "3"])
    assert rc == 0
    for name in ("metrics.csv", "spectral.json", "budget.json", "telemetry.json", "final.ckpt", "config.txt"):
        assert (out / name).exists(), name
    rows = read_metrics(out / "metrics.csv")
    assert rows[0][:7] == ["epoch", "train_loss", "val_loss", "val_acc", "lr", "g", "trainable_params"]
    assert len(rows) - 1 == 4
    assert sorted(p.name for p in (out / "heatmaps").iterdir()) == [f"layer_{i}.txt" for i in range(4)]
    spectral = json.loads((out / "spectral.json").read_text())
    assert len(spectral["final"]) == 4 and len(spectral["lambda_timeseries"]["rows"]) == 4


def test_inf_token_in_metrics(tmp_path):
    out = tmp_path / "low"
    main(["run", *FAST, "--no-auto-place", "--out", str(out)])
    rows = read_metrics(out / "metrics.csv")
    assert "inf" in rows[1][7:]


def test_phi_endpoints_budget(tmp_path):
    base = ExperimentConfig(schedule_epochs=3, optim_decay_epochs=(2,), data_n=60, run_seed=1)
    low = run_single(base.with_overrides({"schedule_auto_place": False}), tmp_path / "low")
    full = run_single(base.with_overrides({"schedule_auto_place": False, "schedule_inflate_epoch": 1}),
                      tmp_path / "full")
    assert low.budget.comp_ratio == pytest.approx(low.budget.d_low / low.budget.d)
    assert full.budget.comp_ratio == 1.0


def test_validation_errors_enumerated(capsys):
    rc = main(["run", "--batch-size", "0", "--momentum", "2", "--decomp", "cp", "--set", "data.n=1"])
    err = capsys.readouterr().err
    assert rc == 2
    assert "optim.batch_size" in err and "optim.momentum" in err and "data.n" in err


def test_config_file_and_overrides(tmp_path):
    cfg_path = tmp_path / "exp.txt"
    ExperimentConfig(schedule_epochs=3, optim_decay_epochs=(2,), data_n=60).save(cfg_path)
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg_path), "--out", str(out), "--lr", "0.02"]) == 0
    saved = ExperimentConfig.load(out / "config.txt")
    assert saved.optim_lr == 0.02 and saved.schedule_epochs == 3


def test_spectra_and_heatmap_commands(tmp_path, capsys):
    out = tmp_path / "s"
    main(["run", *FAST, "--out", str(out)])
    capsys.readouterr()
    assert main(["spectra", str(out / "final.ckpt")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["epoch"] == 4 and len(rep["layers"]) == 4
    assert main(["heatmap", str(out / "final.ckpt"), "--layer", "1", "--n-tail", "10",
                 "-o", str(tmp_path / "h.txt")]) == 0
    assert np.loadtxt(tmp_path / "h.txt").shape == (64, 64)
    assert main(["heatmap", str(out / "final.ckpt"), "--layer", "9", "--n-tail", "1",
                 "-o", str(tmp_path / "x.txt")]) == 2


def test_resume_from_checkpoint_is_deterministic(tmp_path):
    cfg = ExperimentConfig(schedule_epochs=5, optim_decay_epochs=(3,), data_n=120, run_checkpoint_every=2,
                           run_seed=4)
    whole = run_single(cfg, tmp_path / "whole")
    resumed = run_single(cfg, tmp_path / "resumed", resume=tmp_path / "whole" / "checkpoints" / "epoch_0002.ckpt")
    assert (tmp_path / "whole" / "metrics.csv").read_bytes() == (tmp_path / "resumed" / "metrics.csv").read_bytes()
    assert whole.runlog.records == resumed.runlog.records


def test_replicates_in_subdirectories(tmp_path, monkeypatch):
    monkeypatch.setenv("RANKSHIFT_THREADS", "2")
    cfg = ExperimentConfig(schedule_epochs=2, optim_decay_epochs=(2,), data_n=60, run_replicates=2,
                           run_out=str(tmp_path / "rep"), run_seed=10)
    assert run_experiment(cfg) == 0
    a = (tmp_path / "rep" / "seed_10" / "metrics.csv").read_text()
    b = (tmp_path / "rep" / "seed_11" / "metrics.csv").read_text()
    assert a != b
