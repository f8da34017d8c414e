"""End-to-end experiment runs and artifact emission."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, generate_synthetic, ingest_csv
from .diagnostics import (
    ComputeBudget,
    compute_budget,
    format_value,
    lambda_timeseries,
    layer_spectrum,
    tail_reconstruction_heatmap,
)
from .layers import Network, conv, dense, effective_weight, mlp, unfold_kernel
from .rank_adjust import DeflationInit
from .schedule import SGD, RunLog, TrainOptions, param_counts, train

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VIOLATION = 3


@dataclass
class RunResult:
    status: int
    out_dir: Path
    runlog: RunLog
    budget: ComputeBudget


def load_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_path:
        return ingest_csv(cfg.data_path, seed=cfg.run_seed)
    return generate_synthetic(
        cfg.data_generator, cfg.data_n, cfg.run_seed, input_dim=cfg.data_input_dim,
        classes=cfg.data_classes, noise=cfg.data_noise, turns=cfg.data_turns,
        teacher_rank=cfg.data_teacher_rank,
        teacher_hidden=max(cfg.net_hidden, default=cfg.data_input_dim),
    )


def build_network(cfg: ExperimentConfig, input_dim: int, classes: int) -> Network:
    """Optional conv stack, then dense ReLU layers, then a linear head."""
    rng = np.random.default_rng([cfg.run_seed, 1])
    if not cfg.net_conv_channels:
        return mlp([input_dim, *cfg.net_hidden, classes], rng, cfg.net_loss)
    H, W, C = cfg.net_image_shape
    if H * W * C != input_dim:
        raise ValueError(f"image shape {cfg.net_image_shape} does not hold {input_dim} features")
    k = cfg.net_kernel
    layers = []
    for F in cfg.net_conv_channels:
        layers.append(conv(k, k, C, F, rng))
        C = F
    widths = [H * W * C, *cfg.net_hidden]
    layers += [dense(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
    layers.append(dense(widths[-1], classes, rng, "identity"))
    return Network(layers, (H, W, cfg.net_image_shape[2]), cfg.net_loss)


def _shape_data(cfg: ExperimentConfig, ds: Dataset, classes: int) -> Dataset:
    x_tr, x_va, y_tr, y_va = ds.x_train, ds.x_val, ds.y_train, ds.y_val
    if cfg.net_conv_channels:
        x_tr = x_tr.reshape(-1, *cfg.net_image_shape)
        x_va = x_va.reshape(-1, *cfg.net_image_shape)
    if cfg.net_loss == "mse":
        y_tr, y_va = np.eye(classes)[y_tr], np.eye(classes)[y_va]
    return Dataset(x_tr, y_tr, x_va, y_va, ds.meta)


def train_options(cfg: ExperimentConfig) -> TrainOptions:
    return TrainOptions(
        batch_size=cfg.optim_batch_size,
        momentum=cfg.optim_momentum,
        weight_decay=cfg.optim_weight_decay,
        so_coeff=cfg.optim_so_coeff,
        deflate_init=DeflationInit(cfg.rank_deflate_init, cfg.rank_init_scale),
        seed=cfg.run_seed,
        fold=cfg.run_fold,
        telemetry_every=cfg.run_telemetry_every,
    )


def jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return format_value(x)
    if isinstance(x, dict):
        return {k: jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return jsonable(x.item())
    return x


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(jsonable(obj), indent=2) + "\n")


def write_metrics(path: Path, runlog: RunLog) -> None:
    n_layers = len(runlog.records[0].lambdas) if runlog.records else 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr", "g", "trainable_params"]
                   + [f"lambda_{i}" for i in range(n_layers)])
        for r in runlog.records:
            w.writerow([r.epoch, *(format_value(v) for v in (r.train_loss, r.val_loss, r.val_acc, r.lr, r.g)),
                        r.trainable_params, *(format_value(v) for v in r.lambdas)])


def write_heatmaps(out: Path, net: Network, n_tail: int | None, fold: str) -> None:
    hdir = out / "heatmaps"
    hdir.mkdir(exist_ok=True)
    for i, layer in enumerate(net.layers):
        W = effective_weight(layer)
        p = min(unfold_kernel(W, fold).shape)
        n = p // 2 if n_tail is None else min(n_tail, p)
        np.savetxt(hdir / f"layer_{i}.txt", tail_reconstruction_heatmap(W, n, fold), fmt="%.17g")


def run_single(cfg: ExperimentConfig, out_dir=None, resume=None) -> RunResult:
    """Train one seeded replicate and write all artifacts into ``out_dir``."""
    cfg.validate()
    out = Path(out_dir or cfg.run_out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_data(cfg)
    classes = ds.n_classes if cfg.data_path else cfg.data_classes
    data = _shape_data(cfg, ds, classes)
    rank_sched, lr_sched, opts = cfg.rank_schedule(), cfg.lr_schedule(), train_options(cfg)
    (out / "config.txt").write_text(cfg.serialize())

    start, optimizer, runlog = 1, None, None
    if resume is not None:
        ckpt = load_checkpoint(resume, cfg.config_hash())
        net, optimizer, runlog, start = ckpt.net, ckpt.optimizer, ckpt.runlog, ckpt.epoch + 1
    else:
        net = build_network(cfg, ds.input_dim, classes)
    cdir = out / "checkpoints"

    def on_epoch(t, net, optimizer, runlog):
        if cfg.run_checkpoint_every and t % cfg.run_checkpoint_every == 0 and t < cfg.schedule_epochs:
            cdir.mkdir(exist_ok=True)
            save_checkpoint(cdir / f"epoch_{t:04d}.ckpt",
                            Checkpoint(net, t, cfg.config_hash(), optimizer, runlog))

    optimizer = optimizer or SGD(opts.momentum, opts.weight_decay)
    runlog = train(net, data, lr_sched, rank_sched, opts, start_epoch=start,
                   optimizer=optimizer, runlog=runlog, on_epoch=on_epoch)

    if runlog.d_full == 0:
        runlog.d_full, runlog.d_low = param_counts(net, rank_sched.rho, rank_sched.decomp)
    I, D = rank_sched.full_window()
    budget = compute_budget(runlog.d_full, runlog.d_low, rank_sched.epochs, I, D)
    write_metrics(out / "metrics.csv", runlog)
    header, rows = lambda_timeseries(runlog)
    _write_json(out / "spectral.json", {
        "fold": cfg.run_fold,
        "final": [layer_spectrum(l, cfg.run_fold) for l in net.layers],
        "lambda_timeseries": {"header": header, "rows": rows},
        "effective_rank_timeseries": [[r.epoch, *r.effective_ranks] for r in runlog.records],
    })
    _write_json(out / "budget.json", budget.to_dict())
    _write_json(out / "telemetry.json", {"events": runlog.events, "checks": runlog.telemetry,
                                         "violations": len(runlog.violations)})
    save_checkpoint(out / "final.ckpt",
                    Checkpoint(net, rank_sched.epochs, cfg.config_hash(), optimizer, runlog))
    write_heatmaps(out, net, cfg.run_heatmap_tail, cfg.run_fold)
    status = EXIT_OK if runlog.ok else EXIT_VIOLATION
    if status:
        log.error("%d telemetry violation(s) in %s", len(runlog.violations), out)
    return RunResult(status, out, runlog, budget)


def _run_replicate(args) -> tuple[int, str]:
    cfg, out = args
    res = run_single(cfg, out)
    return res.status, str(res.out_dir)


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("RANKSHIFT_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(cfg: ExperimentConfig, resume=None) -> int:
    """Run ``run.replicates`` seeds (``seed, seed+1, ...``) and return the exit status.

    Replicates write to ``<out>/seed_<s>`` and run in up to
    ``RANKSHIFT_THREADS`` worker processes.
    """
    cfg.validate()
    if cfg.run_replicates == 1:
        return run_single(cfg, resume=resume).status
    if resume is not None:
        raise ValueError("resume applies to single-replicate runs")
    base = Path(cfg.run_out)
    jobs = [(replace(cfg, run_seed=cfg.run_seed + r, run_replicates=1),
             base / f"seed_{cfg.run_seed + r}") for r in range(cfg.run_replicates)]
    workers = min(max_workers(), len(jobs))
    if workers == 1:
        results = [_run_replicate(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_replicate, jobs))
    return max(s for s, _ in results)
