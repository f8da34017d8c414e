"""End-to-end acceptance checks. Each test prints one PASS/FAIL line, and the
lines are repeated in the pytest terminal summary.

Run only this suite with ``pytest tests/test_acceptance.py -v``.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from scipy.stats import binomtest

from conftest import ACCEPTANCE_LINES
from oracles import finite_difference_grads
from rankshift.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from rankshift.cli import main
from rankshift.config import ExperimentConfig
from rankshift.experiment import max_workers, run_single
from rankshift.layers import DECOMPS, Network, conv, dense
from rankshift.linalg import truncated_svd
from rankshift.rank_adjust import (
    DeflationInit,
    deflate,
    deflate_network,
    inflate_network,
    prop1_bounds_check,
    prop2_gaps,
)
from rankshift.schedule import eligible_ranks


def report(name: str, ok: bool, detail: str, seconds: float) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({seconds:.2f}s)"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def budget_json(capsys, *argv) -> dict:
    assert main(["budget", *argv]) == 0
    return json.loads(capsys.readouterr().out)


PUBLISHED = ["--d", "272762", "--d-low", "155170", "--epochs", "150"]


def test_cost_arithmetic(capsys):
    t = time.perf_counter()
    out = budget_json(capsys, *PUBLISHED, "--inflate-epoch", "60", "--deflate-epoch", "135")
    ok = abs(out["comp_ratio"] - 0.7844) <= 1e-4
    report("cost-arithmetic", ok, f"comp_ratio={out['comp_ratio']:.6f} vs 0.7844 +- 1e-4",
           time.perf_counter() - t)


def test_auto_placement(capsys):
    t = time.perf_counter()
    out = budget_json(capsys, *PUBLISHED, "--decay-epochs", "100")
    ok = (out["I"], out["D"]) == (50, 125)
    report("auto-placement", ok, f"I={out['I']} D={out['D']} (want 50, 125)", time.perf_counter() - t)


def test_rank_update_bounds():
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    violations = 0
    for _ in range(1000):
        m, n = rng.integers(1, 17, size=2)
        r0 = int(rng.integers(0, min(m, n) + 1))
        k = int(rng.integers(0, min(m, n) + 1))
        W0 = rng.normal(size=(m, r0)) @ rng.normal(size=(r0, n))
        res = prop1_bounds_check(W0, rng.normal(size=(m, k)), rng.normal(size=(n, k)), rel_tol=1e-8)
        violations += not res.holds
    # exact cancellation: remove k of the r components of W0
    hits = 0
    for r, k in [(5, 2), (8, 3), (16, 16), (4, 1)]:
        Q1, _ = np.linalg.qr(rng.normal(size=(16, r)))
        Q2, _ = np.linalg.qr(rng.normal(size=(16, r)))
        s = rng.uniform(1, 2, size=r)
        W0 = (Q1 * s) @ Q2.T
        res = prop1_bounds_check(W0, -Q1[:, :k] * s[:k], Q2[:, :k], rel_tol=1e-8)
        hits += res.holds and (res.r, res.rank_W) == (r, r - k)
    ok = violations == 0 and hits == 4
    report("rank-update-bounds", ok, f"{violations} violations in 1000, cancellation {hits}/4 at r-k",
           time.perf_counter() - t)


def test_step_gap_bound():
    t = time.perf_counter()
    rng = np.random.default_rng(2025)
    etas = (1.0, 0.1, 0.01, 0.001)
    over, non_monotone = 0, 0
    for _ in range(1000):
        m, n = rng.integers(1, 17, size=2)
        k = int(rng.integers(1, min(m, n) + 1))
        scale = 10.0 ** rng.uniform(-2, 1)
        A, B = scale * rng.normal(size=(m, k)), scale * rng.normal(size=(n, k))
        G = rng.normal(size=(m, n))
        res = prop2_gaps(A, B, G, etas)
        over += sum(r.d > r.bound for r in res)
        non_monotone += not all(a.bound > b.bound for a, b in zip(res, res[1:]))
    ok = over == 0 and non_monotone == 0
    report("step-gap-bound", ok, f"{over} bound violations, {non_monotone} non-decreasing bound sequences",
           time.perf_counter() - t)


def conv_net(seed: int) -> Network:
    rng = np.random.default_rng(seed)
    return Network([
        conv(3, 3, 3, 6, rng),
        conv(3, 3, 6, 5, rng),
        dense(5 * 5 * 5, 8, rng),
        dense(8, 4, rng, "identity"),
    ], (5, 5, 3))


def test_function_preservation():
    t = time.perf_counter()
    worst = 0.0
    for decomp in DECOMPS:
        for seed in range(20):
            net = conv_net(seed)
            rng = np.random.default_rng(1000 + seed)
            x = rng.normal(size=(50, 5, 5, 3))
            y_full = net.forward(x)[0]
            deflate_network(net, eligible_ranks(net, 0.5, decomp), DeflationInit("zero-b"), rng, decomp)
            y_deflated = net.forward(x)[0]
            for layer in net.layers:
                for name in layer.params:
                    if name != "b":
                        layer.params[name] += 0.1 * rng.normal(size=layer.params[name].shape)
            net.touch()
            y_low = net.forward(x)[0]
            inflate_network(net)
            y_inflated = net.forward(x)[0]
            worst = max(worst, np.abs(y_deflated - y_full).max(), np.abs(y_inflated - y_low).max())
    ok = worst <= 1e-12
    report("function-preservation", ok, f"max output change {worst:.3e} over 3 x 20 nets x 50 inputs",
           time.perf_counter() - t)


def test_gradient_oracle():
    t = time.perf_counter()
    worst = 0.0
    for decomp in DECOMPS:
        rng = np.random.default_rng(77)
        net = Network([
            deflate(conv(3, 3, 3, 4, rng), 2, DeflationInit("random"), rng, decomp),
            dense(4 * 4 * 4, 3, rng, "identity"),
        ], (4, 4, 3))
        x, y = rng.normal(size=(6, 4, 4, 3)), rng.integers(0, 3, 6)
        _, grads, _ = net.loss_and_grads(x, y)
        params = net.parameters()
        num = finite_difference_grads(lambda: net.loss_value(net.forward(x)[0], y)[0], params, step=1e-5)
        for key in params:
            scale = max(np.abs(num[key]).max(), 1e-12)
            worst = max(worst, float(np.abs(num[key] - grads[key]).max() / scale))
    ok = worst < 1e-6
    report("gradient-oracle", ok, f"max relative error {worst:.3e} (svd, tucker, cp)", time.perf_counter() - t)


def test_eckart_young():
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        m, n = rng.integers(2, 25, size=2)
        k = int(rng.integers(1, min(m, n)))
        W = rng.normal(size=(m, n)) * 10.0 ** rng.uniform(-3, 3)
        A, B = truncated_svd(W, k)
        err = np.linalg.norm(W - A @ B.T)
        sigma = np.linalg.svd(W, compute_uv=False)
        tail = np.sqrt(np.sum(sigma[k:] ** 2))
        worst = max(worst, abs(err - tail) / tail)
    ok = worst <= 1e-8
    report("eckart-young", ok, f"max relative deviation {worst:.3e} over 200 matrices", time.perf_counter() - t)


def test_phi_monotone(capsys):
    t = time.perf_counter()
    ratios = [budget_json(capsys, *PUBLISHED, "--fine-tune", "--phi", str(phi))["comp_ratio"]
              for phi in (0.1, 0.3, 0.5, 0.7, 0.9)]
    ok = all(a < b for a, b in zip(ratios, ratios[1:]))
    report("phi-monotonicity", ok, "comp_ratio " + ", ".join(f"{r:.4f}" for r in ratios),
           time.perf_counter() - t)


# Desk-scale runs: the config defaults are the desk setup (two-spirals, N=2000,
# 2-64-64-64-2 MLP, B=32, E=60, decay at 40 and 54, rank ratio 0.5).
DESK_SEEDS = range(5)
DESK_VARIANTS = {
    "full": {"schedule_auto_place": False, "schedule_inflate_epoch": 1},
    "low": {"schedule_auto_place": False},
    "dynamic": {},
    "dynamic+so": {"optim_so_coeff": 5e-5},
}


def _desk_run(job):
    variant, seed, out = job
    res = run_single(ExperimentConfig(run_seed=seed, **DESK_VARIANTS[variant]), out)
    last = res.runlog.records[-1]
    return variant, seed, res.status, last.val_acc, float(np.median(last.lambdas))


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    jobs = [(v, s, root / f"{v}_{s}") for v in DESK_VARIANTS for s in DESK_SEEDS]
    t = time.perf_counter()
    with ProcessPoolExecutor(max_workers()) as pool:
        rows = list(pool.map(_desk_run, jobs))
    out = {v: sorted(r[1:] for r in rows if r[0] == v) for v in DESK_VARIANTS}
    out["seconds"] = time.perf_counter() - t
    return out


def _median(rows, col):
    return float(np.median([r[col] for r in rows]))


@pytest.mark.slow
def test_desk_trends(desk):
    acc = {v: _median(desk[v], 2) for v in ("full", "low", "dynamic")}
    lam = {v: _median(desk[v], 3) for v in ("full", "low", "dynamic")}
    clean = all(r[1] == 0 for v in DESK_VARIANTS for r in desk[v])
    a = lam["low"] >= lam["full"]
    b = lam["dynamic"] <= lam["low"]
    c = acc["dynamic"] >= acc["low"] and acc["dynamic"] >= acc["full"] - 0.01
    detail = (f"lambda full={lam['full']:.4g} low={lam['low']:.4g} dynamic={lam['dynamic']:.4g}; "
              f"acc full={acc['full']:.4f} low={acc['low']:.4f} dynamic={acc['dynamic']:.4f}; "
              f"(a)={a} (b)={b} (c)={c} telemetry clean={clean}")
    report("desk-trends", a and b and c and clean, detail, desk["seconds"])


@pytest.mark.slow
def test_soft_orthogonality(desk):
    base = {r[0]: r[2] for r in desk["dynamic"]}
    so = {r[0]: r[2] for r in desk["dynamic+so"]}
    diffs = [so[s] - base[s] for s in DESK_SEEDS]
    nonzero = [d for d in diffs if d != 0]
    worse = sum(d < 0 for d in nonzero)
    # one-sided: is SO significantly worse than no SO?
    p = binomtest(worse, len(nonzero), 0.5, alternative="greater").pvalue if nonzero else 1.0
    med = float(np.median([so[s] for s in DESK_SEEDS]) - np.median([base[s] for s in DESK_SEEDS]))
    detail = (f"median acc change {med:+.4f}, {worse}/{len(nonzero)} nonzero pairs worse, "
              f"sign-test p={p:.3f} (fail if < 0.05)")
    report("soft-orthogonality", p >= 0.05, detail, desk["seconds"])


def test_determinism_and_persistence(tmp_path):
    t = time.perf_counter()
    cfg = ExperimentConfig(run_seed=11, schedule_epochs=6, optim_decay_epochs=(4, 5), data_n=300,
                           optim_so_coeff=1e-4, rank_deflate_init="random")
    run_single(cfg, tmp_path / "a")
    run_single(cfg, tmp_path / "b")
    same_metrics = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    ck = load_checkpoint(tmp_path / "a" / "final.ckpt", cfg.config_hash())
    save_checkpoint(tmp_path / "again.ckpt", ck)
    same_bytes = (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    back = load_checkpoint(tmp_path / "again.ckpt")
    same_arrays = all(
        a.params.keys() == b.params.keys()
        and all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
        and (a.base is None or a.base.tobytes() == b.base.tobytes())
        for a, b in zip(ck.net.layers, back.net.layers)
    )
    ok = same_metrics and same_bytes and same_arrays and isinstance(back, Checkpoint)
    report("determinism-persistence", ok,
           f"metrics identical={same_metrics}, checkpoint bytes identical={same_bytes}, arrays exact={same_arrays}",
           time.perf_counter() - t)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
