"""Dynamic-rank training loop, learning-rate and rank schedules, SGD."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import effective_rank, spectral_ratio
from .errors import ConfigError, ParameterError
from .layers import DECOMPS, Layer, Network, effective_weight, so_penalty, unfold_kernel
from .rank_adjust import (
    DeflationInit,
    deflate_network,
    factor_pair,
    factor_shapes,
    inflate_network,
    prop1_bounds_check,
    prop2_gap,
    reparameterize,
)

log = logging.getLogger(__name__)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))

    def validate(self) -> list[str]:
        problems = []
        if not self.base_lr >= 0:
            problems.append(f"lr must be non-negative, got {self.base_lr}")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            problems.append(f"decay epochs must be strictly ascending, got {list(self.decay_epochs)}")
        if not 0 < self.decay_factor < 1:
            problems.append(f"decay factor must lie in (0, 1), got {self.decay_factor}")
        return problems

    def lr(self, epoch: int) -> float:
        n = sum(1 for e in self.decay_epochs if e <= epoch)
        return self.base_lr * self.decay_factor ** n


def noise_scale(lr: float, n: int, batch_size: int) -> float:
    """SGD noise scale ``g = lr * N / B``."""
    return lr * n / batch_size


@dataclass(frozen=True)
class RankSchedule:
    """Epochs ``1..E``; the network is full rank on ``[I, D)``.

    Both ``I`` and ``D`` absent: pure low-rank training. Only ``I``: full
    rank from ``I`` to the end. Only ``D``: full rank from the start until
    ``D``.
    """

    epochs: int
    inflate_epoch: int | None = None
    deflate_epoch: int | None = None
    rho: float = 0.5
    decomp: str = "svd"

    def problems(self) -> list[str]:
        out = []
        E, I, D = self.epochs, self.inflate_epoch, self.deflate_epoch
        if E < 1:
            out.append(f"epochs must be >= 1, got {E}")
        if I is not None and not 1 <= I <= E:
            out.append(f"inflate epoch {I} outside [1, {E}]")
        if D is not None and not 1 <= D <= E:
            out.append(f"deflate epoch {D} outside [1, {E}]")
        if I is not None and D is not None and I >= D:
            out.append(f"inflate epoch {I} must precede deflate epoch {D}")
        if not 0 < self.rho <= 1:
            out.append(f"rank ratio must lie in (0, 1], got {self.rho}")
        if self.decomp not in DECOMPS:
            out.append(f"unknown decomposition {self.decomp!r}")
        return out

    def validate(self) -> None:
        p = self.problems()
        if p:
            raise ConfigError(p)

    def full_window(self) -> tuple[int, int]:
        """Half-open epoch range trained at full rank."""
        I, D = self.inflate_epoch, self.deflate_epoch
        if I is None and D is None:
            return (1, 1)
        return (1 if I is None else I, self.epochs + 1 if D is None else D)

    @property
    def phi(self) -> float:
        start, stop = self.full_window()
        return (stop - start) / self.epochs

    @property
    def starts_lowrank(self) -> bool:
        return self.full_window()[0] > 1 or self.phi == 0


def auto_place(epochs: int, decay_epochs, fine_tune: bool = False, phi: float = 0.5) -> tuple[int, int]:
    """Inflate at the middle of the high-noise regime (before the first
    decay), deflate at the middle of the low-noise regime.

    In fine-tuning mode there is no high-noise regime: the full-rank window
    opens at epoch 1 and spans ``phi * epochs`` epochs.
    """
    if fine_tune:
        D = min(epochs, 1 + max(1, _round_half_up(phi * epochs)))
        if D <= 1:
            raise ConfigError("fine-tuning placement needs at least 2 epochs")
        return 1, D
    decays = [e for e in decay_epochs if 1 < e <= epochs]
    if not decays:
        raise ConfigError("auto-placement needs a decay epoch inside (1, E]")
    first = decays[0]
    I = max(1, _round_half_up(first / 2))
    D = min(epochs, _round_half_up((first + epochs) / 2))
    if I >= D:
        raise ConfigError(f"auto-placement produced I={I} >= D={D}")
    return I, D


def rank_for_layer(layer_dims, rho: float, decomp: str = "svd") -> int:
    """``max(1, round(rho * r_max))`` with ``r_max = min(m, n)`` for dense
    layers and ``min(C, F)`` for convolutions. A result ``>= r_max`` means the
    layer stays full rank."""
    if not 0 < rho <= 1:
        raise ParameterError(f"rho must lie in (0, 1], got {rho}")
    if decomp not in DECOMPS:
        raise ParameterError(f"unknown decomposition {decomp!r}")
    dims = tuple(layer_dims)
    r_max = min(dims) if len(dims) == 2 else min(dims[2], dims[3])
    return max(1, _round_half_up(rho * r_max))


def eligible_ranks(net: Network, rho: float, decomp: str = "svd") -> dict[int, int]:
    """Layer index -> rank for layers that get a low-rank form at ``rho``."""
    out = {}
    for i, layer in enumerate(net.layers):
        k = rank_for_layer(layer.shape, rho, decomp)
        if k < layer.max_rank:
            out[i] = k
    return out


def param_counts(net: Network, rho: float, decomp: str = "svd") -> tuple[int, int]:
    """Trainable counts ``(d, d_low)``: all layers full rank vs. reparameterized at ``rho``."""
    ranks = eligible_ranks(net, rho, decomp)
    d = d_low = 0
    for i, layer in enumerate(net.layers):
        full = int(np.prod(layer.shape)) + layer.fan_out
        d += full
        if i in ranks:
            shapes = factor_shapes(layer, decomp, ranks[i])
            d_low += sum(int(np.prod(s)) for s in shapes.values()) + layer.fan_out
        else:
            d_low += full
    return d, d_low


def reparameterize_network(net: Network, rho: float, decomp: str = "svd") -> dict[int, int]:
    ranks = eligible_ranks(net, rho, decomp)
    for i, k in ranks.items():
        if net.layers[i].mode == "full":
            net.layers[i] = reparameterize(net.layers[i], k, decomp)
    net.touch()
    return ranks


def sgd_step(params, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: dict | None = None):
    """``v <- momentum * v + grad + weight_decay * p``; ``p <- p - lr * v``.

    Updates ``params`` and ``velocity`` in place. Keys without a gradient
    (frozen tensors are never in ``params``) are left alone.
    """
    if lr < 0:
        raise ParameterError("lr must be non-negative")
    if not 0 <= momentum < 1:
        raise ParameterError("momentum must lie in [0, 1)")
    if velocity is None:
        velocity = {}
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        v = velocity.get(key)
        if v is None:
            v = velocity[key] = np.zeros_like(p)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params


@dataclass
class SGD:
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def step(self, net: Network, grads, lr: float) -> None:
        sgd_step(net.parameters(), grads, lr, self.momentum, self.weight_decay, self.velocity)
        net.touch()

    def reset(self, layer_indices) -> None:
        """Drop momentum for parameters that were replaced by a rank change."""
        drop = set(layer_indices)
        self.velocity = {k: v for k, v in self.velocity.items() if k[0] not in drop}


@dataclass
class TrainOptions:
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    so_coeff: float = 0.0
    deflate_init: DeflationInit = field(default_factory=DeflationInit)
    seed: int = 0
    fold: str = "hwc_f"
    # telemetry at rank changes and the last epoch; >0 adds every n-th epoch, <0 disables
    telemetry_every: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float
    g: float
    trainable_params: int
    lambdas: tuple[float, ...]
    effective_ranks: tuple[int, ...]
    modes: tuple[str, ...]


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)
    events: list[tuple[int, str]] = field(default_factory=list)
    telemetry: list[dict] = field(default_factory=list)
    d_full: int = 0
    d_low: int = 0

    @property
    def violations(self) -> list[dict]:
        return [t for t in self.telemetry if not t["holds"]]

    @property
    def ok(self) -> bool:
        return not self.violations


def _evaluate(net: Network, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    if len(x) == 0:
        return math.nan, math.nan
    logits, _ = net.forward(x)
    loss, _ = net.loss_value(logits, y)
    if net.loss == "ce":
        acc = float(np.mean(np.argmax(logits, axis=1) == y))
    else:
        acc = math.nan
    return loss, acc


def _telemetry(net: Network, xb: np.ndarray, yb: np.ndarray, lr: float, epoch: int) -> list[dict]:
    out = []
    lowrank = [i for i, l in enumerate(net.layers) if l.mode == "lowrank"]
    if not lowrank:
        return out
    _, _, cache = net.loss_and_grads(xb, yb)
    for i in lowrank:
        layer = net.layers[i]
        L, R = factor_pair(layer)
        base = layer.base_kernel()
        W0 = np.zeros((L.shape[0], R.shape[0])) if base is None else base.reshape(L.shape[0], -1)
        p1 = prop1_bounds_check(W0, L, R)
        out.append({"epoch": epoch, "layer": i, "check": "prop1", "r": p1.r,
                    "rank_W": p1.rank_W, "k": L.shape[1], "holds": p1.holds})
        if layer.decomp == "svd" and lr > 0:
            G = layer.effective_grad(cache.layers[i]).reshape(L.shape[0], -1)
            p2 = prop2_gap(L, R, G, lr)
            out.append({"epoch": epoch, "layer": i, "check": "prop2", "d": p2.d,
                        "bound": p2.bound, "eta": lr, "holds": p2.d <= p2.bound * (1 + 1e-12)})
    return out


def _layer_stats(layer: Layer, fold: str) -> tuple[float, int]:
    M = unfold_kernel(effective_weight(layer), fold)
    spec = spectral_ratio(M)
    return spec.lam, effective_rank(spec.sigmas, M.shape)


def train(net: Network, data, lr_sched: LrSchedule, rank_sched: RankSchedule,
          opts: TrainOptions | None = None, *, start_epoch: int = 1,
          optimizer: SGD | None = None, runlog: RunLog | None = None,
          on_epoch=None) -> RunLog:
    """Dynamic-rank training.

    ``data`` needs ``x_train``, ``y_train``, ``x_val``, ``y_val``. When the
    schedule opens in low-rank mode the eligible full-rank layers are
    reparameterized before the first epoch. At epoch ``I`` every low-rank
    layer is inflated, at epoch ``D`` every eligible layer is deflated, and
    momentum for replaced parameters is discarded. Mini-batch order and
    adaptor initialization depend only on ``opts.seed`` and the epoch.

    ``on_epoch(epoch, net, optimizer, runlog)`` is called after each epoch.
    """
    opts = opts or TrainOptions()
    problems = rank_sched.problems() + lr_sched.validate()
    if opts.batch_size < 1:
        problems.append(f"batch size must be >= 1, got {opts.batch_size}")
    if problems:
        raise ConfigError(problems)
    E, I, D = rank_sched.epochs, rank_sched.inflate_epoch, rank_sched.deflate_epoch
    ranks = eligible_ranks(net, rank_sched.rho, rank_sched.decomp)
    optimizer = optimizer or SGD(opts.momentum, opts.weight_decay)
    runlog = runlog or RunLog()

    if start_epoch == 1:
        runlog.d_full, runlog.d_low = param_counts(net, rank_sched.rho, rank_sched.decomp)
        if rank_sched.starts_lowrank:
            reparameterize_network(net, rank_sched.rho, rank_sched.decomp)

    x, y = np.asarray(data.x_train, dtype=np.float64), np.asarray(data.y_train)
    N, B = len(x), opts.batch_size
    for t in range(start_epoch, E + 1):
        adjusted = False
        if t == I:
            optimizer.reset(inflate_network(net))
            runlog.events.append((t, "inflate"))
            adjusted = True
        if t == D:
            rng = np.random.default_rng([opts.seed, t, 1])
            optimizer.reset(deflate_network(net, ranks, opts.deflate_init, rng, rank_sched.decomp))
            runlog.events.append((t, "deflate"))
            adjusted = True
        lr = lr_sched.lr(t)
        order = np.random.default_rng([opts.seed, t]).permutation(N)
        total = 0.0
        for s in range(0, N, B):
            idx = order[s:s + B]
            loss, grads, _ = net.loss_and_grads(x[idx], y[idx])
            if opts.so_coeff:
                for i, layer in enumerate(net.layers):
                    pen, pg = so_penalty(layer, opts.so_coeff)
                    loss += pen
                    for name, gval in pg.items():
                        grads[(i, name)] = grads[(i, name)] + gval
            optimizer.step(net, grads, lr)
            total += loss * len(idx)
        val_loss, val_acc = _evaluate(net, data.x_val, data.y_val)
        stats = [_layer_stats(l, opts.fold) for l in net.layers]
        runlog.records.append(EpochRecord(
            epoch=t,
            train_loss=total / N,
            val_loss=val_loss,
            val_acc=val_acc,
            lr=lr,
            g=noise_scale(lr, N, B),
            trainable_params=net.trainable_count(),
            lambdas=tuple(s[0] for s in stats),
            effective_ranks=tuple(s[1] for s in stats),
            modes=tuple(l.mode for l in net.layers),
        ))
        every = opts.telemetry_every
        if every >= 0 and (adjusted or t == E or (every > 0 and t % every == 0)):
            probe_idx = order[:B]
            checks = _telemetry(net, x[probe_idx], y[probe_idx], lr, t)
            runlog.telemetry.extend(checks)
            for c in checks:
                if not c["holds"]:
                    log.warning("telemetry violation at epoch %d: %s", t, c)
        log.debug("epoch %d loss %.5f val_acc %.4f", t, total / N, val_acc)
        if on_epoch is not None:
            on_epoch(t, net, optimizer, runlog)
    return runlog
