"""Seeded synthetic datasets and CSV ingestion."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError

GENERATORS = ("gaussian-mixture-<k>", "two-spirals", "low-rank-teacher")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        ys = np.concatenate([self.y_train, self.y_val])
        return int(ys.max()) + 1 if ys.size else 0

    @property
    def input_dim(self) -> int:
        return int(self.x_train.shape[1])

    def __len__(self) -> int:
        return len(self.x_train) + len(self.x_val)


def split(x: np.ndarray, y: np.ndarray, rng: np.random.Generator, meta=None) -> Dataset:
    """Shuffle, then hold out ``N // 6`` rows for validation (5:1 split)."""
    order = rng.permutation(len(x))
    n_val = len(x) // 6
    tr, va = order[: len(x) - n_val], order[len(x) - n_val:]
    return Dataset(x[tr], y[tr], x[va], y[va], meta or {})


def _gaussian_mixture(n, k, dim, noise, rng):
    centers = rng.normal(0.0, 3.0, size=(k, dim))
    y = rng.integers(0, k, size=n)
    x = centers[y] + rng.normal(0.0, 1.0 if noise is None else noise, size=(n, dim))
    return x, y, {"centers": centers}


def _two_spirals(n, noise, turns, rng):
    y = np.arange(n) % 2
    rng.shuffle(y)
    theta = np.sqrt(rng.uniform(0.0, 1.0, size=n)) * turns * 2.0 * np.pi
    r = theta / (turns * 2.0 * np.pi)
    sign = np.where(y == 0, 1.0, -1.0)
    x = np.stack([sign * r * np.cos(theta), sign * r * np.sin(theta)], axis=1)
    x += rng.normal(0.0, 0.02 if noise is None else noise, size=x.shape)
    return x, y, {"turns": turns}


def _low_rank_teacher(n, dim, classes, rank, hidden, rng):
    if not 1 <= rank <= min(dim, hidden):
        raise ConfigError(f"teacher rank {rank} must lie in [1, min(input_dim, hidden)={min(dim, hidden)}]")
    U = rng.normal(size=(dim, rank))
    V = rng.normal(size=(hidden, rank))
    W1 = U @ V.T / np.sqrt(dim)
    W2 = rng.normal(size=(hidden, classes))
    x = rng.normal(size=(n, dim))
    y = np.argmax(np.maximum(x @ W1, 0.0) @ W2, axis=1)
    return x, y, {"teacher_hidden": W1, "teacher_out": W2, "teacher_rank": rank}


def generate_synthetic(name: str, n: int, seed: int, *, input_dim: int = 2, classes: int = 2,
                       noise: float | None = None, turns: float = 1.5,
                       teacher_rank: int = 4, teacher_hidden: int = 16) -> Dataset:
    """Deterministic synthetic classification data with a 5:1 train/val split.

    ``name`` is ``gaussian-mixture-<k>``, ``two-spirals`` or
    ``low-rank-teacher``; the teacher labels come from a planted
    ReLU network whose hidden weight has numerical rank ``teacher_rank``.
    """
    rng = np.random.default_rng(seed)
    problems = []
    if n < 1:
        problems.append(f"dataset size must be positive, got {n}")
    m = re.fullmatch(r"gaussian-mixture-(\d+)", name)
    if m:
        k = int(m.group(1))
        if k < 2:
            problems.append("gaussian mixture needs at least 2 components")
        if problems:
            raise ConfigError(problems)
        x, y, meta = _gaussian_mixture(n, k, input_dim, noise, rng)
    elif name == "two-spirals":
        if problems:
            raise ConfigError(problems)
        x, y, meta = _two_spirals(n, noise, turns, rng)
    elif name == "low-rank-teacher":
        if problems:
            raise ConfigError(problems)
        x, y, meta = _low_rank_teacher(n, input_dim, classes, teacher_rank, teacher_hidden, rng)
    else:
        raise ConfigError(problems + [f"unknown generator {name!r}; expected one of {GENERATORS}"])
    meta["generator"] = name
    return split(x, y, rng, meta)


def ingest_csv(path, schema: list[str] | None = None, seed: int = 0) -> Dataset:
    """Load a numeric CSV with a header row; the last column is an integer label.

    Features are standardized with train-split statistics only; constant
    features map to zero.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [(i + 1, r) for i, r in enumerate(rows) if any(c.strip() for c in r)]
    if not rows:
        raise IngestionError(f"{path}: empty file")
    header_line, header = rows[0]
    header = [h.strip() for h in header]
    if len(header) < 2:
        raise IngestionError(f"{path}:{header_line}: need at least one feature and a label column")
    if schema is not None and list(schema) != header:
        raise IngestionError(f"{path}:{header_line}: header {header} does not match schema {list(schema)}")
    if len(rows) == 1:
        raise IngestionError(f"{path}: no data rows")
    values = np.empty((len(rows) - 1, len(header)))
    errors = []
    for r, (line, cells) in enumerate(rows[1:]):
        if len(cells) != len(header):
            errors.append(f"line {line}: expected {len(header)} fields, got {len(cells)}")
            continue
        for c, cell in enumerate(cells):
            try:
                v = float(cell)
            except ValueError:
                errors.append(f"line {line}, column {c + 1} ({header[c]!r}): non-numeric value {cell!r}")
                continue
            if not np.isfinite(v):
                errors.append(f"line {line}, column {c + 1} ({header[c]!r}): non-finite value {cell!r}")
            elif c == len(header) - 1 and (v != int(v) or v < 0):
                errors.append(f"line {line}: label {cell!r} is not a non-negative integer")
            values[r, c] = v
    if errors:
        raise IngestionError(f"{path}: " + "; ".join(errors))
    x, y = values[:, :-1], values[:, -1].astype(np.int64)
    ds = split(x, y, np.random.default_rng(seed), {"source": str(path), "columns": header})
    mean = ds.x_train.mean(axis=0) if len(ds.x_train) else np.zeros(x.shape[1])
    std = ds.x_train.std(axis=0) if len(ds.x_train) else np.ones(x.shape[1])
    std = np.where(std > 0, std, 1.0)
    ds.x_train = (ds.x_train - mean) / std
    ds.x_val = (ds.x_val - mean) / std
    ds.meta.update(mean=mean, std=std)
    return ds
