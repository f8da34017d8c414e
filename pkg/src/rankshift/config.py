"""Experiment configuration: flat ``section.key = value`` text plus overrides."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .layers import DECOMPS, LOSSES
from .rank_adjust import DEFLATE_POLICIES
from .schedule import LrSchedule, RankSchedule, auto_place

# value kinds for parsing and serialization
_KINDS = {
    "data_generator": "str",
    "data_path": "str",
    "data_n": "int",
    "data_classes": "int",
    "data_input_dim": "int",
    "data_noise": "float",
    "data_turns": "float",
    "data_teacher_rank": "int",
    "net_hidden": "ints",
    "net_image_shape": "ints",
    "net_conv_channels": "ints",
    "net_kernel": "int",
    "net_loss": "str",
    "schedule_epochs": "int",
    "schedule_inflate_epoch": "optint",
    "schedule_deflate_epoch": "optint",
    "schedule_auto_place": "bool",
    "schedule_fine_tune": "bool",
    "schedule_phi": "float",
    "schedule_rank_ratio": "float",
    "schedule_decomp": "str",
    "optim_lr": "float",
    "optim_decay_epochs": "ints",
    "optim_decay_factor": "float",
    "optim_batch_size": "int",
    "optim_momentum": "float",
    "optim_weight_decay": "float",
    "optim_so_coeff": "float",
    "rank_deflate_init": "str",
    "rank_init_scale": "float",
    "run_seed": "int",
    "run_out": "str",
    "run_telemetry_every": "int",
    "run_heatmap_tail": "optint",
    "run_fold": "str",
    "run_replicates": "int",
    "run_checkpoint_every": "int",
}

# keys that do not influence the trained weights
_NON_SEMANTIC = {"run_out", "run_replicates", "run_telemetry_every", "run_heatmap_tail",
                 "run_fold", "run_checkpoint_every"}


@dataclass(frozen=True)
class ExperimentConfig:
    data_generator: str = "two-spirals"
    data_path: str = ""
    data_n: int = 2000
    data_classes: int = 2
    data_input_dim: int = 2
    data_noise: float = 0.02
    data_turns: float = 1.5
    data_teacher_rank: int = 4
    net_hidden: tuple[int, ...] = (64, 64, 64)
    net_image_shape: tuple[int, ...] = ()
    net_conv_channels: tuple[int, ...] = ()
    net_kernel: int = 3
    net_loss: str = "ce"
    schedule_epochs: int = 60
    schedule_inflate_epoch: int | None = None
    schedule_deflate_epoch: int | None = None
    schedule_auto_place: bool = True
    schedule_fine_tune: bool = False
    schedule_phi: float = 0.5
    schedule_rank_ratio: float = 0.5
    schedule_decomp: str = "svd"
    optim_lr: float = 0.01
    optim_decay_epochs: tuple[int, ...] = (40, 54)
    optim_decay_factor: float = 0.1
    optim_batch_size: int = 32
    optim_momentum: float = 0.9
    optim_weight_decay: float = 0.0
    optim_so_coeff: float = 0.0
    rank_deflate_init: str = "zero-b"
    rank_init_scale: float = 1.0
    run_seed: int = 0
    run_out: str = "runs/default"
    run_telemetry_every: int = 0
    run_heatmap_tail: int | None = None
    run_fold: str = "hwc_f"
    run_replicates: int = 1
    run_checkpoint_every: int = 0

    # -- keys ---------------------------------------------------------------

    @staticmethod
    def key_of(name: str) -> str:
        return name.replace("_", ".", 1)

    @staticmethod
    def name_of(key: str) -> str:
        return key.replace(".", "_", 1)

    @classmethod
    def keys(cls) -> list[str]:
        return [cls.key_of(f.name) for f in fields(cls)]

    # -- text form ----------------------------------------------------------

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{self.key_of(f.name)} = {_format(_KINDS[f.name], getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
        """Parse ``key = value`` lines over ``base`` (defaults if omitted).

        Blank lines and lines starting with ``#`` are ignored. All malformed
        lines are reported together.
        """
        values, problems = {}, []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                problems.append(f"line {lineno}: expected 'key = value', got {raw!r}")
                continue
            name = cls.name_of(key)
            if name not in _KINDS:
                problems.append(f"line {lineno}: unknown key {key!r}")
                continue
            try:
                values[name] = _parse(_KINDS[name], value.strip())
            except ValueError as exc:
                problems.append(f"line {lineno}: {key}: {exc}")
        if problems:
            raise ConfigError(problems)
        return replace(base or cls(), **values)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.parse(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.serialize())

    def with_overrides(self, overrides: dict[str, object]) -> ExperimentConfig:
        """Apply ``{dotted key or field name: value}``; strings are parsed by kind."""
        values, problems = {}, []
        for key, value in overrides.items():
            name = self.name_of(key) if "." in key else key
            if name not in _KINDS:
                problems.append(f"unknown key {key!r}")
                continue
            if isinstance(value, str):
                try:
                    value = _parse(_KINDS[name], value)
                except ValueError as exc:
                    problems.append(f"{key}: {exc}")
                    continue
            elif _KINDS[name] == "ints":
                value = tuple(int(v) for v in value)
            values[name] = value
        if problems:
            raise ConfigError(problems)
        return replace(self, **values)

    def config_hash(self) -> str:
        """Digest over the fields that determine training outcomes."""
        text = "\n".join(
            f"{self.key_of(f.name)}={_format(_KINDS[f.name], getattr(self, f.name))}"
            for f in fields(self) if f.name not in _NON_SEMANTIC
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    # -- validation -----------------------------------------------------------

    def problems(self) -> list[str]:
        out = []

        def need(cond, msg):
            if not cond:
                out.append(msg)

        if not self.data_path:
            gen_ok = self.data_generator in ("two-spirals", "low-rank-teacher") or bool(
                re.fullmatch(r"gaussian-mixture-([2-9]|[1-9]\d+)", self.data_generator))
            need(gen_ok, f"data.generator: unknown generator {self.data_generator!r}")
            need(self.data_n >= 6, f"data.n: need at least 6 samples, got {self.data_n}")
            need(self.data_classes >= 2, f"data.classes: need at least 2, got {self.data_classes}")
            need(self.data_input_dim >= 1, f"data.input_dim: must be positive, got {self.data_input_dim}")
            mix = re.fullmatch(r"gaussian-mixture-(\d+)", self.data_generator)
            if mix:
                need(int(mix.group(1)) == self.data_classes,
                     f"data.classes: gaussian-mixture-{mix.group(1)} has {mix.group(1)} classes, "
                     f"got {self.data_classes}")
            if self.data_generator == "two-spirals":
                need(self.data_input_dim == 2, "data.input_dim: two-spirals is 2-dimensional")
                need(self.data_classes == 2, "data.classes: two-spirals has 2 classes")
            if self.data_generator == "low-rank-teacher":
                need(1 <= self.data_teacher_rank <= self.data_input_dim,
                     f"data.teacher_rank: must lie in [1, input_dim], got {self.data_teacher_rank}")
        need(self.data_noise >= 0, f"data.noise: must be non-negative, got {self.data_noise}")
        need(self.data_turns > 0, f"data.turns: must be positive, got {self.data_turns}")
        need(all(h >= 1 for h in self.net_hidden), f"net.hidden: widths must be positive, got {self.net_hidden}")
        if self.net_conv_channels:
            need(len(self.net_image_shape) == 3 and all(s >= 1 for s in self.net_image_shape),
                 f"net.image_shape: conv layers need H,W,C, got {self.net_image_shape}")
            need(all(c >= 1 for c in self.net_conv_channels), "net.conv_channels: must be positive")
        need(self.net_kernel >= 1, f"net.kernel: must be positive, got {self.net_kernel}")
        need(self.net_loss in LOSSES, f"net.loss: expected one of {LOSSES}, got {self.net_loss!r}")
        need(self.schedule_decomp in DECOMPS,
             f"schedule.decomp: expected one of {DECOMPS}, got {self.schedule_decomp!r}")
        need(0 < self.schedule_phi <= 1, f"schedule.phi: must lie in (0, 1], got {self.schedule_phi}")
        if self.schedule_auto_place and (self.schedule_inflate_epoch is not None
                                         or self.schedule_deflate_epoch is not None):
            out.append("schedule.auto_place: conflicts with explicit inflate/deflate epochs")
        lr = self.lr_schedule()
        out.extend(f"optim: {p}" for p in lr.validate())
        need(self.optim_batch_size >= 1, f"optim.batch_size: must be >= 1, got {self.optim_batch_size}")
        need(0 <= self.optim_momentum < 1, f"optim.momentum: must lie in [0, 1), got {self.optim_momentum}")
        need(self.optim_weight_decay >= 0, "optim.weight_decay: must be non-negative")
        need(self.optim_so_coeff >= 0, "optim.so_coeff: must be non-negative")
        need(self.rank_deflate_init in DEFLATE_POLICIES,
             f"rank.deflate_init: expected one of {DEFLATE_POLICIES}, got {self.rank_deflate_init!r}")
        need(self.rank_init_scale > 0, "rank.init_scale: must be positive")
        need(self.run_seed >= 0, "run.seed: must be non-negative")
        need(bool(self.run_out), "run.out: output directory required")
        need(self.run_heatmap_tail is None or self.run_heatmap_tail >= 0,
             "run.heatmap_tail: must be non-negative")
        need(self.run_fold in ("hwc_f", "hc_wf"), f"run.fold: unknown fold {self.run_fold!r}")
        need(self.run_replicates >= 1, "run.replicates: must be >= 1")
        need(self.run_checkpoint_every >= 0, "run.checkpoint_every: must be non-negative")
        if self.schedule_epochs < 1:
            out.append(f"schedule.epochs: must be >= 1, got {self.schedule_epochs}")
        else:
            try:
                rs = self.rank_schedule()
            except ConfigError as exc:
                out.extend(f"schedule: {p}" for p in exc.problems)
            else:
                out.extend(f"schedule: {p}" for p in rs.problems())
        return out

    def validate(self) -> ExperimentConfig:
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    # -- derived objects ----------------------------------------------------------

    def lr_schedule(self) -> LrSchedule:
        return LrSchedule(self.optim_lr, self.optim_decay_epochs, self.optim_decay_factor)

    def rank_schedule(self) -> RankSchedule:
        I, D = self.schedule_inflate_epoch, self.schedule_deflate_epoch
        if self.schedule_auto_place:
            I, D = auto_place(self.schedule_epochs, self.optim_decay_epochs,
                              self.schedule_fine_tune, self.schedule_phi)
        return RankSchedule(self.schedule_epochs, I, D, self.schedule_rank_ratio, self.schedule_decomp)


def _format(kind: str, value) -> str:
    if value is None:
        return "none"
    if kind == "ints":
        return ",".join(str(v) for v in value)
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    return str(value)


def _parse(kind: str, text: str):
    if kind == "str":
        return text
    if kind in ("optint",) and text.lower() in ("none", ""):
        return None
    if kind in ("int", "optint"):
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"expected an integer, got {text!r}") from None
    if kind == "float":
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"expected a number, got {text!r}") from None
    if kind == "bool":
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if kind == "ints":
        if not text:
            return ()
        try:
            return tuple(int(p) for p in text.split(","))
        except ValueError:
            raise ValueError(f"expected comma-separated integers, got {text!r}") from None
    raise AssertionError(kind)
