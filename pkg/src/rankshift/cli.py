"""Command line front end: ``run``, ``budget``, ``spectra``, ``heatmap``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .checkpoint import load_checkpoint
from .config import ExperimentConfig
from .diagnostics import compute_budget, layer_spectrum, tail_reconstruction_heatmap
from .errors import RankShiftError
from .experiment import jsonable, build_network, run_experiment
from .layers import DECOMPS, effective_weight
from .rank_adjust import DEFLATE_POLICIES
from .schedule import auto_place, param_counts

# flag -> config field
_FLAG_FIELDS = {
    "epochs": "schedule_epochs",
    "inflate_epoch": "schedule_inflate_epoch",
    "deflate_epoch": "schedule_deflate_epoch",
    "auto_place": "schedule_auto_place",
    "fine_tune": "schedule_fine_tune",
    "phi": "schedule_phi",
    "rank_ratio": "schedule_rank_ratio",
    "decomp": "schedule_decomp",
    "lr": "optim_lr",
    "decay_epochs": "optim_decay_epochs",
    "decay_factor": "optim_decay_factor",
    "batch_size": "optim_batch_size",
    "momentum": "optim_momentum",
    "weight_decay": "optim_weight_decay",
    "so_coeff": "optim_so_coeff",
    "deflate_init": "rank_deflate_init",
    "seed": "run_seed",
    "out": "run_out",
    "replicates": "run_replicates",
    "generator": "data_generator",
    "data": "data_path",
    "n": "data_n",
}


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any dotted config key (repeatable)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--inflate-epoch", type=int)
    p.add_argument("--deflate-epoch", type=int)
    p.add_argument("--auto-place", action=argparse.BooleanOptionalAction, default=None,
                   help="place I/D at the middles of the high- and low-noise regimes")
    p.add_argument("--fine-tune", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--phi", type=float, help="full-rank fraction of the epochs (fine-tuning placement)")
    p.add_argument("--rank-ratio", type=float)
    p.add_argument("--decomp", choices=DECOMPS)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-epochs", type=_int_list)
    p.add_argument("--decay-factor", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--so-coeff", type=float)
    p.add_argument("--deflate-init", choices=DEFLATE_POLICIES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--replicates", type=int)
    p.add_argument("--generator")
    p.add_argument("--data", help="CSV file to ingest instead of a synthetic generator")
    p.add_argument("--n", type=int, help="synthetic dataset size")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for flag, name in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    # explicit I/D without an explicit --auto-place turns auto placement off
    if (args.inflate_epoch is not None or args.deflate_epoch is not None) and args.auto_place is None:
        overrides["schedule_auto_place"] = False
    return cfg.with_overrides(overrides)


def cmd_run(args) -> int:
    cfg = config_from_args(args).validate()
    return run_experiment(cfg, resume=args.resume)


def cmd_budget(args) -> int:
    cfg = config_from_args(args)
    E = cfg.schedule_epochs
    I, D = cfg.schedule_inflate_epoch, cfg.schedule_deflate_epoch
    if cfg.schedule_auto_place and I is None and D is None:
        I, D = auto_place(E, cfg.optim_decay_epochs, cfg.schedule_fine_tune, cfg.schedule_phi)
    d, d_low = args.d, args.d_low
    if d is None or d_low is None:
        net = build_network(cfg, cfg.data_input_dim, cfg.data_classes)
        d_net, d_low_net = param_counts(net, cfg.schedule_rank_ratio, cfg.schedule_decomp)
        d = d_net if d is None else d
        d_low = d_low_net if d_low is None else d_low
    budget = compute_budget(d, d_low, E, I, D)
    print(json.dumps(budget.to_dict(), indent=2))
    return 0


def cmd_spectra(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    report = {
        "epoch": ckpt.epoch,
        "fold": args.fold,
        "layers": [layer_spectrum(l, args.fold) for l in ckpt.net.layers],
    }
    text = json.dumps(jsonable(report), indent=2)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_heatmap(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    layers = ckpt.net.layers
    if not 0 <= args.layer < len(layers):
        raise RankShiftError(f"layer index {args.layer} out of range for {len(layers)} layers")
    H = tail_reconstruction_heatmap(effective_weight(layers[args.layer]), args.n_tail, args.fold)
    np.savetxt(args.output, H, fmt="%.17g")
    print(f"wrote {H.shape[0]}x{H.shape[1]} matrix to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankshift", description="Dynamic-rank training experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train per config and write artifacts")
    _add_config_flags(p)
    p.add_argument("--resume", help="continue from a checkpoint written by this config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("budget", help="parameter-epoch cost arithmetic only")
    _add_config_flags(p)
    p.add_argument("--d", type=int, help="full-rank trainable count (default: from config network)")
    p.add_argument("--d-low", type=int, help="low-rank trainable count (default: from config network)")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("spectra", help="spectral report of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--fold", choices=("hwc_f", "hc_wf"), default="hwc_f")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("heatmap", help="export the tail reconstruction of one layer")
    p.add_argument("checkpoint")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--n-tail", type=int, required=True)
    p.add_argument("--fold", choices=("hwc_f", "hc_wf"), default="hwc_f")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RankShiftError as exc:
        problems = getattr(exc, "problems", None) or [str(exc)]
        for p in problems:
            print(f"error: {p}", file=sys.stderr)
        return 2
    except argparse.ArgumentTypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
