"""Binary checkpoints: magic, version byte, JSON header, little-endian float64 payloads.

Layout::

    8 bytes   magic b"RKSHIFT\\x00"
    1 byte    format version
    4 bytes   header length (uint32, little endian)
    n bytes   UTF-8 JSON header
    ...       raw '<f8' arrays in header order
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError
from .layers import Layer, Network
from .schedule import SGD, EpochRecord, RunLog

MAGIC = b"RKSHIFT\x00"
VERSION = 1


class ConfigHashWarning(UserWarning):
    """Checkpoint was written under a different configuration."""


@dataclass
class Checkpoint:
    net: Network
    epoch: int
    config_hash: str = ""
    optimizer: SGD | None = None
    runlog: RunLog | None = None
    meta: dict = field(default_factory=dict)


def _records_to_json(runlog: RunLog) -> dict:
    return {
        "records": [asdict(r) for r in runlog.records],
        "events": [list(e) for e in runlog.events],
        "telemetry": runlog.telemetry,
        "d_full": runlog.d_full,
        "d_low": runlog.d_low,
    }


def _records_from_json(d: dict) -> RunLog:
    recs = []
    for r in d["records"]:
        r = dict(r)
        for k in ("lambdas", "effective_ranks", "modes"):
            r[k] = tuple(r[k])
        recs.append(EpochRecord(**r))
    return RunLog(recs, [tuple(e) for e in d["events"]], list(d["telemetry"]), d["d_full"], d["d_low"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays: list[np.ndarray] = []

    def put(a: np.ndarray) -> dict:
        arrays.append(np.ascontiguousarray(a, dtype="<f8"))
        return {"shape": list(a.shape)}

    layers = []
    for layer in ckpt.net.layers:
        layers.append({
            "kind": layer.kind,
            "shape": list(layer.shape),
            "activation": layer.activation,
            "mode": layer.mode,
            "decomp": layer.decomp,
            "params": [dict(name=n, **put(p)) for n, p in layer.params.items()],
            "base": None if layer.base is None else put(layer.base),
        })
    header = {
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "input_shape": list(ckpt.net.input_shape),
        "loss": ckpt.net.loss,
        "layers": layers,
        "meta": ckpt.meta,
    }
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        header["optimizer"] = {
            "momentum": opt.momentum,
            "weight_decay": opt.weight_decay,
            "velocity": [{"layer": i, "name": n, **put(v)} for (i, n), v in sorted(opt.velocity.items())],
        }
    if ckpt.runlog is not None:
        header["runlog"] = _records_to_json(ckpt.runlog)
    blob = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(a.tobytes())
    tmp.replace(path)


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    """Read a checkpoint; a differing ``expected_hash`` only warns."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise IngestionError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 13:
        raise IngestionError(f"{path}: truncated header")
    version, n = struct.unpack_from("<BI", data, 8)
    if version != VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[13:13 + n].decode())
    offset = 13 + n

    def take(spec: dict) -> np.ndarray:
        nonlocal offset
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) * 8
        if offset + size > len(data):
            raise IngestionError(f"{path}: payload truncated")
        a = np.frombuffer(data, dtype="<f8", count=size // 8, offset=offset).astype(np.float64).reshape(shape)
        offset += size
        return a

    layers = []
    for spec in header["layers"]:
        params = {p["name"]: take(p) for p in spec["params"]}
        base = None if spec["base"] is None else take(spec["base"])
        layers.append(Layer(spec["kind"], tuple(spec["shape"]), spec["activation"], spec["mode"],
                            spec["decomp"], params=params, base=base))
    optimizer = None
    if "optimizer" in header:
        o = header["optimizer"]
        optimizer = SGD(o["momentum"], o["weight_decay"],
                        {(v["layer"], v["name"]): take(v) for v in o["velocity"]})
    if offset != len(data):
        raise IngestionError(f"{path}: {len(data) - offset} trailing bytes")
    runlog = _records_from_json(header["runlog"]) if "runlog" in header else None
    if expected_hash is not None and expected_hash != header["config_hash"]:
        warnings.warn(f"checkpoint config hash {header['config_hash']!r} differs from {expected_hash!r}",
                      ConfigHashWarning, stacklevel=2)
    net = Network(layers, tuple(header["input_shape"]), header["loss"])
    return Checkpoint(net, header["epoch"], header["config_hash"], optimizer, runlog, header.get("meta", {}))
