"""Checkpoint serialization.

Checkpoints reuse the dataset record container (f32 payloads).  Saving
quantizes the live parameters and optimizer moments to f32 IN PLACE, so
the forward pass after a save is bit-identical to the forward pass after
reloading that file, and save -> load -> save reproduces the file byte for
byte.  The training RNG needs no stored state: every stream is re-derived
from (seed, purpose, epoch, step) counters, all of which are saved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig, config_from_json, config_to_json
from .dataio import CKPT_MAGIC, read_records, write_records
from .losses import VarianceTracker
from .optim import AdamW


def _quantize(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).astype(np.float64)


def _text_record(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _record_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr).astype(np.uint8)).decode("utf-8")


@dataclass
class CheckpointData:
    config: TrainConfig
    epoch: int
    usage: np.ndarray
    tracker_state: np.ndarray
    params: dict[str, np.ndarray] = field(default_factory=dict)
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int = 0

    def make_tracker(self) -> VarianceTracker:
        tr = VarianceTracker(self.config.var_decay)
        tr.load(self.tracker_state)
        return tr


def save_checkpoint(path: str, bundle, cfg: TrainConfig, epoch: int,
                    tracker: VarianceTracker, optimizer: AdamW | None = None):
    """Write model state.  Side effect: parameters (and moments) are rounded
    to f32 precision in place so the saved file equals the live model."""
    named = list(bundle.named_parameters())
    bundle.usage = _quantize(bundle.usage)
    tracker.load(_quantize(tracker.state()))
    records: list[tuple[str, np.ndarray]] = [
        ("config", _text_record(config_to_json(cfg))),
        ("epoch", np.array([float(epoch)])),
        ("usage", bundle.usage),
        ("tracker", tracker.state()),
    ]
    for name, p in named:
        p.data = _quantize(p.data)
        records.append((f"p:{name}", p.data))
    if optimizer is not None:
        by_id = {id(p): name for name, p in named}
        records.append(("opt_step", np.array([float(optimizer.t)])))
        for i, p in enumerate(optimizer.params):
            name = by_id.get(id(p))
            if name is None:
                raise ValueError("optimizer tracks a parameter the model "
                                 "does not expose")
            optimizer.m[i] = _quantize(optimizer.m[i])
            optimizer.v[i] = _quantize(optimizer.v[i])
            records.append((f"om:{name}", optimizer.m[i]))
            records.append((f"ov:{name}", optimizer.v[i]))
    write_records(path, CKPT_MAGIC, dict(records))


def read_checkpoint(path: str) -> CheckpointData:
    try:
        records = dict(read_records(path, CKPT_MAGIC))
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot load checkpoint {path!r}: {exc}") from exc
    cfg = config_from_json(_record_text(records.pop("config")))
    data = CheckpointData(
        config=cfg,
        epoch=int(records.pop("epoch")[0]),
        usage=records.pop("usage"),
        tracker_state=records.pop("tracker"),
        opt_step=int(records.pop("opt_step", [0.0])[0]),
    )
    for name, arr in records.items():
        kind, pname = name.split(":", 1)
        if kind == "p":
            data.params[pname] = arr
        elif kind == "om":
            data.opt_m[pname] = arr
        elif kind == "ov":
            data.opt_v[pname] = arr
        else:
            raise ValueError(f"unrecognized checkpoint record {name!r}")
    return data


def apply_to_bundle(data: CheckpointData, bundle):
    """Load saved arrays into a freshly built model of the same config."""
    named = dict(bundle.named_parameters())
    missing = set(named) - set(data.params)
    extra = set(data.params) - set(named)
    if missing or extra:
        raise ValueError(
            f"checkpoint/model mismatch: missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]}")
    for name, arr in data.params.items():
        p = named[name]
        if p.data.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{p.data.shape} vs {arr.shape}")
        p.data = arr.copy()
    bundle.usage = data.usage.copy()


def apply_to_optimizer(data: CheckpointData, optimizer: AdamW, bundle):
    by_id = {id(p): name for name, p in bundle.named_parameters()}
    optimizer.t = data.opt_step
    for i, p in enumerate(optimizer.params):
        name = by_id[id(p)]
        if name in data.opt_m:
            optimizer.m[i] = data.opt_m[name].copy()
            optimizer.v[i] = data.opt_v[name].copy()
