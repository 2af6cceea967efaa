"""Run configuration: presets, key=value files, and JSON round-trips.

Two presets exist.  "desk" fits a laptop CPU (small chains, few epochs,
lr 1e-4); "paper" keeps the full-scale protocol (T = 500/2000/1000,
5000 epochs, lr 1e-6, batch 32) for hardware that can afford it.  Config
files are UTF-8 ``key=value`` lines; values are coerced to the field's
declared type, unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

_NONE_WORDS = {"none", "null", ""}
_TRUE_WORDS = {"true", "yes", "on", "1"}
_FALSE_WORDS = {"false", "no", "off", "0"}


@dataclass
class TrainConfig:
    seed: int = 0
    preset: str = "desk"

    # optimization
    base_lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 500
    warmup_gate_epochs: int = 100
    lr_period: int = 100
    lr_repeat: bool = True
    weight_decay: float = 1e-4

    # diffusion
    timesteps: tuple = (25, 100, 50)

    # gating
    gamma: float = 0.1
    usage_decay: float = 0.99
    var_decay: float = 0.99

    # codec
    commit_beta: float = 0.25
    scale_factor: float = 0.2
    code_dim: int = 16
    codebook_size: int = 64
    codec_base: int = 24
    codec_steps: int = 2000
    codec_lr: float = 1e-3

    # conditioner / experts
    embed_dim: int = 64
    patch_sizes: tuple = (16, 8, 4)
    window: int = 16
    heads: int = 4
    depth: int = 2
    cond_channels: int = 16
    expert_base: int = 32

    # data
    hr_size: int = 64
    lr_size: int = 32
    use_bias_field: bool = True
    use_warp_field: bool = True

    # inference
    top_k: int | None = None
    start_mode: str = "unit"
    per_step_mix: bool = False

    # bookkeeping
    ckpt_every: int = 100

    def validate(self) -> "TrainConfig":
        positive = ["base_lr", "batch_size", "epochs", "lr_period",
                    "codec_steps", "codec_lr", "embed_dim", "window",
                    "heads", "depth", "cond_channels", "expert_base",
                    "hr_size", "lr_size", "code_dim", "codebook_size",
                    "codec_base", "ckpt_every"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_gate_epochs < 0 or self.warmup_gate_epochs > self.epochs:
            raise ValueError("warmup_gate_epochs must lie in [0, epochs]")
        if len(self.timesteps) != 3 or any(t < 1 for t in self.timesteps):
            raise ValueError("timesteps needs three positive chain lengths")
        if self.start_mode not in ("unit", "matched"):
            raise ValueError(f"unknown start_mode {self.start_mode!r}")
        if self.top_k is not None and not (1 <= self.top_k <= 3):
            raise ValueError("top_k must be in 1..3")
        if self.hr_size % self.lr_size:
            raise ValueError("hr_size must be a multiple of lr_size")
        return self


def desk_config(**overrides) -> TrainConfig:
    return _apply(TrainConfig(), overrides).validate()


def paper_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(preset="paper", base_lr=1e-6, batch_size=32,
                      epochs=5000, warmup_gate_epochs=1000,
                      timesteps=(500, 2000, 1000))
    return _apply(cfg, overrides).validate()


_PRESETS = {"desk": desk_config, "paper": paper_config}


def _apply(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    names = {f.name for f in fields(cfg)}
    for key, val in overrides.items():
        if key not in names:
            raise KeyError(f"unknown config key {key!r}")
        setattr(cfg, key, val)
    return cfg


def _coerce(name: str, raw, current):
    """Cast a raw string (or JSON value) to the type of the preset value."""
    if isinstance(raw, str):
        raw = raw.strip()
    if name == "top_k":
        if raw is None or (isinstance(raw, str) and raw.lower() in _NONE_WORDS):
            return None
        return int(raw)
    if isinstance(current, bool):
        if isinstance(raw, bool):
            return raw
        low = str(raw).lower()
        if low in _TRUE_WORDS:
            return True
        if low in _FALSE_WORDS:
            return False
        raise ValueError(f"{name}: cannot read {raw!r} as a boolean")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        if isinstance(raw, (list, tuple)):
            return tuple(int(v) for v in raw)
        return tuple(int(p) for p in str(raw).split(",") if p.strip())
    return str(raw)


def parse_kv_file(path: str) -> dict[str, str]:
    """Read ``key=value`` lines; '#' starts a comment, blanks are skipped."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def load_config(path: str | None = None, preset: str = "desk",
                **extra) -> TrainConfig:
    """Build a config from a preset, an optional file, and overrides."""
    raw = parse_kv_file(path) if path else {}
    preset = raw.pop("preset", preset)
    if preset not in _PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    cfg = _PRESETS[preset]()
    defaults = vars(cfg)
    merged: dict = {}
    for key, val in {**raw, **extra}.items():
        if key not in defaults:
            raise KeyError(f"unknown config key {key!r}")
        merged[key] = _coerce(key, val, defaults[key])
    return _apply(cfg, merged).validate()


def config_to_json(cfg: TrainConfig) -> str:
    d = asdict(cfg)
    d["timesteps"] = list(d["timesteps"])
    d["patch_sizes"] = list(d["patch_sizes"])
    return json.dumps(d, sort_keys=True)


def config_from_json(text: str) -> TrainConfig:
    d = json.loads(text)
    cfg = TrainConfig()
    defaults = vars(cfg)
    vals = {k: _coerce(k, v, defaults[k]) for k, v in d.items()}
    return _apply(cfg, vals).validate()
