"""Run configuration: JSON in, validated dataclasses out.

Unknown keys are rejected with their dotted path, as are invariant violations
(`dims.K`, `lowlevel.p_sub_guidance`, ...). ConfigError maps to CLI exit 2.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

__all__ = [
    "ConfigError",
    "DimsConfig",
    "LossConfig",
    "ScheduleConfig",
    "PriorConfig",
    "LowLevelConfig",
    "TransferConfig",
    "SynthConfig",
    "RunConfig",
    "validate_config",
    "load_config",
    "config_to_dict",
    "config_digest",
]


class ConfigError(Exception):
    """Invalid run configuration (unknown key or violated invariant)."""


@dataclass
class DimsConfig:
    h_high: int = 128
    h_low: int = 64
    d_low: int = 32
    tokenizer_hidden: int = 64  # 0 means "use d_low"
    K: int = 16
    D: int = 32
    C: int = 2
    S: int = 16
    base_channels: int = 16


@dataclass
class LossConfig:
    beta: float = 0.4
    tau: float = 0.05
    alpha_low: float = 0.05
    alpha_high: float = 0.95


@dataclass
class ScheduleConfig:
    epochs: int = 150
    epochs_low: int = 30
    batch: int = 32
    bimixco_frac: float = 0.35
    max_lr: float = 0.003
    warmup_frac: float = 0.3
    weight_decay: float = 0.01
    dropout: float = 0.0


@dataclass
class PriorConfig:
    T: int = 50
    rho: float = 0.35
    layers: int = 2
    heads: int = 4
    mask_mode: str = "condition"
    schedule: str = "cosine"
    sample_n: int = 4


@dataclass
class LowLevelConfig:
    p_sub_guidance: float = 0.30
    p_sub_lowlevel: float = 0.25
    guidance: bool = True


@dataclass
class TransferConfig:
    adapter_epochs: int = 60
    finetune_epochs: int = 30


@dataclass
class SynthConfig:
    n_subjects: int = 4
    latent_dim: int = 16
    voxels_per_subject: int = 200
    n_train: int = 500
    n_test: int = 200
    noise_sigma: float = 0.05


@dataclass
class RunConfig:
    dims: DimsConfig = field(default_factory=DimsConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    lowlevel: LowLevelConfig = field(default_factory=LowLevelConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0
    max_subjects: int = 16


_SECTIONS = frozenset(f.name for f in fields(RunConfig) if f.default_factory is not dataclasses.MISSING)


def _coerce(section, key: str, value, path: str):
    default = getattr(section, key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _fill_section(section, raw: dict, path: str):
    names = {f.name for f in fields(section)}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"unknown key {path}.{key}")
        setattr(section, key, _coerce(section, key, value, f"{path}.{key}"))


def validate_config(raw) -> RunConfig:
    """Parse a JSON object (or already-decoded dict) into a RunConfig."""
    if isinstance(raw, (str, bytes)):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a JSON object, got {type(raw).__name__}")
    cfg = RunConfig()
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            _fill_section(getattr(cfg, key), value, key)
        elif key == "seed":
            cfg.seed = _coerce(cfg, "seed", value, "seed")
        elif key == "max_subjects":
            cfg.max_subjects = _coerce(cfg, "max_subjects", value, "max_subjects")
        else:
            raise ConfigError(f"unknown key {key}")
    _check(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return validate_config(text)


def _check(cfg: RunConfig) -> None:
    for name in ("h_high", "h_low", "d_low", "K", "D", "C", "S", "base_channels"):
        if getattr(cfg.dims, name) <= 0:
            raise ConfigError(f"dims.{name} must be positive")
    if cfg.dims.tokenizer_hidden < 0:
        raise ConfigError("dims.tokenizer_hidden must be >= 0 (0 selects d_low)")
    if cfg.loss.beta < 0:
        raise ConfigError("loss.beta must be >= 0")
    if cfg.loss.tau <= 0:
        raise ConfigError("loss.tau must be positive")
    if not 0 < cfg.loss.alpha_low < cfg.loss.alpha_high < 1:
        raise ConfigError("loss.alpha_low/alpha_high must satisfy 0 < low < high < 1")
    for name in ("epochs", "epochs_low", "batch"):
        if getattr(cfg.schedule, name) < 1:
            raise ConfigError(f"schedule.{name} must be >= 1")
    if not 0 < cfg.schedule.bimixco_frac < 1:
        raise ConfigError("schedule.bimixco_frac must lie in (0, 1)")
    if cfg.schedule.max_lr <= 0:
        raise ConfigError("schedule.max_lr must be positive")
    if not 0 <= cfg.schedule.warmup_frac < 1:
        raise ConfigError("schedule.warmup_frac must lie in [0, 1)")
    if cfg.schedule.weight_decay < 0:
        raise ConfigError("schedule.weight_decay must be >= 0")
    if not 0 <= cfg.schedule.dropout < 1:
        raise ConfigError("schedule.dropout must lie in [0, 1)")
    if cfg.prior.T < 2:
        raise ConfigError("prior.T must be >= 2")
    if not 0 < cfg.prior.rho <= 1:
        raise ConfigError("prior.rho must lie in (0, 1]")
    if cfg.prior.layers < 1:
        raise ConfigError("prior.layers must be >= 1")
    if cfg.prior.heads < 1 or cfg.dims.D % cfg.prior.heads != 0:
        raise ConfigError("prior.heads must divide dims.D")
    if cfg.prior.mask_mode not in ("condition", "loss"):
        raise ConfigError("prior.mask_mode must be 'condition' or 'loss'")
    if cfg.prior.schedule not in ("linear", "cosine"):
        raise ConfigError("prior.schedule must be 'linear' or 'cosine'")
    if cfg.prior.sample_n < 1:
        raise ConfigError("prior.sample_n must be >= 1")
    p_g, p_l = cfg.lowlevel.p_sub_guidance, cfg.lowlevel.p_sub_lowlevel
    if p_g < 0 or p_l < 0:
        raise ConfigError("lowlevel substitution probabilities must be >= 0")
    if p_g + p_l > 1:
        raise ConfigError(
            f"lowlevel.p_sub_guidance + lowlevel.p_sub_lowlevel must not exceed 1 (got {p_g + p_l})"
        )
    for name in ("adapter_epochs", "finetune_epochs"):
        if getattr(cfg.transfer, name) < 1:
            raise ConfigError(f"transfer.{name} must be >= 1")
    for name in ("n_subjects", "latent_dim", "voxels_per_subject", "n_train", "n_test"):
        if getattr(cfg.synth, name) < 1:
            raise ConfigError(f"synth.{name} must be >= 1")
    if cfg.synth.noise_sigma < 0:
        raise ConfigError("synth.noise_sigma must be >= 0")
    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")
    if cfg.max_subjects < 1:
        raise ConfigError("max_subjects must be >= 1")


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_digest(cfg: RunConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
