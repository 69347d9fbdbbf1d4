"""Run configuration: JSON file plus command-line overrides, with strict keys."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from vimsvp.errors import ContractError
from vimsvp.svp import POSITIONS, SvpConfig
from vimsvp.training.config import TrainConfig, config_hash
from vimsvp.vim import VimConfig


class ConfigError(ContractError):
    """A configuration file or override is invalid."""


@dataclass
class DataConfig:
    source: str = "synthetic"          # synthetic | cifar10
    path: str | None = None            # cifar10 directory
    pretrain_train: int = 1000
    pretrain_val: int = 300
    adapt_train: int = 96
    adapt_val: int = 200
    noise: float = 0.05
    copies: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10"):
            raise ConfigError("data.source must be 'synthetic' or 'cifar10'")
        if self.source == "cifar10" and not self.path:
            raise ConfigError("data.path is required for the cifar10 source")


@dataclass
class BaselineConfig:
    mode: str = "none"
    num_prompts: int = 10

    def __post_init__(self):
        if self.mode != "none" and self.mode not in POSITIONS:
            raise ConfigError(f"baseline.mode must be 'none' or one of {POSITIONS}")
        if self.num_prompts < 1:
            raise ConfigError("baseline.num_prompts must be >= 1")


def _pretrain_default() -> TrainConfig:
    return TrainConfig(mode="pretrain-backbone", epochs=3, base_lr=2e-3, eval_every=100)


def _adapt_default() -> TrainConfig:
    return TrainConfig(mode="svp-adapt", epochs=100, eval_every=25)


SECTIONS = {
    "model": VimConfig,
    "svp": SvpConfig,
    "baseline": BaselineConfig,
    "data": DataConfig,
    "pretrain": TrainConfig,
    "train": TrainConfig,
}
TOP_LEVEL = ("seed", "precision", "deterministic")


@dataclass
class RunConfig:
    model: VimConfig = field(default_factory=VimConfig)
    svp: SvpConfig = field(default_factory=lambda: SvpConfig(hidden_dim=64, share_group=4))
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: TrainConfig = field(default_factory=_pretrain_default)
    train: TrainConfig = field(default_factory=_adapt_default)
    seed: int = 0
    precision: str = "f32"
    deterministic: bool = False

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = getattr(self, name)
            out[name] = section.to_dict() if hasattr(section, "to_dict") else _dc_dict(section)
        for key in TOP_LEVEL:
            out[key] = getattr(self, key)
        return out

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def write_resolved(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.resolved.json"
        path.write_text(json.dumps({**self.to_dict(), "config_hash": self.hash}, indent=2, sort_keys=True))
        return path


def _dc_dict(obj) -> dict:
    d = {f.name: getattr(obj, f.name) for f in fields(obj)}
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build_section(name: str, current, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    cls = SECTIONS[name]
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    merged = {**_dc_dict(current), **values}
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


def from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = copy.deepcopy(base) if base is not None else RunConfig()
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS) - set(TOP_LEVEL) - {"config_hash"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    for name in SECTIONS:
        if name in data:
            setattr(cfg, name, _build_section(name, getattr(cfg, name), data[name]))
    for key in TOP_LEVEL:
        if key in data:
            setattr(cfg, key, data[key])
    if cfg.precision not in ("f32", "f64"):
        raise ConfigError("precision must be 'f32' or 'f64'")
    return cfg


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        cfg = from_dict(data, cfg)
    if overrides:
        cfg = from_dict(overrides, cfg)
    return cfg
