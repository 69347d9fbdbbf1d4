from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

from vimsvp.errors import ContractError

MODES = ("pretrain-backbone", "svp-adapt", "linear-probe", "full-finetune", "baseline-append")

DEFAULT_LR = {
    "pretrain-backbone": 1e-4,
    "full-finetune": 1e-4,
    "svp-adapt": 1e-3,
    "linear-probe": 1e-3,
    "baseline-append": 1e-3,
}


@dataclass
class TrainConfig:
    mode: str = "svp-adapt"
    epochs: int = 100
    batch_size: int = 32
    base_lr: float | None = None
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-16
    warmup_fraction: float = 0.05
    grad_clip: float | None = 1.0
    seed: int = 0
    precision: str = "f32"
    eval_every: int = 1
    eval_batch_size: int = 128

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.mode not in MODES:
            raise ContractError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ContractError("batch sizes must be >= 1")
        if self.base_lr is not None and self.base_lr <= 0:
            raise ContractError("base_lr must be > 0")
        if not 0 <= self.warmup_fraction < 1:
            raise ContractError("warmup_fraction must lie in [0, 1)")
        if self.precision not in ("f32", "f64"):
            raise ContractError("precision must be 'f32' or 'f64'")
        if self.eval_every < 1:
            raise ContractError("eval_every must be >= 1")

    @property
    def lr(self) -> float:
        return self.base_lr if self.base_lr is not None else DEFAULT_LR[self.mode]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def config_hash(config: dict) -> str:
    """Short stable digest of a JSON-serialisable config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
