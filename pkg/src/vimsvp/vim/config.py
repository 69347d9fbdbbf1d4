from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from vimsvp.errors import ContractError

CLS_POSITIONS = ("middle", "pre")


@dataclass
class VimConfig:
    """Backbone hyperparameters.  Defaults are the CPU-sized desk model."""

    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    d_model: int = 96
    n_layers: int = 8
    state_dim: int = 8
    conv_width: int = 4
    expand_factor: int = 2
    n_classes: int = 10
    dt_rank: int | None = None
    cls_position: str = "middle"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ContractError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.n_layers < 1:
            raise ContractError("n_layers must be >= 1")
        for key in ("channels", "d_model", "state_dim", "conv_width", "expand_factor", "n_classes"):
            if getattr(self, key) < 1:
                raise ContractError(f"{key} must be >= 1")
        if self.cls_position not in CLS_POSITIONS:
            raise ContractError(f"cls_position must be one of {CLS_POSITIONS}, got {self.cls_position!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid ** 2

    @property
    def d_inner(self) -> int:
        return self.expand_factor * self.d_model

    @property
    def rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else math.ceil(self.d_model / 16)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


def class_token_index(n_tokens: int, position: str = "middle") -> int:
    """Class-token slot in a sequence of ``n_tokens`` patch tokens plus one class token."""
    if position == "middle":
        return n_tokens // 2
    if position == "pre":
        return 0
    raise ContractError(f"unknown class-token position {position!r}")
