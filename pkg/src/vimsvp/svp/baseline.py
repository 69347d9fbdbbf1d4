"""Appended prompt tokens (the sequence-insertion baselines)."""

from __future__ import annotations

import numpy as np

from vimsvp import numerics as nx
from vimsvp.errors import ContractError, DimensionError
from vimsvp.numerics import Tensor
from vimsvp.vim.model import trunc_normal
from vimsvp.vim.registry import ParameterRegistry

POSITIONS = ("pre", "post", "both", "uniform", "middle")


def insertion_points(L: int, m: int, position: str) -> list:
    """For each prompt, the original-token index it is inserted before (L = at the end)."""
    if m < 1:
        raise ContractError("at least one prompt token is required")
    if position == "pre":
        return [0] * m
    if position == "post":
        return [L] * m
    if position == "both":
        front = (m + 1) // 2
        return [0] * front + [L] * (m - front)
    if position == "uniform":
        return [(k * L) // (m + 1) for k in range(1, m + 1)]
    if position == "middle":
        return [L // 2] * m
    raise ContractError(f"unknown prompt position {position!r}; expected one of {POSITIONS}")


def append_order(L: int, m: int, position: str) -> np.ndarray:
    """Row order over concat(tokens, prompts) realising ``position``.

    Entries < L refer to tokens, entries >= L to prompts.
    """
    points = insertion_points(L, m, position)
    order = []
    k = 0
    for t in range(L + 1):
        while k < m and points[k] == t:
            order.append(L + k)
            k += 1
        if t < L:
            order.append(t)
    return np.asarray(order, dtype=np.int64)


def baseline_append_prompts(tokens: Tensor, prompts: Tensor, position: str,
                            cls_index: int | None = None) -> tuple[Tensor, int | None]:
    """Insert ``prompts`` (m, d) into the token sequence (B, L, d) or (L, d).

    Returns the extended sequence and the class token's new index.
    """
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = nx.reshape(tokens, (1,) + tokens.shape)
    n_batch, L, d = tokens.shape
    if prompts.ndim != 2 or prompts.shape[1] != d:
        raise DimensionError(f"prompts must be (m, {d}), got {prompts.shape}")
    m = prompts.shape[0]
    order = append_order(L, m, position)
    joined = nx.concat([tokens, nx.broadcast_batch(prompts, n_batch)], axis=1)
    out = nx.permute(joined, order, axis=1)
    new_cls = None if cls_index is None else int(np.flatnonzero(order == cls_index)[0])
    if squeeze:
        out = nx.reshape(out, out.shape[1:])
    return out, new_cls


class AppendedPrompts:
    """Freely learned prompt vectors inserted once, after the class token."""

    def __init__(self, d: int, num_prompts: int = 10, position: str = "pre", seed: int = 0,
                 dtype=np.float64, allocate: bool = True):
        if position not in POSITIONS:
            raise ContractError(f"unknown prompt position {position!r}; expected one of {POSITIONS}")
        if num_prompts < 1:
            raise ContractError("num_prompts must be >= 1")
        self.position = position
        self.num_prompts = num_prompts
        self.registry = ParameterRegistry()
        tensor = None
        if allocate:
            rng = np.random.default_rng(seed)
            tensor = Tensor(trunc_normal(rng, (num_prompts, d)).astype(dtype))
        self.registry.add("prompt.tokens", (num_prompts, d), "prompt", tensor)

    @property
    def tokens(self) -> Tensor:
        return self.registry["prompt.tokens"]

    def insert(self, seq: Tensor, cls_index: int) -> tuple[Tensor, int]:
        return baseline_append_prompts(seq, self.tokens, self.position, cls_index)
