"""Named parameters with owner tags and freeze flags."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from vimsvp.errors import ContractError
from vimsvp.numerics import Tensor

TAGS = ("backbone", "svp", "head", "prompt")
FILTERS = ("all", "trainable", "frozen") + TAGS


@dataclass
class ParamEntry:
    name: str
    shape: tuple
    tag: str
    frozen: bool = False
    tensor: Tensor | None = None

    @property
    def size(self) -> int:
        return int(math.prod(self.shape))


class ParameterRegistry:
    """Ordered name -> parameter map.

    Entries may be shape-only (``tensor is None``) so that parameter accounting
    works for configurations too large to allocate.
    """

    def __init__(self, entries: Iterable[ParamEntry] = ()):
        self._entries: dict[str, ParamEntry] = {}
        for e in entries:
            self._insert(e)

    def _insert(self, entry: ParamEntry) -> None:
        if entry.tag not in TAGS:
            raise ContractError(f"unknown parameter tag {entry.tag!r}; expected one of {TAGS}")
        if entry.name in self._entries:
            raise ContractError(f"duplicate parameter name {entry.name!r}")
        self._entries[entry.name] = entry

    def add(self, name: str, shape, tag: str, tensor: Tensor | None = None, frozen: bool = False) -> ParamEntry:
        shape = tuple(int(s) for s in shape)
        if tensor is not None:
            if tensor.shape != shape:
                raise ContractError(f"{name}: tensor shape {tensor.shape} != declared {shape}")
            tensor.requires_grad = not frozen
            tensor.name = name
        entry = ParamEntry(name, shape, tag, frozen, tensor)
        self._insert(entry)
        return entry

    def replace(self, name: str, tensor: Tensor) -> None:
        """Swap in a new tensor (possibly a new shape) keeping tag and freeze flag."""
        e = self.entry(name)
        e.shape = tuple(tensor.shape)
        e.tensor = tensor
        tensor.name = name
        tensor.requires_grad = not e.frozen

    def entry(self, name: str) -> ParamEntry:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __getitem__(self, name: str) -> Tensor:
        t = self.entry(name).tensor
        if t is None:
            raise ContractError(f"parameter {name!r} is shape-only (not allocated)")
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list:
        return list(self._entries)

    def entries(self, tag: str | None = None) -> list:
        return [e for e in self._entries.values() if tag is None or e.tag == tag]

    def set_frozen(self, name: str, frozen: bool) -> None:
        e = self.entry(name)
        e.frozen = bool(frozen)
        if e.tensor is not None:
            e.tensor.requires_grad = not e.frozen
            if e.frozen:
                e.tensor.grad = None

    def trainable(self) -> dict:
        return {e.name: e.tensor for e in self._entries.values() if not e.frozen and e.tensor is not None}

    def tensors(self) -> dict:
        return {e.name: e.tensor for e in self._entries.values() if e.tensor is not None}

    def zero_grad(self) -> None:
        for e in self._entries.values():
            if e.tensor is not None:
                e.tensor.grad = None if e.frozen else np.zeros_like(e.tensor.data)

    @staticmethod
    def union(*registries: "ParameterRegistry | None") -> "ParameterRegistry":
        """A registry sharing the entries (and so the freeze flags) of its inputs."""
        out = ParameterRegistry()
        for reg in registries:
            if reg is None:
                continue
            for e in reg:
                out._insert(e)
        return out


def count_parameters(registry: ParameterRegistry, filter: str = "all") -> int:  # noqa: A002
    """Exact scalar count over entries matching ``filter`` (all, trainable, frozen or a tag)."""
    if filter not in FILTERS:
        raise ContractError(f"unknown count filter {filter!r}; expected one of {FILTERS}")
    if filter == "all":
        chosen = list(registry)
    elif filter == "trainable":
        chosen = [e for e in registry if not e.frozen]
    elif filter == "frozen":
        chosen = [e for e in registry if e.frozen]
    else:
        chosen = registry.entries(filter)
    return sum(e.size for e in chosen)
