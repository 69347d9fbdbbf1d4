"""Tensor type, the define-by-run tape, and reverse-mode backward.

Operations record themselves on the active :class:`Tape` only when at least one
input requires a gradient.  Outside a tape context every operation is a plain
numpy computation, which is what evaluation loops use.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from vimsvp.errors import ContractError, DimensionError, NonFiniteError

_DTYPES = {"f32": np.float32, "f64": np.float64}

_state = threading.local()


def _default_dtype():
    return getattr(_state, "dtype", np.float64)


def get_dtype():
    """The dtype new tensors are created with (float64 unless changed)."""
    return _default_dtype()


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the default dtype: ``"f64"`` (tests) or ``"f32"`` (training)."""
    if mode not in _DTYPES:
        raise ContractError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    prev = _default_dtype()
    _state.dtype = _DTYPES[mode]
    try:
        yield
    finally:
        _state.dtype = prev


def set_precision(mode: str) -> None:
    if mode not in _DTYPES:
        raise ContractError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    _state.dtype = _DTYPES[mode]


def dtype_for(mode: str):
    try:
        return _DTYPES[mode]
    except KeyError:
        raise ContractError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}") from None


def set_finite_checks(enabled: bool) -> None:
    """Toggle the post-operation NaN/Inf check (on by default)."""
    _state.check_finite = bool(enabled)


def finite_checks_enabled() -> bool:
    return getattr(_state, "check_finite", True)


class Tensor:
    """Dense n-dimensional array that can take part in the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # Operator sugar; the implementations live in ``ops``.
    def __add__(self, other):
        from vimsvp.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from vimsvp.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from vimsvp.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from vimsvp.numerics import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from vimsvp.numerics import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from vimsvp.numerics import ops
        return ops.matmul(self, other)

    def sum(self, axis=None):
        from vimsvp.numerics import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from vimsvp.numerics import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from vimsvp.numerics import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


@dataclass
class Node:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the operations of one forward pass."""

    nodes: list = field(default_factory=list)
    _produced: set = field(default_factory=set, repr=False)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if isinstance(t, Tensor) and t.requires_grad and not self.produced(t):
                    seen.setdefault(id(t), t)
        return list(seen.values())


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, e.g. for finite-difference probes inside a tape context."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def check_finite(name: str, arr: np.ndarray) -> None:
    if finite_checks_enabled() and not np.isfinite(arr).all():
        bad = int(arr.size - np.isfinite(arr).sum())
        raise NonFiniteError(f"operation {name!r} produced {bad} non-finite value(s) in an output of shape {arr.shape}")


def make_result(name: str, data: np.ndarray, inputs: Sequence, backward: Callable) -> Tensor:
    """Wrap an op's output and record it on the tape when a gradient is needed.

    ``backward(g)`` receives the output gradient and returns one gradient (or
    None) per entry of ``inputs``; entries that do not require grad may be None.
    """
    check_finite(name, data)
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(name, tuple(inputs), out, backward))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every requires-grad leaf on the tape.

    Gradients accumulate into existing ``.grad`` buffers; leaves on the tape
    that the loss does not reach receive zeros.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None or not tape.produced(loss):
        # constant loss: nothing on the tape depends on a parameter
        return

    for leaf in tape.leaves():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise DimensionError(
                    f"backward of {node.name!r} returned grad of shape {gi.shape} for input of shape {t.shape}"
                )
            if tape.produced(t):
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            else:
                t.grad += gi
