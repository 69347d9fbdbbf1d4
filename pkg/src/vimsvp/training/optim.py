"""AdamW with decoupled weight decay, cosine schedule and global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from vimsvp.errors import ContractError, DimensionError


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup to ``base_lr`` at ``warmup_steps``, then half-cosine decay to 0 at ``total_steps``."""
    if total_steps < 1:
        raise ContractError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps < 0 or warmup_steps > total_steps:
        raise ContractError("warmup_steps must lie in [0, total_steps]")
    if step < warmup_steps:
        # (step + 1) so the very first step already moves
        return base_lr * (step + 1) / (warmup_steps + 1)
    if total_steps == warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray


def adamw_update(param: np.ndarray, grad: np.ndarray, state: MomentState, step: int, lr: float,
                 weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-16) -> None:
    """In-place AdamW step number ``step`` (1-based) on ``param``.

    Weight decay is applied to the parameter before the moment step and does not
    enter the moments.  The update is lr * m_hat / sqrt(v_hat + eps).
    """
    if param.shape != grad.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise DimensionError(f"adamw_update: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    if step < 1:
        raise ContractError("adam step counter starts at 1")
    b1, b2 = betas
    if weight_decay:
        param -= lr * weight_decay * param
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * (grad * grad)
    m_hat = state.m / (1.0 - b1 ** step)
    v_hat = state.v / (1.0 - b2 ** step)
    param -= lr * m_hat / np.sqrt(v_hat + eps)


def global_grad_norm(params: dict) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(np.square(t.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_grad_norm(params: dict, max_norm: float | None) -> float:
    """Rescale grads so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


@dataclass
class AdamW:
    """Optimizer over a fixed dict of trainable tensors; moments exist only for those."""

    params: dict
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-16
    step_count: int = 0
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, t in self.params.items():
            if not t.requires_grad:
                raise ContractError(f"parameter {name!r} is frozen and cannot be optimized")
            if name not in self.state:
                self.state[name] = MomentState(np.zeros_like(t.data), np.zeros_like(t.data))

    def step(self, lr: float) -> None:
        self.step_count += 1
        for name, t in self.params.items():
            if t.grad is None:
                continue
            adamw_update(t.data, t.grad.astype(t.dtype, copy=False), self.state[name], self.step_count, lr,
                         self.weight_decay, self.betas, self.eps)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def moment_arrays(self) -> dict:
        """name -> (m, v) for checkpointing."""
        return {name: (s.m, s.v) for name, s in self.state.items()}

    def load_moments(self, moments: dict, step_count: int) -> None:
        for name in self.params:
            if name not in moments:
                raise ContractError(f"optimizer state missing for {name!r}")
            m, v = moments[name]
            if m.shape != self.params[name].shape:
                raise DimensionError(f"optimizer state for {name!r} has shape {m.shape}")
            self.state[name] = MomentState(np.array(m, dtype=self.params[name].dtype),
                                           np.array(v, dtype=self.params[name].dtype))
        self.step_count = int(step_count)

