"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from vimsvp.errors import ContractError
from vimsvp.numerics.tensor import Tape, Tensor, backward, no_grad


@dataclass
class ParamReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    params: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def failures(self) -> list:
        return [p for p in self.params if not p.passed]

    def summary(self) -> str:
        lines = [f"grad_check eps={self.eps:g} tol={self.tol:g}: {'PASS' if self.passed else 'FAIL'}"]
        for p in self.params:
            lines.append(f"  {p.name:<40s} rel={p.max_rel_error:.3e} abs={p.max_abs_error:.3e} n={p.checked}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|)``; zero where both are below ``floor``."""
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.abs(analytic - numeric) / np.maximum(denom, floor)
    return np.where(denom < floor, 0.0, rel)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-4,
    tol: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-10,
) -> GradCheckReport:
    """Compare analytic grads of the scalar ``f()`` against central differences.

    ``f`` must be deterministic and take no arguments; parameters are perturbed
    in place.  With ``max_entries`` only that many randomly chosen coordinates
    per parameter are probed (always including the largest-gradient one).
    Entries whose numeric and analytic gradients are both below ``floor`` count
    as agreeing.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    for t in params.values():
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    with Tape() as tape:
        loss = f()
        if loss.size != 1:
            raise ContractError(f"grad_check: f must return a scalar, got shape {loss.shape}")
        backward(loss, tape)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, eps=eps)
    for name, t in params.items():
        analytic = t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        if max_entries is None or max_entries >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
            idx[0] = int(np.argmax(np.abs(analytic)))
            idx = np.unique(idx)
        numeric = np.empty(idx.size)
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2.0 * eps)
        a = analytic[idx]
        rel = relative_error(a, numeric, floor)
        abs_err = float(np.abs(a - numeric).max()) if idx.size else 0.0
        worst = float(rel.max()) if idx.size else 0.0
        report.params.append(ParamReport(name, worst, abs_err, int(idx.size), worst <= tol))
    return report
