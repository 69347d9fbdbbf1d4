"""Reference and chunked selective scans over one token sequence.

Both run on plain arrays and exist as oracles and introspection tools; the
training path uses the fused tape op in :mod:`vimsvp.ssm.op`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vimsvp.errors import ContractError, DimensionError
from vimsvp.ssm.params import SelectiveParams, SsmLayerWeights, discretize


def _arr(t) -> np.ndarray:
    return np.asarray(getattr(t, "data", t))


@dataclass
class GateTrace:
    """Forget gates (L, h, d) and update-gate magnitudes (L, d) of one scan."""

    forget_gate: np.ndarray
    update_magnitude: np.ndarray
    layer: int = 0
    direction: str = "fwd"

    def __post_init__(self):
        if self.forget_gate.ndim != 3 or self.update_magnitude.ndim != 2:
            raise DimensionError(
                f"GateTrace: forget_gate must be (L, h, d) and update_magnitude (L, d), got "
                f"{self.forget_gate.shape} and {self.update_magnitude.shape}"
            )
        if self.forget_gate.shape[0] != self.update_magnitude.shape[0]:
            raise DimensionError("GateTrace: token axes disagree")

    @property
    def length(self) -> int:
        return self.update_magnitude.shape[0]

    def reversed(self) -> "GateTrace":
        """The same trace re-indexed in original token order (for backward scans)."""
        return GateTrace(self.forget_gate[::-1].copy(), self.update_magnitude[::-1].copy(),
                         self.layer, self.direction)


def _unpack(x, p: SelectiveParams, w: SsmLayerWeights):
    x = _arr(x)
    B, C, delta = _arr(p.B), _arr(p.C), _arr(p.delta)
    A = -np.exp(_arr(w.A_log))
    D = _arr(w.D)
    if x.ndim != 2:
        raise DimensionError(f"selective scan expects a single (L, d) sequence, got {x.shape}")
    L, d = x.shape
    h = A.shape[0]
    if A.shape != (h, d) or B.shape != (L, h) or C.shape != (L, h) or delta.shape != (L, d) or D.shape != (d,):
        raise DimensionError(
            f"selective scan shapes: x{x.shape} A{A.shape} B{B.shape} C{C.shape} delta{delta.shape} D{D.shape}"
        )
    return x, A, B, C, delta, D


def selective_scan_naive(x, p: SelectiveParams, w: SsmLayerWeights, layer: int = 0,
                         direction: str = "fwd") -> tuple[np.ndarray, GateTrace]:
    """Token-by-token recurrence from a zero state.

    h_i = exp(Δ_i ⊙̃ A) ⊙ h_{i-1} + B_i (Δ_i ⊙ x_i),  y_i = C_i h_i + D ⊙ x_i
    """
    x, A, B, C, delta, D = _unpack(x, p, w)
    L, d = x.shape
    h = A.shape[0]
    state = np.zeros((h, d), dtype=x.dtype)
    y = np.empty((L, d), dtype=x.dtype)
    forget = np.empty((L, h, d), dtype=x.dtype)
    update = np.empty((L, d), dtype=x.dtype)
    for i in range(L):
        step = discretize(delta[i], A, B[i])
        inject = step.input_term(x[i])
        state = step.A_bar * state + inject
        y[i] = (C[i][:, None] * state).sum(axis=0) + D * x[i]
        forget[i] = step.A_bar
        update[i] = np.sqrt((inject * inject).sum(axis=0))
    return y, GateTrace(forget, update, layer, direction)


def linear_recurrence_chunked(a: np.ndarray, b: np.ndarray, chunk_size: int) -> np.ndarray:
    """All states of h_t = a_t ⊙ h_{t-1} + b_t (h_{-1} = 0) along axis 0.

    Each chunk is scanned locally (vectorised across chunks), giving one affine
    map (A_c, b_c) per chunk; maps compose as (a2 ⊙ a1, a2 ⊙ b1 + b2) to carry
    the state across chunk boundaries.
    """
    if chunk_size < 1:
        raise ContractError("chunk_size must be >= 1")
    if a.shape != b.shape:
        raise DimensionError(f"linear recurrence: a{a.shape} vs b{b.shape}")
    L = a.shape[0]
    T = min(chunk_size, L)
    n_chunks = -(-L // T)
    pad = n_chunks * T - L
    if pad:
        widths = [(0, pad)] + [(0, 0)] * (a.ndim - 1)
        a = np.pad(a, widths, constant_values=1.0)
        b = np.pad(b, widths)
    rest = a.shape[1:]
    a = a.reshape((n_chunks, T) + rest)
    b = b.reshape((n_chunks, T) + rest)

    local = np.empty_like(b)
    decay = np.empty_like(a)
    local[:, 0] = b[:, 0]
    decay[:, 0] = a[:, 0]
    for t in range(1, T):
        local[:, t] = a[:, t] * local[:, t - 1] + b[:, t]
        decay[:, t] = a[:, t] * decay[:, t - 1]

    if n_chunks == 1:
        out = local
    else:
        carry_in = np.empty((n_chunks,) + rest, dtype=b.dtype)
        carry = np.zeros(rest, dtype=b.dtype)
        for c in range(n_chunks):
            carry_in[c] = carry
            carry = decay[c, -1] * carry + local[c, -1]
        out = local.copy()
        out[1:] = decay[1:] * carry_in[1:, None] + local[1:]
    return out.reshape((n_chunks * T,) + rest)[:L]


def selective_scan_chunked(x, p: SelectiveParams, w: SsmLayerWeights, chunk_size: int = 32) -> np.ndarray:
    """Same result as :func:`selective_scan_naive`, vectorised over chunks."""
    x, A, B, C, delta, D = _unpack(x, p, w)
    a = np.exp(delta[:, None, :] * A[None])
    b = B[:, :, None] * (delta * x)[:, None, :]
    states = linear_recurrence_chunked(a, b, chunk_size)
    return (C[:, :, None] * states).sum(axis=1) + D * x


def minmax_normalize(v: np.ndarray, axis=None) -> np.ndarray:
    """Scale to [0, 1]; a degenerate (constant) range maps to all zeros."""
    lo = v.min(axis=axis, keepdims=True)
    hi = v.max(axis=axis, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (v - lo) / safe, 0.0)


def extract_gates(trace: GateTrace, normalize: bool = True) -> np.ndarray:
    """Per-token mean update-gate magnitude over channels, optionally min-max scaled."""
    if trace is None or trace.length == 0:
        raise ContractError("extract_gates: empty trace")
    per_token = trace.update_magnitude.mean(axis=1)
    return minmax_normalize(per_token) if normalize else per_token
