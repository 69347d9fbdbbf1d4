"""Differentiable batched selective scan (the op used by the model)."""

from __future__ import annotations

import numpy as np

from vimsvp.errors import ContractError, DimensionError
from vimsvp.numerics import Tensor, active_tape
from vimsvp.numerics.tensor import make_result
from vimsvp.ssm import kernels
from vimsvp.ssm.scan import GateTrace

_DUMMY = {}


def _dummy_states(dtype) -> np.ndarray:
    key = np.dtype(dtype).str
    if key not in _DUMMY:
        _DUMMY[key] = np.zeros((1, 1, 1, 1), dtype=dtype)
    return _DUMMY[key]


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor,
                   trace: list | None = None, layer: int = 0, direction: str = "fwd") -> Tensor:
    """y = scan over tokens of h_i = exp(Δ_i ⊙̃ A) ⊙ h_{i-1} + B_i(Δ_i ⊙ u_i), plus D ⊙ u.

    ``u`` and ``delta`` are (Bt, L, d); ``B`` and ``C`` are (Bt, L, h); ``A`` is
    (h, d); ``D`` is (d,).  When ``trace`` is a list, one :class:`GateTrace`
    per batch element is appended to it.
    """
    if u.ndim != 3:
        raise DimensionError(f"selective_scan expects (batch, L, d) input, got {u.shape}")
    n_batch, L, d = u.shape
    h = A.shape[0]
    if (delta.shape != u.shape or A.shape != (h, d) or B.shape != (n_batch, L, h)
            or C.shape != (n_batch, L, h) or D.shape != (d,)):
        raise DimensionError(
            f"selective_scan shapes: u{u.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape} D{D.shape}"
        )
    dtype = u.dtype
    ud = np.ascontiguousarray(u.data)
    dd = np.ascontiguousarray(delta.data)
    if not (dd > 0).all():
        raise ContractError("selective_scan: step sizes must be strictly positive")
    Ad = np.ascontiguousarray(A.data)
    Bd = np.ascontiguousarray(B.data)
    Cd = np.ascontiguousarray(C.data)
    Dd = np.ascontiguousarray(D.data)
    decay = dd[:, :, None, :] * Ad[None, None]
    np.exp(decay, out=decay)

    inputs = (u, delta, A, B, C, D)
    need_grad = active_tape() is not None and any(t.requires_grad for t in inputs)
    states = np.empty((n_batch, L, h, d), dtype=dtype) if need_grad else _dummy_states(dtype)
    y = kernels.scan_forward(ud, dd, decay, Bd, Cd, Dd, need_grad, states)

    if trace is not None:
        b_norm = np.sqrt((Bd * Bd).sum(axis=-1))  # (Bt, L)
        update = np.abs(dd * ud) * b_norm[:, :, None]
        for b in range(n_batch):
            trace.append(GateTrace(decay[b].copy(), update[b].copy(), layer, direction))

    def bw(g):
        gu, gdelta, gA, gB, gC, gD = kernels.scan_backward(
            np.ascontiguousarray(g), ud, dd, decay, Bd, Cd, Dd, Ad, states)
        return gu, gdelta, gA, gB, gC, gD

    return make_result("selective_scan", y, inputs, bw)
