"""Compiled forward/backward loops of the batched selective scan.

The decay factors ``a = exp(Δ ⊙̃ A)`` are computed by numpy beforehand (its
vectorised exp is much faster than a scalar one); the kernels only run the
recurrence and its adjoint.  Shapes: u, delta (Bt, L, d); a, states
(Bt, L, h, d); Bm, C (Bt, L, h); D (d,); A (h, d).
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def scan_forward(u, delta, a, Bm, C, D, store, states):
    n_batch, L, d = u.shape
    h = a.shape[2]
    y = np.empty_like(u)
    state = np.zeros((h, d), dtype=u.dtype)
    du = np.empty(d, dtype=u.dtype)
    for b in range(n_batch):
        state[:, :] = 0.0
        for i in range(L):
            for c in range(d):
                du[c] = delta[b, i, c] * u[b, i, c]
                y[b, i, c] = 0.0
            for n in range(h):
                bn = Bm[b, i, n]
                cn = C[b, i, n]
                for c in range(d):
                    s = a[b, i, n, c] * state[n, c] + bn * du[c]
                    state[n, c] = s
                    y[b, i, c] += cn * s
                if store:
                    for c in range(d):
                        states[b, i, n, c] = state[n, c]
            for c in range(d):
                y[b, i, c] += D[c] * u[b, i, c]
    return y


@njit(cache=True, fastmath=True)
def scan_backward(gy, u, delta, a, Bm, C, D, A, states):
    n_batch, L, d = u.shape
    h = a.shape[2]
    gu = np.empty_like(u)
    gdelta = np.empty_like(u)
    gB = np.zeros_like(Bm)
    gC = np.zeros_like(C)
    gA = np.zeros_like(A)
    gD = np.zeros_like(D)
    lam = np.zeros((h, d), dtype=u.dtype)
    du = np.empty(d, dtype=u.dtype)
    gdu = np.empty(d, dtype=u.dtype)
    gd_acc = np.empty(d, dtype=u.dtype)
    for b in range(n_batch):
        lam[:, :] = 0.0
        for i in range(L - 1, -1, -1):
            for c in range(d):
                du[c] = delta[b, i, c] * u[b, i, c]
                gdu[c] = 0.0
                gd_acc[c] = 0.0
            if i + 1 < L:
                # carry the adjoint back through the decay applied at step i + 1
                for n in range(h):
                    for c in range(d):
                        lam[n, c] *= a[b, i + 1, n, c]
            for n in range(h):
                cn = C[b, i, n]
                bn = Bm[b, i, n]
                acc_c = 0.0
                acc_b = 0.0
                for c in range(d):
                    g = gy[b, i, c]
                    lv = lam[n, c] + cn * g
                    lam[n, c] = lv
                    acc_c += g * states[b, i, n, c]
                    acc_b += lv * du[c]
                    gdu[c] += lv * bn
                gC[b, i, n] = acc_c
                gB[b, i, n] = acc_b
                if i > 0:
                    # d(loss)/d(log a) for the decay applied at step i
                    for c in range(d):
                        gl = lam[n, c] * states[b, i - 1, n, c] * a[b, i, n, c]
                        gd_acc[c] += gl * A[n, c]
                        gA[n, c] += gl * delta[b, i, c]
            for c in range(d):
                g = gy[b, i, c]
                gu[b, i, c] = gdu[c] * delta[b, i, c] + g * D[c]
                gdelta[b, i, c] = gdu[c] * u[b, i, c] + gd_acc[c]
                gD[c] += g * u[b, i, c]
    return gu, gdelta, gA, gB, gC, gD
