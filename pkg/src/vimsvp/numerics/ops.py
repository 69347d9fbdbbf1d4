"""Differentiable array operations on :class:`Tensor`.

Broadcasting is deliberately narrow: one operand's shape must equal the result
shape, and the other must line up with it after left-padding with ones (row
vectors, column vectors, scalars).  Anything else is a :class:`DimensionError`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from vimsvp.errors import ContractError, DimensionError
from vimsvp.numerics.tensor import Tensor, make_result


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    for big, small in ((a, b), (b, a)):
        if len(small) > len(big):
            continue
        padded = (1,) * (len(big) - len(small)) + small
        if all(s == g or s == 1 for s, g in zip(padded, big)):
            return big
    raise DimensionError(f"{op}: shapes {a} and {b} are not broadcast-compatible (only row/column patterns allowed)")


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the inverse of a permitted broadcast)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make_result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return make_result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape, "mul")

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", a.data * b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; leading dimensions of ``a`` act as a batch."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    k, n = b.shape

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
        return ga, gb

    return make_result("matmul", a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out += bias.data
    n_in = weight.shape[1]
    n_out = weight.shape[0]

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.reshape(-1, n_out).T @ x.data.reshape(-1, n_in) if weight.requires_grad else None
        gb = g.reshape(-1, n_out).sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("linear", out, inputs, bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bw(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return make_result("silu", x.data * s, (x,), bw)


_SOFTPLUS_LINEAR = 30.0


def softplus(x: Tensor) -> Tensor:
    """``log(1 + e^x)``, switching to the identity above x = 30."""
    d = x.data
    out = np.where(d > _SOFTPLUS_LINEAR, d, np.log1p(np.exp(np.minimum(d, _SOFTPLUS_LINEAR))))

    def bw(g):
        return (g * _sigmoid(d),)

    return make_result("softplus", out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return make_result("exp", e, (x,), lambda g: (g * e,))


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {weight.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gxhat = g * weight.data
            gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                         - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return make_result("layer_norm", out, (x, weight, bias), bw)


def depthwise_conv1d(x: Tensor, kernel: Tensor, causal_pad: bool = True) -> Tensor:
    """Per-channel 1-D convolution along the token axis.

    ``x`` is (..., L, d) and ``kernel`` is (w, d); tap ``k`` multiplies the
    token ``k`` steps back, so ``out[t] = sum_k kernel[k] * x[t - k]``.  With
    ``causal_pad`` the sequence is left-padded with zeros and keeps length
    L; without it only fully covered positions are returned (length L-w+1).
    """
    if kernel.ndim != 2 or x.ndim < 2:
        raise DimensionError(f"depthwise_conv1d: bad ranks x{x.shape} kernel{kernel.shape}")
    w, d = kernel.shape
    if w < 1:
        raise ContractError("depthwise_conv1d: kernel width must be >= 1")
    if x.shape[-1] != d:
        raise DimensionError(f"depthwise_conv1d: {x.shape[-1]} input channels vs {d} kernel channels")
    L = x.shape[-2]
    kd = kernel.data
    if causal_pad:
        pad = [(0, 0)] * (x.ndim - 2) + [(w - 1, 0), (0, 0)]
        xp = np.pad(x.data, pad)
        L_out = L
    else:
        if L < w:
            raise DimensionError(f"depthwise_conv1d: sequence length {L} shorter than kernel width {w}")
        xp = x.data
        L_out = L - w + 1
    # xp[..., j, :] is the token at offset j - (w - 1) relative to output j (padded case)
    out = np.zeros(x.shape[:-2] + (L_out, d), dtype=x.dtype)
    for k in range(w):
        start = w - 1 - k
        out += kd[k] * xp[..., start:start + L_out, :]

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(w):
                start = w - 1 - k
                gxp[..., start:start + L_out, :] += kd[k] * g
            gx = gxp[..., w - 1:, :] if causal_pad else gxp
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            lead = tuple(range(g.ndim - 1))
            for k in range(w):
                start = w - 1 - k
                gk[k] = (g * xp[..., start:start + L_out, :]).sum(axis=lead)
        return gx, gk

    return make_result("depthwise_conv1d", out, (x, kernel), bw)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_loss: logits must be (B, K), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy_loss: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = int(labels[(labels < 0) | (labels >= k)][0])
        raise IndexError(f"cross_entropy_loss: label {bad} outside [0, {k})")
    logp = log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_result("cross_entropy_loss", np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_result("sum", np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_result("mean", np.asarray(x.data.mean(axis=axis)), (x,), bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flip(x: Tensor, axis: int) -> Tensor:
    return make_result("flip", np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis).copy(),))


def take(x: Tensor, index, axis: int) -> Tensor:
    """Gather entries along ``axis``; a scalar index drops the axis."""
    idx = np.asarray(index)
    out = np.take(x.data, idx, axis=axis)
    shape = x.shape
    ax = axis % x.ndim

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if idx.ndim == 0:
            sl = [slice(None)] * len(shape)
            sl[ax] = int(idx)
            gx[tuple(sl)] += g
        else:
            np.add.at(np.moveaxis(gx, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (gx,)

    return make_result("take", out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} along axis {axis}: {exc}") from None
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_result("concat", out, tuple(tensors), bw)


def broadcast_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat ``x`` along a new leading batch axis of size ``batch``."""
    out = np.broadcast_to(x.data, (batch,) + x.shape).copy()
    return make_result("broadcast_batch", out, (x,), lambda g: (g.sum(axis=0),))


def narrow(x: Tensor, start: int, length: int, axis: int) -> Tensor:
    """Contiguous slice ``[start, start + length)`` along ``axis``."""
    ax = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[ax]:
        raise DimensionError(f"narrow: [{start}, {start + length}) outside axis {ax} of size {x.shape[ax]}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, start + length)
    sl = tuple(sl)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[sl] = g
        return (gx,)

    return make_result("narrow", x.data[sl].copy(), (x,), bw)


def permute(x: Tensor, order, axis: int) -> Tensor:
    """Reorder entries along ``axis`` by the permutation ``order``."""
    order = np.asarray(order, dtype=np.int64)
    ax = axis % x.ndim
    if sorted(order.tolist()) != list(range(x.shape[ax])):
        raise ContractError(f"permute: order is not a permutation of range({x.shape[ax]})")
    inverse = np.argsort(order)
    return make_result("permute", np.take(x.data, order, axis=ax), (x,),
                       lambda g: (np.take(g, inverse, axis=ax),))
