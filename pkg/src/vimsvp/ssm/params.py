"""Selective SSM weights, input-dependent parameters and discretization."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from vimsvp import numerics as nx
from vimsvp.errors import ContractError, DimensionError
from vimsvp.numerics import Tensor


@dataclass
class SsmLayerWeights:
    """Weights of one selective SSM over ``d`` channels with state size ``h``.

    ``A_log`` stores log(-A) so that A = -exp(A_log) is strictly negative.
    The step size uses a rank-``r`` bottleneck: Δ = softplus(x W_dt_down^T W_dt_up^T + dt_bias).
    """

    A_log: Tensor      # (h, d)
    D: Tensor          # (d,)
    W_B: Tensor        # (h, d)
    W_C: Tensor        # (h, d)
    W_dt_down: Tensor  # (r, d)
    W_dt_up: Tensor    # (d, r)
    dt_bias: Tensor    # (d,)

    @property
    def d(self) -> int:
        return self.A_log.shape[1]

    @property
    def h(self) -> int:
        return self.A_log.shape[0]

    @property
    def rank(self) -> int:
        return self.W_dt_down.shape[0]

    def A(self) -> Tensor:
        return nx.neg(nx.exp(self.A_log))

    def tensors(self) -> dict:
        return {
            "A_log": self.A_log, "D": self.D, "W_B": self.W_B, "W_C": self.W_C,
            "W_dt_down": self.W_dt_down, "W_dt_up": self.W_dt_up, "dt_bias": self.dt_bias,
        }

    def validate(self) -> None:
        h, d, r = self.h, self.d, self.rank
        expected = {
            "A_log": (h, d), "D": (d,), "W_B": (h, d), "W_C": (h, d),
            "W_dt_down": (r, d), "W_dt_up": (d, r), "dt_bias": (d,),
        }
        for key, shape in expected.items():
            got = getattr(self, key).shape
            if got != shape:
                raise DimensionError(f"SsmLayerWeights.{key}: expected {shape}, got {got}")


def ssm_weight_shapes(d: int, h: int, rank: int) -> dict:
    return {
        "A_log": (h, d), "D": (d,), "W_B": (h, d), "W_C": (h, d),
        "W_dt_down": (rank, d), "W_dt_up": (d, rank), "dt_bias": (d,),
    }


def init_ssm_arrays(d: int, h: int, rank: int, rng: np.random.Generator, dtype=np.float64,
                    dt_min: float = 1e-3, dt_max: float = 1e-1) -> dict:
    """Standard selective-SSM initialisation as plain arrays.

    A_log rows are log(1..h) repeated over channels; softplus(dt_bias) is
    log-uniform in [dt_min, dt_max]; D starts at one.
    """
    a_log = np.log(np.repeat(np.arange(1, h + 1, dtype=np.float64)[:, None], d, axis=1))
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=d))
    dt_bias = dt + np.log(-np.expm1(-dt))  # inverse softplus
    in_scale = d ** -0.5
    up_scale = rank ** -0.5
    arrays = {
        "A_log": a_log,
        "D": np.ones(d),
        "W_B": rng.uniform(-in_scale, in_scale, size=(h, d)),
        "W_C": rng.uniform(-in_scale, in_scale, size=(h, d)),
        "W_dt_down": rng.uniform(-in_scale, in_scale, size=(rank, d)),
        "W_dt_up": rng.uniform(-up_scale, up_scale, size=(d, rank)),
        "dt_bias": dt_bias,
    }
    return {k: v.astype(dtype) for k, v in arrays.items()}


def init_ssm_weights(d: int, h: int, rank: int, rng: np.random.Generator, dtype=np.float64,
                     requires_grad: bool = True) -> SsmLayerWeights:
    arrays = init_ssm_arrays(d, h, rank, rng, dtype)
    return SsmLayerWeights(**{k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()})


@dataclass
class SelectiveParams:
    """Per-token B (L, h), C (L, h) and Δ (L, d); leading batch axes allowed."""

    B: Tensor
    C: Tensor
    delta: Tensor

    def __post_init__(self):
        if not (self.B.shape[:-1] == self.C.shape[:-1] == self.delta.shape[:-1]):
            raise DimensionError(
                f"SelectiveParams: mismatched token axes B{self.B.shape} C{self.C.shape} delta{self.delta.shape}"
            )


def compute_selective_params(x: Tensor, w: SsmLayerWeights) -> SelectiveParams:
    """B = x W_B^T, C = x W_C^T, Δ = softplus(low-rank(x) + bias), row by row."""
    x = nx.as_tensor(x)
    if x.shape[-1] != w.d:
        raise DimensionError(f"compute_selective_params: input width {x.shape[-1]} vs {w.d} channels")
    B = nx.linear(x, w.W_B)
    C = nx.linear(x, w.W_C)
    delta = nx.softplus(nx.linear(nx.linear(x, w.W_dt_down), w.W_dt_up, w.dt_bias))
    return SelectiveParams(B=B, C=C, delta=delta)


class Discretized(NamedTuple):
    """Discrete transition for one token.

    ``A_bar`` = exp(Δ ⊙̃ A) is the exact zero-order-hold decay; the input
    contribution uses the first-order rule B̄x ≈ B (Δ ⊙ x).
    """

    A_bar: np.ndarray  # (h, d)
    B: np.ndarray      # (h,)
    delta: np.ndarray  # (d,)

    def input_term(self, x_i: np.ndarray) -> np.ndarray:
        return self.B[:, None] * (self.delta * x_i)[None, :]

    @property
    def B_bar(self) -> np.ndarray:
        return self.B[:, None] * self.delta[None, :]


def discretize(delta_i, A, B_i) -> Discretized:
    delta_i = np.asarray(getattr(delta_i, "data", delta_i)).reshape(-1)
    A = np.asarray(getattr(A, "data", A))
    B_i = np.asarray(getattr(B_i, "data", B_i)).reshape(-1)
    if A.shape != (B_i.size, delta_i.size):
        raise DimensionError(f"discretize: A {A.shape} vs B {B_i.shape} and delta {delta_i.shape}")
    if not (delta_i > 0).all():
        raise ContractError("discretize: step sizes must be strictly positive")
    return Discretized(np.exp(delta_i[None, :] * A), B_i, delta_i)
