"""Selective visual prompting: token-wise cross/inner prompt generators.

At every layer j the input tokens x are replaced by

    x^p = x + alpha_j * G^C_{g(j)}(x) + beta_j * SiLU(up_j(down_j(x)))

where G^C is one affine map shared by a contiguous group of layers, the inner
generator is per layer, and alpha/beta start at zero so an untrained module is
an exact no-op.  The class token is left untouched.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from vimsvp import numerics as nx
from vimsvp.errors import ContractError, DimensionError
from vimsvp.numerics import Tensor
from vimsvp.vim.model import trunc_normal
from vimsvp.vim.registry import ParameterRegistry


@dataclass
class SvpConfig:
    hidden_dim: int = 64
    share_group: int = 8
    enabled: bool = True

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ContractError("svp hidden_dim must be >= 1")
        if self.share_group < 1:
            raise ContractError("svp share_group must be >= 1")


def assign_layer_groups(n_layers: int, group_size: int) -> list:
    """Contiguous groups of layer indices starting at layer 0; the last may be short."""
    if group_size < 1:
        raise ContractError("group_size must be >= 1")
    if group_size > n_layers:
        warnings.warn(f"share group size {group_size} exceeds {n_layers} layers; using a single group",
                      stacklevel=2)
        group_size = n_layers
    return [list(range(s, min(s + group_size, n_layers))) for s in range(0, n_layers, group_size)]


@dataclass
class CrossPrompter:
    weight: Tensor  # (d, d)
    bias: Tensor    # (d,)
    layers: list = field(default_factory=list)


@dataclass
class InnerPrompter:
    down_weight: Tensor  # (r, d)
    down_bias: Tensor    # (r,)
    up_weight: Tensor    # (d, r)
    up_bias: Tensor      # (d,)

    @property
    def hidden_dim(self) -> int:
        return self.down_weight.shape[0]


@dataclass
class ScalingFactors:
    alpha: Tensor  # (d,)
    beta: Tensor   # (d,)


def cross_prompt(x: Tensor, g: CrossPrompter) -> Tensor:
    """Per-token affine prompt x W^T + b."""
    return nx.linear(x, g.weight, g.bias)


def inner_prompt(x: Tensor, g: InnerPrompter) -> Tensor:
    """Per-token bottleneck prompt SiLU(up(down(x)))."""
    return nx.silu(nx.linear(nx.linear(x, g.down_weight, g.down_bias), g.up_weight, g.up_bias))


def combine_and_overlay(x: Tensor, p_c: Tensor, p_i: Tensor, s: ScalingFactors,
                        exclude_index: int | None = None) -> Tensor:
    """x + alpha * p_c + beta * p_i, with alpha/beta broadcast over tokens.

    ``exclude_index`` names a token row (the class token) that keeps its value.
    """
    if not (x.shape == p_c.shape == p_i.shape):
        raise DimensionError(f"combine_and_overlay: x{x.shape} p_c{p_c.shape} p_i{p_i.shape}")
    prompt = nx.add(nx.mul(p_c, s.alpha), nx.mul(p_i, s.beta))
    if exclude_index is not None:
        L = x.shape[-2]
        keep = np.ones((L, 1), dtype=x.dtype)
        keep[exclude_index] = 0.0
        prompt = nx.mul(prompt, keep)
    return nx.add(x, prompt)


def svp_param_shapes(d: int, n_layers: int, cfg: SvpConfig) -> list:
    r = cfg.hidden_dim
    groups = assign_layer_groups(n_layers, min(cfg.share_group, n_layers))
    specs = []
    for g in range(len(groups)):
        specs += [(f"svp.cross.{g}.weight", (d, d)), (f"svp.cross.{g}.bias", (d,))]
    for j in range(n_layers):
        specs += [
            (f"svp.inner.{j}.down.weight", (r, d)), (f"svp.inner.{j}.down.bias", (r,)),
            (f"svp.inner.{j}.up.weight", (d, r)), (f"svp.inner.{j}.up.bias", (d,)),
            (f"svp.scale.{j}.alpha", (d,)), (f"svp.scale.{j}.beta", (d,)),
        ]
    return specs


def svp_parameter_count(d: int, n_layers: int, hidden_dim: int, share_group: int) -> int:
    """N(2dr + r + d) + ceil(N/g)(d^2 + d) + 2dN."""
    groups = math.ceil(n_layers / min(share_group, n_layers))
    return (n_layers * (2 * d * hidden_dim + hidden_dim + d)
            + groups * (d * d + d) + 2 * d * n_layers)


class SvpModule:
    """The trainable prompting parameters for an ``n_layers``-deep backbone of width ``d``."""

    def __init__(self, d: int, n_layers: int, config: SvpConfig | None = None, seed: int = 0,
                 dtype=np.float64, allocate: bool = True):
        self.config = config if config is not None else SvpConfig()
        self.d = d
        self.n_layers = n_layers
        self.dtype = np.dtype(dtype)
        self.groups = assign_layer_groups(n_layers, self.config.share_group)
        self.group_of = [gi for gi, layers in enumerate(self.groups) for _ in layers]
        self.registry = ParameterRegistry()
        rng = np.random.default_rng(seed)
        for name, shape in svp_param_shapes(d, n_layers, self.config):
            tensor = None
            if allocate:
                if name.endswith(".weight"):
                    arr = trunc_normal(rng, shape)
                else:
                    arr = np.zeros(shape)
                tensor = Tensor(arr.astype(self.dtype))
            self.registry.add(name, shape, "svp", tensor)

    @classmethod
    def for_model(cls, model, config: SvpConfig | None = None, seed: int = 0) -> "SvpModule":
        return cls(model.config.d_model, model.config.n_layers, config, seed, model.dtype)

    def cross(self, j: int) -> CrossPrompter:
        g = self.group_of[j]
        return CrossPrompter(self.registry[f"svp.cross.{g}.weight"], self.registry[f"svp.cross.{g}.bias"],
                             self.groups[g])

    def inner(self, j: int) -> InnerPrompter:
        p = f"svp.inner.{j}."
        reg = self.registry
        return InnerPrompter(reg[p + "down.weight"], reg[p + "down.bias"], reg[p + "up.weight"], reg[p + "up.bias"])

    def scales(self, j: int) -> ScalingFactors:
        return ScalingFactors(self.registry[f"svp.scale.{j}.alpha"], self.registry[f"svp.scale.{j}.beta"])

    def overlay(self, j: int, x: Tensor, cls_index: int | None) -> Tensor:
        """Prompted layer-j input; the class-token row is passed through unchanged."""
        if not self.config.enabled:
            return x
        return combine_and_overlay(x, cross_prompt(x, self.cross(j)), inner_prompt(x, self.inner(j)),
                                   self.scales(j), exclude_index=cls_index)

    def astype(self, dtype) -> "SvpModule":
        out = SvpModule(self.d, self.n_layers, self.config, dtype=dtype, allocate=False)
        for e in self.registry:
            out.registry.replace(e.name, Tensor(e.tensor.data.astype(dtype)))
            out.registry.set_frozen(e.name, e.frozen)
        return out
