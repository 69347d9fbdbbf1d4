"""Vision Mamba backbone: patch embedding, class token, bidirectional blocks, head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vimsvp import numerics as nx
from vimsvp.errors import ContractError, DimensionError
from vimsvp.numerics import Tensor
from vimsvp.ssm import SsmLayerWeights, compute_selective_params, init_ssm_arrays, selective_scan, ssm_weight_shapes
from vimsvp.vim.config import VimConfig, class_token_index
from vimsvp.vim.registry import ParameterRegistry

DIRECTIONS = ("fwd", "bwd")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def vim_param_shapes(cfg: VimConfig) -> list:
    """(name, shape, tag) for every backbone and head parameter, in registry order."""
    d, E, h, r, w = cfg.d_model, cfg.d_inner, cfg.state_dim, cfg.rank, cfg.conv_width
    specs = [
        ("patch_embed.weight", (d, cfg.patch_dim), "backbone"),
        ("patch_embed.bias", (d,), "backbone"),
        ("pos_embed", (cfg.n_tokens + 1, d), "backbone"),
        ("cls_token", (d,), "backbone"),
    ]
    for j in range(cfg.n_layers):
        p = f"layers.{j}."
        specs += [
            (p + "norm.weight", (d,), "backbone"),
            (p + "norm.bias", (d,), "backbone"),
            (p + "in_proj_x.weight", (E, d), "backbone"),
            (p + "in_proj_z.weight", (E, d), "backbone"),
            (p + "conv.weight", (w, E), "backbone"),
            (p + "conv.bias", (E,), "backbone"),
        ]
        for direction in DIRECTIONS:
            for key, shape in ssm_weight_shapes(E, h, r).items():
                specs.append((f"{p}{direction}.{key}", shape, "backbone"))
        specs.append((p + "out_proj.weight", (d, E), "backbone"))
    specs += [
        ("norm_f.weight", (d,), "backbone"),
        ("norm_f.bias", (d,), "backbone"),
        ("head.weight", (cfg.n_classes, d), "head"),
        ("head.bias", (cfg.n_classes,), "head"),
    ]
    return specs


def _init_arrays(cfg: VimConfig, rng: np.random.Generator) -> dict:
    d, E, h, r, w = cfg.d_model, cfg.d_inner, cfg.state_dim, cfg.rank, cfg.conv_width
    arrays = {}
    fan = cfg.patch_dim ** -0.5
    arrays["patch_embed.weight"] = rng.uniform(-fan, fan, size=(d, cfg.patch_dim))
    arrays["patch_embed.bias"] = rng.uniform(-fan, fan, size=d)
    arrays["pos_embed"] = trunc_normal(rng, (cfg.n_tokens + 1, d))
    arrays["cls_token"] = trunc_normal(rng, (d,))
    out_scale = E ** -0.5 / np.sqrt(cfg.n_layers)
    for j in range(cfg.n_layers):
        p = f"layers.{j}."
        arrays[p + "norm.weight"] = np.ones(d)
        arrays[p + "norm.bias"] = np.zeros(d)
        arrays[p + "in_proj_x.weight"] = rng.uniform(-d ** -0.5, d ** -0.5, size=(E, d))
        arrays[p + "in_proj_z.weight"] = rng.uniform(-d ** -0.5, d ** -0.5, size=(E, d))
        arrays[p + "conv.weight"] = rng.uniform(-w ** -0.5, w ** -0.5, size=(w, E))
        arrays[p + "conv.bias"] = rng.uniform(-w ** -0.5, w ** -0.5, size=E)
        for direction in DIRECTIONS:
            for key, arr in init_ssm_arrays(E, h, r, rng).items():
                arrays[f"{p}{direction}.{key}"] = arr
        arrays[p + "out_proj.weight"] = rng.uniform(-out_scale, out_scale, size=(d, E))
    arrays["norm_f.weight"] = np.ones(d)
    arrays["norm_f.bias"] = np.zeros(d)
    arrays["head.weight"] = trunc_normal(rng, (cfg.n_classes, d))
    arrays["head.bias"] = np.zeros(cfg.n_classes)
    return arrays


@dataclass
class BlockWeights:
    norm_weight: Tensor
    norm_bias: Tensor
    in_proj_x: Tensor
    in_proj_z: Tensor
    conv_weight: Tensor
    conv_bias: Tensor
    fwd: SsmLayerWeights
    bwd: SsmLayerWeights
    out_proj: Tensor


def _ssm_from(reg: ParameterRegistry, prefix: str) -> SsmLayerWeights:
    return SsmLayerWeights(**{k: reg[prefix + k] for k in
                              ("A_log", "D", "W_B", "W_C", "W_dt_down", "W_dt_up", "dt_bias")})


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n, p*p*C), patches in row-major grid order."""
    n_batch, H, W, C = images.shape
    p = patch_size
    x = images.reshape(n_batch, H // p, p, W // p, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n_batch, (H // p) * (W // p), p * p * C)


def _as_images(image, cfg: VimConfig, dtype) -> np.ndarray:
    arr = np.asarray(getattr(image, "data", image), dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise DimensionError(f"expected image(s) of shape {expected}, got {arr.shape}")
    return arr


def patch_embed(image, model: "VimModel") -> Tensor:
    """Tokens (B, n, d): linear projection of flattened patches plus positional rows."""
    cfg = model.config
    imgs = _as_images(image, cfg, model.dtype)
    patches = Tensor(patchify(imgs, cfg.patch_size))
    tokens = nx.linear(patches, model.registry["patch_embed.weight"], model.registry["patch_embed.bias"])
    ci = class_token_index(cfg.n_tokens, cfg.cls_position)
    pos = model.registry["pos_embed"]
    patch_rows = nx.concat([nx.narrow(pos, 0, ci, 0), nx.narrow(pos, ci + 1, cfg.n_tokens - ci, 0)], axis=0)
    return nx.add(tokens, patch_rows)


def insert_class_token(tokens: Tensor, cls: Tensor, position: str = "middle") -> tuple[Tensor, int]:
    """Insert ``cls`` (d,) into (B, n, d) tokens; returns the sequence and the class slot."""
    if tokens.ndim == 2:
        seq, ci = insert_class_token(nx.reshape(tokens, (1,) + tokens.shape), cls, position)
        return nx.reshape(seq, seq.shape[1:]), ci
    n_batch, n, d = tokens.shape
    if cls.size != d:
        raise DimensionError(f"class token width {cls.size} vs token width {d}")
    ci = class_token_index(n, position)
    cls_rows = nx.broadcast_batch(nx.reshape(cls, (1, d)), n_batch)
    parts = []
    if ci > 0:
        parts.append(nx.narrow(tokens, 0, ci, 1))
    parts.append(cls_rows)
    if ci < n:
        parts.append(nx.narrow(tokens, ci, n - ci, 1))
    return nx.concat(parts, axis=1), ci


def _ssm_branch(u_pre: Tensor, w: BlockWeights, ssm: SsmLayerWeights, reverse: bool,
                trace: list | None, layer: int) -> Tensor:
    if reverse:
        u_pre = nx.flip(u_pre, axis=1)
    u = nx.silu(nx.add(nx.depthwise_conv1d(u_pre, w.conv_weight), w.conv_bias))
    p = compute_selective_params(u, ssm)
    y = selective_scan(u, p.delta, ssm.A(), p.B, p.C, ssm.D, trace=trace, layer=layer,
                       direction="bwd" if reverse else "fwd")
    return nx.flip(y, axis=1) if reverse else y


def _block(x: Tensor, w: BlockWeights, directions, traces: dict | None, layer: int) -> Tensor:
    squeeze = x.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.shape)
    xn = nx.layer_norm(x, w.norm_weight, w.norm_bias)
    u_pre = nx.linear(xn, w.in_proj_x)
    z = nx.linear(xn, w.in_proj_z)
    y = None
    for direction in directions:
        tr = None
        if traces is not None:
            tr = traces.setdefault(direction, [])
        yb = _ssm_branch(u_pre, w, getattr(w, direction), direction == "bwd", tr, layer)
        y = yb if y is None else nx.add(y, yb)
    out = nx.add(nx.linear(nx.mul(y, nx.silu(z)), w.out_proj), x)
    return nx.reshape(out, out.shape[1:]) if squeeze else out


def mamba_block_forward(x: Tensor, weights: BlockWeights, direction: str = "fwd",
                        traces: dict | None = None, layer: int = 0) -> Tensor:
    """One unidirectional Mamba block with pre-norm residual.

    layer-norm -> (main, gate) projections -> main: causal depthwise conv, SiLU,
    selective scan; gate: SiLU -> product -> out-projection -> + input.  The
    ``bwd`` direction scans the reversed sequence and flips the result back.
    Gate traces are appended to ``traces[direction]`` when given.
    """
    if direction not in DIRECTIONS:
        raise ContractError(f"direction must be one of {DIRECTIONS}")
    return _block(x, weights, (direction,), traces, layer)


def bidirectional_combine(x: Tensor, weights: BlockWeights, traces: dict | None = None, layer: int = 0) -> Tensor:
    """One Vim layer: forward and backward scans over shared projections, summed before out-projection."""
    return _block(x, weights, DIRECTIONS, traces, layer)


class VimModel:
    """Parameters of the backbone and classifier head, plus the forward pass."""

    def __init__(self, config: VimConfig | None = None, seed: int = 0, dtype=np.float64,
                 registry: ParameterRegistry | None = None):
        self.config = config if config is not None else VimConfig()
        self.dtype = np.dtype(dtype)
        if registry is None:
            rng = np.random.default_rng(seed)
            arrays = _init_arrays(self.config, rng)
            registry = ParameterRegistry()
            for name, shape, tag in vim_param_shapes(self.config):
                registry.add(name, shape, tag, Tensor(arrays[name].astype(self.dtype)))
        self.registry = registry

    @staticmethod
    def shape_registry(config: VimConfig) -> ParameterRegistry:
        reg = ParameterRegistry()
        for name, shape, tag in vim_param_shapes(config):
            reg.add(name, shape, tag)
        return reg

    def block(self, j: int) -> BlockWeights:
        reg, p = self.registry, f"layers.{j}."
        return BlockWeights(
            norm_weight=reg[p + "norm.weight"], norm_bias=reg[p + "norm.bias"],
            in_proj_x=reg[p + "in_proj_x.weight"], in_proj_z=reg[p + "in_proj_z.weight"],
            conv_weight=reg[p + "conv.weight"], conv_bias=reg[p + "conv.bias"],
            fwd=_ssm_from(reg, p + "fwd."), bwd=_ssm_from(reg, p + "bwd."),
            out_proj=reg[p + "out_proj.weight"],
        )

    @property
    def class_index(self) -> int:
        return class_token_index(self.config.n_tokens, self.config.cls_position)

    def reset_head(self, n_classes: int, seed: int = 0, zero: bool = False) -> None:
        rng = np.random.default_rng(seed)
        d = self.config.d_model
        w = np.zeros((n_classes, d)) if zero else trunc_normal(rng, (n_classes, d))
        self.registry.replace("head.weight", Tensor(w.astype(self.dtype)))
        self.registry.replace("head.bias", Tensor(np.zeros(n_classes, dtype=self.dtype)))
        self.config.n_classes = n_classes

    def astype(self, dtype) -> "VimModel":
        """A copy of the model with every parameter cast to ``dtype``."""
        reg = ParameterRegistry()
        for e in self.registry:
            reg.add(e.name, e.shape, e.tag, Tensor(e.tensor.data.astype(dtype)), e.frozen)
        from copy import deepcopy
        return VimModel(deepcopy(self.config), dtype=dtype, registry=reg)

    def embed(self, images) -> tuple[Tensor, int]:
        """Patch tokens with the class token inserted: (B, n + 1, d) and its index."""
        reg = self.registry
        tokens = patch_embed(images, self)
        ci = self.class_index
        cls = nx.add(reg["cls_token"], nx.reshape(nx.narrow(reg["pos_embed"], ci, 1, 0), (self.config.d_model,)))
        return insert_class_token(tokens, cls, self.config.cls_position)

    def features(self, images, svp=None, prompts=None, traces: list | None = None) -> Tensor:
        """Final-norm class-token features (B, d)."""
        seq, ci = self.embed(images)
        if prompts is not None:
            seq, ci = prompts.insert(seq, ci)
        for j in range(self.config.n_layers):
            if svp is not None:
                seq = svp.overlay(j, seq, ci)
            layer_traces = None
            if traces is not None:
                layer_traces = {}
                traces.append(layer_traces)
            seq = bidirectional_combine(seq, self.block(j), layer_traces, layer=j)
        reg = self.registry
        seq = nx.layer_norm(seq, reg["norm_f.weight"], reg["norm_f.bias"])
        self.last_class_index = ci
        return nx.take(seq, ci, axis=1)

    def head(self, feats: Tensor) -> Tensor:
        return nx.linear(feats, self.registry["head.weight"], self.registry["head.bias"])

    def forward(self, images, svp=None, prompts=None, traces: list | None = None) -> Tensor:
        return self.head(self.features(images, svp=svp, prompts=prompts, traces=traces))

    __call__ = forward


def vim_forward(image, model: VimModel, svp=None, prompts=None, traces: list | None = None) -> Tensor:
    """Logits (B, K) for image(s) (H, W, C) or (B, H, W, C)."""
    return model.forward(image, svp=svp, prompts=prompts, traces=traces)
