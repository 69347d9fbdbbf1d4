"""Vision Mamba backbone and its parameter registry."""

from vimsvp.vim.config import CLS_POSITIONS, VimConfig, class_token_index
from vimsvp.vim.model import (
    BlockWeights,
    VimModel,
    bidirectional_combine,
    insert_class_token,
    mamba_block_forward,
    patch_embed,
    patchify,
    trunc_normal,
    vim_forward,
    vim_param_shapes,
)
from vimsvp.vim.registry import FILTERS, TAGS, ParamEntry, ParameterRegistry, count_parameters

__all__ = [
    "BlockWeights", "CLS_POSITIONS", "FILTERS", "ParamEntry", "ParameterRegistry", "TAGS", "VimConfig",
    "VimModel", "bidirectional_combine", "class_token_index", "count_parameters", "insert_class_token",
    "mamba_block_forward", "patch_embed", "patchify", "trunc_normal", "vim_forward", "vim_param_shapes",
]
