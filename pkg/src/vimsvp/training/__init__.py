"""Optimisation, trainable-set selection and checkpointing."""

from vimsvp.training.checkpoint import CheckpointState, load_checkpoint, restore_registry, save_checkpoint
from vimsvp.training.config import DEFAULT_LR, MODES, TrainConfig, config_hash
from vimsvp.training.loop import (
    TRAINABLE_TAGS,
    ArraySet,
    FitResult,
    Learner,
    evaluate,
    extract_features,
    fit,
    select_trainable,
    train_step,
)
from vimsvp.training.optim import AdamW, MomentState, adamw_update, clip_grad_norm, cosine_lr, global_grad_norm

__all__ = [
    "AdamW", "ArraySet", "CheckpointState", "DEFAULT_LR", "FitResult", "Learner", "MODES", "MomentState",
    "TRAINABLE_TAGS", "TrainConfig", "adamw_update", "clip_grad_norm", "config_hash", "cosine_lr", "evaluate",
    "extract_features", "fit", "global_grad_norm", "load_checkpoint", "restore_registry", "save_checkpoint",
    "select_trainable", "train_step",
]
