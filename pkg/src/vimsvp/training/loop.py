"""Trainable-set selection, single steps, evaluation and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from vimsvp import numerics as nx
from vimsvp.data.dataset import batch_iterator
from vimsvp.errors import ContractError, NonFiniteError
from vimsvp.numerics import Tape, Tensor, no_grad
from vimsvp.training.config import MODES, TrainConfig
from vimsvp.training.optim import AdamW, clip_grad_norm, cosine_lr
from vimsvp.vim.registry import ParameterRegistry, count_parameters

log = logging.getLogger(__name__)

TRAINABLE_TAGS = {
    "pretrain-backbone": ("backbone", "head"),
    "svp-adapt": ("svp", "head"),
    "linear-probe": ("head",),
    "full-finetune": ("backbone", "svp", "head", "prompt"),
    "baseline-append": ("prompt", "head"),
}

METRIC_FIELDS = ("epoch", "split", "loss", "accuracy", "lr")


class Learner:
    """A backbone with optional SVP module or appended prompts, seen as one parameter set."""

    def __init__(self, model, svp=None, prompts=None):
        self.model = model
        self.svp = svp
        self.prompts = prompts
        self.registry = ParameterRegistry.union(
            model.registry,
            None if svp is None else svp.registry,
            None if prompts is None else prompts.registry,
        )

    @property
    def dtype(self):
        return self.model.dtype

    def features(self, images) -> Tensor:
        return self.model.features(images, svp=self.svp, prompts=self.prompts)

    def __call__(self, images, traces: list | None = None) -> Tensor:
        return self.model.forward(images, svp=self.svp, prompts=self.prompts, traces=traces)


def select_trainable(registry: ParameterRegistry, mode: str) -> list:
    """Set freeze flags from ``mode``; returns the trainable parameter names."""
    if mode not in TRAINABLE_TAGS:
        raise ContractError(f"unknown training mode {mode!r}; expected one of {MODES}")
    tags = TRAINABLE_TAGS[mode]
    for e in registry:
        registry.set_frozen(e.name, e.tag not in tags)
    return [e.name for e in registry if not e.frozen]


def _first_nonfinite(registry: ParameterRegistry) -> str | None:
    for e in registry:
        t = e.tensor
        if t is None:
            continue
        if not np.isfinite(t.data).all():
            return f"{e.name} (value)"
        if t.grad is not None and not np.isfinite(t.grad).all():
            return f"{e.name} (gradient)"
    return None


def train_step(forward: Callable, registry: ParameterRegistry, opt: AdamW, images, labels,
               lr: float, grad_clip: float | None = 1.0, step: int = 0) -> dict:
    """forward -> cross-entropy -> backward -> clip -> AdamW on the trainable set."""
    params = opt.params
    for t in params.values():
        t.grad = None
    try:
        with Tape() as tape:
            logits = forward(images)
            loss = nx.cross_entropy_loss(logits, labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteError(f"loss is {value}")
        nx.backward(loss, tape)
    except NonFiniteError as exc:
        where = _first_nonfinite(registry)
        raise NonFiniteError(
            f"training aborted at step {step} (lr={lr:.3g}): {exc}"
            + (f"; first non-finite parameter: {where}" if where else "")
        ) from None
    norm = clip_grad_norm(params, grad_clip)
    opt.step(lr)
    acc = float((logits.data.argmax(axis=1) == np.asarray(labels)).mean())
    return {"loss": value, "accuracy": acc, "lr": lr, "grad_norm": norm}


def evaluate(forward: Callable, data, batch_size: int = 128) -> dict:
    """Mean loss and accuracy over ``data`` (anything with images/labels) without recording."""
    total_loss, correct, n = 0.0, 0, 0
    with no_grad():
        for x, y in batch_iterator(data, batch_size):
            logits = forward(x)
            total_loss += float(nx.cross_entropy_loss(logits, y).data) * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            n += len(y)
    return {"loss": total_loss / n, "accuracy": correct / n}


@dataclass
class ArraySet:
    """Minimal (images, labels) container accepted by :func:`batch_iterator`."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def extract_features(learner: Learner, data, batch_size: int = 128) -> ArraySet:
    with no_grad():
        feats = [learner.features(x).data for x, _ in batch_iterator(data, batch_size)]
    return ArraySet(np.concatenate(feats), np.asarray(data.labels))


@dataclass
class FitResult:
    history: list = field(default_factory=list)
    step: int = 0
    train: dict = field(default_factory=dict)
    val: dict = field(default_factory=dict)
    trainable: int = 0
    optimizer: AdamW | None = None


class MetricsWriter:
    def __init__(self, path):
        self.path = None if path is None else Path(path)
        self._fh = None

    def write(self, row: dict, append: bool) -> None:
        if self.path is None:
            return
        if self._fh is None:
            new = not (append and self.path.exists())
            self._fh = open(self.path, "w" if new else "a", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
            if new:
                self._writer.writeheader()
        self._writer.writerow(row)
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def fit(learner: Learner, train, val, cfg: TrainConfig, metrics_path=None, start_step: int = 0,
        optimizer: AdamW | None = None, stop_step: int | None = None,
        on_step: Callable | None = None) -> FitResult:
    """Train ``learner`` for ``cfg.epochs`` under ``cfg.mode``.

    The schedule and the per-epoch shuffles depend only on the global step, so
    a run resumed from ``start_step`` with the saved optimizer replays exactly
    what an uninterrupted run would do.  ``stop_step`` ends early (for
    checkpointing mid-run).  Linear probing trains the head on features cached
    once, since nothing upstream of the head changes.
    """
    select_trainable(learner.registry, cfg.mode)
    params = learner.registry.trainable()
    opt = optimizer if optimizer is not None else AdamW(params, cfg.weight_decay, cfg.betas, cfg.eps)
    forward: Callable = learner
    if cfg.mode == "linear-probe" and learner.svp is None and learner.prompts is None:
        train = extract_features(learner, train, cfg.eval_batch_size)
        val = None if val is None else extract_features(learner, val, cfg.eval_batch_size)
        model = learner.model

        def forward(feats):
            return model.head(Tensor(np.asarray(feats, dtype=model.dtype)))

    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = int(cfg.warmup_fraction * total)
    writer = MetricsWriter(metrics_path)
    result = FitResult(trainable=count_parameters(learner.registry, "trainable"), optimizer=opt)
    step = start_step
    try:
        for epoch in range(cfg.epochs):
            if (epoch + 1) * steps_per_epoch <= start_step:
                continue
            losses, accs, sizes = [], [], []
            lr = cfg.lr
            for b, (x, y) in enumerate(batch_iterator(train, cfg.batch_size, shuffle=True, seed=cfg.seed,
                                                      epoch=epoch)):
                if epoch * steps_per_epoch + b < start_step:
                    continue
                if stop_step is not None and step >= stop_step:
                    result.step = step
                    return result
                lr = cosine_lr(step, total, cfg.lr, warmup)
                m = train_step(forward, learner.registry, opt, x, y, lr, cfg.grad_clip, step)
                step += 1
                losses.append(m["loss"])
                accs.append(m["accuracy"])
                sizes.append(len(y))
                if on_step is not None:
                    on_step(step, m)
            w = np.asarray(sizes, dtype=np.float64)
            row = {"epoch": epoch + 1, "split": "train", "loss": float(np.dot(losses, w) / w.sum()),
                   "accuracy": float(np.dot(accs, w) / w.sum()), "lr": lr}
            result.history.append(row)
            result.train = row
            writer.write(row, append=start_step > 0)
            last = epoch + 1 == cfg.epochs
            if val is not None and ((epoch + 1) % cfg.eval_every == 0 or last):
                ev = evaluate(forward, val, cfg.eval_batch_size)
                vrow = {"epoch": epoch + 1, "split": "val", "loss": ev["loss"], "accuracy": ev["accuracy"], "lr": lr}
                result.history.append(vrow)
                result.val = vrow
                writer.write(vrow, append=True)
                log.info("epoch %d train_acc %.3f val_acc %.3f", epoch + 1, row["accuracy"], ev["accuracy"])
    finally:
        writer.close()
    result.step = step
    return result
