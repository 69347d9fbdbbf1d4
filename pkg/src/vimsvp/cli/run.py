"""Workflows behind the CLI verbs, usable directly from Python."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from vimsvp.cli import introspect
from vimsvp.cli.config import ConfigError, RunConfig
from vimsvp.data import (
    Dataset,
    SyntheticTaskSpec,
    generate_synthetic,
    load_cifar10_binary,
    parse_records,
)
from vimsvp.errors import CheckpointError
from vimsvp.numerics import dtype_for, no_grad
from vimsvp.svp import POSITIONS, AppendedPrompts, SvpModule
from vimsvp.training import (
    CheckpointState,
    FitResult,
    Learner,
    TrainConfig,
    evaluate,
    fit,
    load_checkpoint,
    restore_registry,
    save_checkpoint,
    select_trainable,
)
from vimsvp.vim import VimConfig, VimModel, count_parameters

log = logging.getLogger(__name__)

SUMMARY_FIELDS = ("mode", "position", "trainable_params", "train_acc", "val_acc", "epochs", "base_lr",
                  "batch_size", "config_hash")
ABLATION_MODES = ("pre", "post", "both", "uniform", "middle", "svp")
GATE_FIELDS = ("layer", "token", "grid_row", "grid_col", "is_cls", "update_gate")
RETENTION_FIELDS = ("layer", "direction", "progress", "token", "retention")
COUNT_FIELDS = ("scope", "name", "count")


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    mean: np.ndarray
    std: np.ndarray

    @property
    def stats(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def load_splits(cfg: RunConfig, stage: str, stats: dict | None = None) -> Splits:
    """Standardized train/val data for ``stage`` ("pretrain" uses task A, "adapt" task B).

    Statistics come from the train split unless ``stats`` (from a checkpoint)
    is given, in which case those are applied to both splits.
    """
    dc = cfg.data
    if dc.source == "cifar10":
        n_train = dc.pretrain_train if stage == "pretrain" else dc.adapt_train
        n_val = dc.pretrain_val if stage == "pretrain" else dc.adapt_val
        train = load_cifar10_binary(dc.path, "train", limit=n_train)
        val = load_cifar10_binary(dc.path, "test", limit=n_val)
    else:
        task = "A" if stage == "pretrain" else "B"
        # the adapt stage draws fresh images so no sample is shared with pretraining
        seed = dc.seed if stage == "pretrain" else dc.seed + 1
        n_train = dc.pretrain_train if stage == "pretrain" else dc.adapt_train
        n_val = dc.pretrain_val if stage == "pretrain" else dc.adapt_val
        train = generate_synthetic(SyntheticTaskSpec(task, n_train, "train", cfg.model.image_size,
                                                     noise=dc.noise, copies=dc.copies, seed=seed))
        val = generate_synthetic(SyntheticTaskSpec(task, n_val, "val", cfg.model.image_size,
                                                   noise=dc.noise, copies=dc.copies, seed=seed))
    if stats is None:
        mean, std = train.channel_stats()
    else:
        mean, std = np.asarray(stats["mean"]), np.asarray(stats["std"])
    return Splits(train.standardized(mean, std), val.standardized(mean, std), mean, std)


def _dtype(cfg: RunConfig):
    return dtype_for(cfg.precision)


def write_rows(path, fieldnames, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return path


def run_pretrain(cfg: RunConfig, out_dir) -> tuple[VimModel, FitResult, Splits]:
    """Train the backbone on the pretraining task and checkpoint it."""
    out = Path(out_dir)
    cfg.write_resolved(out)
    splits = load_splits(cfg, "pretrain")
    mcfg = replace(cfg.model, n_classes=splits.train.n_classes)
    model = VimModel(mcfg, seed=cfg.seed, dtype=_dtype(cfg))
    tcfg = replace(cfg.pretrain, mode="pretrain-backbone", seed=cfg.seed, precision=cfg.precision)
    learner = Learner(model)
    result = fit(learner, splits.train, splits.val, tcfg, metrics_path=out / "metrics.csv")
    resolved = cfg.to_dict()
    resolved["model"] = mcfg.to_dict()
    save_checkpoint(out / "checkpoint", learner.registry, result.optimizer, result.step, resolved, cfg.hash,
                    splits.stats)
    write_rows(out / "summary.csv", SUMMARY_FIELDS, [_summary_row(cfg.hash, "pretrain-backbone", "", result, tcfg)])
    return model, result, splits


def _summary_row(h: str, mode: str, position: str, result: FitResult, tcfg: TrainConfig) -> dict:
    return {
        "mode": mode, "position": position, "trainable_params": result.trainable,
        "train_acc": result.train.get("accuracy", float("nan")), "val_acc": result.val.get("accuracy", float("nan")),
        "epochs": tcfg.epochs, "base_lr": tcfg.lr, "batch_size": tcfg.batch_size, "config_hash": h,
    }


def model_from_checkpoint(state: CheckpointState, dtype=None) -> VimModel:
    """Backbone (and head) rebuilt from a checkpoint's recorded model config."""
    mdict = dict(state.config.get("model") or {})
    if not mdict:
        raise CheckpointError("checkpoint does not record a model configuration")
    if "head.weight" in state.params:
        mdict["n_classes"] = int(state.params["head.weight"].shape[0])
    try:
        mcfg = VimConfig(**mdict)
    except TypeError as exc:
        raise CheckpointError(f"checkpoint model configuration is invalid: {exc}") from None
    dtype = dtype if dtype is not None else state.params["pos_embed"].dtype
    model = VimModel(mcfg, dtype=dtype)
    restore_registry(state, model.registry, tags=("backbone", "head"))
    return model


def check_compatible(state: CheckpointState, cfg: RunConfig) -> None:
    """The run's model section must describe the checkpointed backbone."""
    shape_reg = VimModel.shape_registry(replace(cfg.model, n_classes=1))
    for e in shape_reg:
        if e.tag != "backbone":
            continue
        if e.name not in state.params:
            raise CheckpointError(f"checkpoint has no tensor for parameter {e.name!r}")
        if state.params[e.name].shape != e.shape:
            raise CheckpointError(
                f"shape mismatch for {e.name!r}: checkpoint {state.params[e.name].shape} vs config {e.shape}"
            )


def build_learner(model: VimModel, cfg: RunConfig, mode: str, position: str | None = None) -> Learner:
    d, n = model.config.d_model, model.config.n_layers
    svp = prompts = None
    if mode == "svp-adapt":
        svp = SvpModule(d, n, cfg.svp, seed=cfg.seed + 7, dtype=model.dtype)
    elif mode == "baseline-append":
        position = position or (cfg.baseline.mode if cfg.baseline.mode != "none" else None)
        if position not in POSITIONS:
            raise ConfigError(f"baseline-append needs --position in {POSITIONS}")
        prompts = AppendedPrompts(d, cfg.baseline.num_prompts, position, seed=cfg.seed + 11, dtype=model.dtype)
    return Learner(model, svp=svp, prompts=prompts)


def adapt_once(state: CheckpointState, cfg: RunConfig, splits: Splits, mode: str, position: str | None = None,
               metrics_path=None, stop_step: int | None = None) -> tuple[Learner, FitResult, TrainConfig]:
    """Fresh copy of the checkpointed backbone, new task head, then train under ``mode``."""
    model = model_from_checkpoint(state, _dtype(cfg))
    model.reset_head(splits.train.n_classes, seed=cfg.seed + 3)
    learner = build_learner(model, cfg, mode, position)
    tcfg = replace(cfg.train, mode=mode, seed=cfg.seed, precision=cfg.precision)
    result = fit(learner, splits.train, splits.val, tcfg, metrics_path=metrics_path, stop_step=stop_step)
    return learner, result, tcfg


def run_adapt(cfg: RunConfig, checkpoint, out_dir, mode: str = "svp-adapt", position: str | None = None) -> dict:
    out = Path(out_dir)
    cfg.write_resolved(out)
    state = load_checkpoint(checkpoint)
    check_compatible(state, cfg)
    splits = load_splits(cfg, "adapt", state.standardization)
    learner, result, tcfg = adapt_once(state, cfg, splits, mode, position, metrics_path=out / "metrics.csv")
    pos = learner.prompts.position if learner.prompts is not None else ""
    row = _summary_row(cfg.hash, mode, pos, result, tcfg)
    write_rows(out / "summary.csv", SUMMARY_FIELDS, [row])
    resolved = cfg.to_dict()
    resolved["model"] = learner.model.config.to_dict()
    save_checkpoint(out / "checkpoint", learner.registry, result.optimizer, result.step, resolved, cfg.hash,
                    splits.stats)
    return row


def run_ablation(cfg: RunConfig, checkpoint, out_dir) -> list:
    """Every appended-prompt position plus SVP under one identical training budget."""
    out = Path(out_dir)
    cfg.write_resolved(out)
    state = load_checkpoint(checkpoint)
    check_compatible(state, cfg)
    splits = load_splits(cfg, "adapt", state.standardization)
    rows = []
    for label in ABLATION_MODES:
        mode, position = ("svp-adapt", "") if label == "svp" else ("baseline-append", label)
        _, result, tcfg = adapt_once(state, cfg, splits, mode, position or None)
        row = _summary_row(cfg.hash, label, position, result, tcfg)
        rows.append(row)
        log.info("ablation %s val_acc %.3f", label, row["val_acc"])
    write_rows(out / "ablation.csv", SUMMARY_FIELDS, rows)
    write_ablation_report(out / "ablation_report.txt", rows)
    return rows


def write_ablation_report(path, rows: list) -> dict:
    svp = next(r for r in rows if r["mode"] == "svp")
    others = [r for r in rows if r["mode"] != "svp"]
    ahead = [r["mode"] for r in others if r["val_acc"] > svp["val_acc"]]
    ranking = sorted(rows, key=lambda r: -r["val_acc"])
    budgets = {(r["epochs"], r["base_lr"], r["batch_size"]) for r in rows}
    lines = ["ranking by val_acc: " + ", ".join(f"{r['mode']}={r['val_acc']:.4f}" for r in ranking),
             f"identical budgets: {len(budgets) == 1}"]
    if ahead:
        lines.append("divergence: appended-prompt modes above svp: " + ", ".join(ahead))
    else:
        lines.append("svp is at or above every appended-prompt mode")
    Path(path).write_text("\n".join(lines) + "\n")
    return {"divergent": bool(ahead), "ahead_of_svp": ahead, "identical_budgets": len(budgets) == 1}


def learner_from_checkpoint(state: CheckpointState, cfg: RunConfig) -> Learner:
    """Model plus whatever SVP module or prompts the checkpoint holds."""
    model = model_from_checkpoint(state, _dtype(cfg))
    svp = prompts = None
    if any(tag == "svp" for tag in state.tags.values()):
        svp = SvpModule(model.config.d_model, model.config.n_layers, cfg.svp, dtype=model.dtype)
        restore_registry(state, svp.registry)
    if "prompt.tokens" in state.params:
        m = state.params["prompt.tokens"].shape[0]
        position = cfg.baseline.mode if cfg.baseline.mode != "none" else "pre"
        prompts = AppendedPrompts(model.config.d_model, m, position, dtype=model.dtype)
        restore_registry(state, prompts.registry)
    return Learner(model, svp=svp, prompts=prompts)


def load_image(path, index: int = 0) -> np.ndarray:
    """An (H, W, C) image in [0, 1] from a .npy array or a CIFAR-format .bin record."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"image file not found: {p}")
    if p.suffix == ".npy":
        img = np.load(p)
        if img.ndim == 4:
            img = img[index]
        return np.asarray(img, dtype=np.float64)
    images, _ = parse_records(p.read_bytes(), source=str(p))
    if not 0 <= index < len(images):
        raise ConfigError(f"record index {index} outside [0, {len(images)})")
    return images[index].astype(np.float64) / 255.0


def parse_layer_range(spec: str | None, n_layers: int) -> list:
    """"j" or "a:b" (half-open) into a list of layer indices, bounds-checked."""
    if spec is None:
        return list(range(n_layers))
    try:
        if ":" in spec:
            a, b = spec.split(":", 1)
            lo = int(a) if a else 0
            hi = int(b) if b else n_layers
        else:
            lo = int(spec)
            hi = lo + 1
    except ValueError:
        raise ConfigError(f"bad layer range {spec!r}; use 'j' or 'a:b'") from None
    if not (0 <= lo < hi <= n_layers):
        raise ConfigError(f"layer range {spec!r} outside [0, {n_layers})")
    return list(range(lo, hi))


def traced_forward(learner: Learner, image: np.ndarray) -> tuple[list, int]:
    traces: list = []
    with no_grad():
        learner.model.forward(image, svp=learner.svp, prompts=learner.prompts, traces=traces)
    return traces, learner.model.last_class_index


def run_inspect_gates(cfg: RunConfig, checkpoint, out_dir, image=None, index: int = 0,
                      layers: str | None = None, normalize: str = "layer") -> dict:
    out = Path(out_dir)
    cfg.write_resolved(out)
    state = load_checkpoint(checkpoint)
    learner = learner_from_checkpoint(state, cfg)
    mcfg = learner.model.config
    chosen = parse_layer_range(layers, mcfg.n_layers)
    if image is None:
        splits = load_splits(cfg, "adapt", state.standardization)
        img = splits.val.images[index]
    else:
        raw = load_image(image, index)
        st = state.standardization or {"mean": [0.0] * raw.shape[-1], "std": [1.0] * raw.shape[-1]}
        img = (raw - np.asarray(st["mean"])) / np.asarray(st["std"])
    traces, ci = traced_forward(learner, img)
    maps = introspect.gate_maps(traces, ci, normalize=normalize, layers=chosen)
    if learner.prompts is not None:
        # drop appended prompt rows so the map covers image patches only
        keep = _image_rows(mcfg, learner.prompts, ci)
        maps = maps[:, keep]
        ci = int(np.flatnonzero(keep == ci)[0])
    grid = mcfg.grid
    gate_rows, ret_rows = [], []
    for k, j in enumerate(chosen):
        values = maps[k]
        cells = _cell_coords(len(values), ci, grid)
        for t, v in enumerate(values):
            r, c = cells[t]
            gate_rows.append({"layer": j, "token": t, "grid_row": r, "grid_col": c, "is_cls": int(t == ci),
                              "update_gate": float(v)})
        introspect.write_pgm(out / f"gates_layer{j:02d}.pgm", introspect.to_patch_grid(values, ci, grid))
        snaps = []
        for direction, trs in traces[j].items():
            s = introspect.retention_snapshots(trs[0])
            snaps.append(s)
            for fi, frac in enumerate(introspect.SNAPSHOTS):
                for t, v in enumerate(s[fi]):
                    ret_rows.append({"layer": j, "direction": direction, "progress": frac, "token": t,
                                     "retention": float(v)})
        combined = np.mean(snaps, axis=0)
        if learner.prompts is not None:
            combined = combined[:, _image_rows(mcfg, learner.prompts, learner.model.class_index)]
        for fi, frac in enumerate(introspect.SNAPSHOTS):
            grid_vals = introspect.to_patch_grid(introspect.minmax_normalize(combined[fi]), ci, grid)
            introspect.write_pgm(out / f"retention_layer{j:02d}_p{int(frac * 100):03d}.pgm", grid_vals)
    write_rows(out / "gates.csv", GATE_FIELDS, gate_rows)
    write_rows(out / "retention.csv", RETENTION_FIELDS, ret_rows)
    return {"layers": chosen, "class_index": ci, "maps": maps}


def _image_rows(mcfg: VimConfig, prompts: AppendedPrompts, ci: int) -> np.ndarray:
    from vimsvp.svp import append_order
    order = append_order(mcfg.n_tokens + 1, prompts.num_prompts, prompts.position)
    return np.flatnonzero(order < mcfg.n_tokens + 1)


def _cell_coords(L: int, ci: int, grid: int) -> list:
    coords = []
    p = 0
    for t in range(L):
        if t == ci:
            coords.append((-1, -1))
        else:
            coords.append(divmod(p, grid))
            p += 1
    return coords


def count_report(cfg: RunConfig) -> list:
    """Per-tag and per-mode parameter counts from shape-only registries."""
    from vimsvp.training import TRAINABLE_TAGS
    from vimsvp.vim import ParameterRegistry

    mcfg = cfg.model
    backbone = VimModel.shape_registry(mcfg)
    svp = SvpModule(mcfg.d_model, mcfg.n_layers, cfg.svp, allocate=False)
    prompts = AppendedPrompts(mcfg.d_model, cfg.baseline.num_prompts, allocate=False)
    rows = []
    for tag, reg in (("backbone", backbone), ("head", backbone), ("svp", svp.registry),
                     ("prompt", prompts.registry)):
        rows.append({"scope": "tag", "name": tag, "count": count_parameters(reg, tag)})
    for mode in TRAINABLE_TAGS:
        parts = [copy.deepcopy(backbone)]
        if mode in ("svp-adapt",):
            parts.append(copy.deepcopy(svp.registry))
        if mode == "baseline-append":
            parts.append(copy.deepcopy(prompts.registry))
        reg = ParameterRegistry.union(*parts)
        select_trainable(reg, mode)
        rows.append({"scope": "trainable", "name": mode, "count": count_parameters(reg, "trainable")})
    return rows


def run_count_params(cfg: RunConfig, out_dir=None) -> list:
    rows = count_report(cfg)
    if out_dir is not None:
        out = Path(out_dir)
        cfg.write_resolved(out)
        write_rows(out / "params.csv", COUNT_FIELDS, rows)
    return rows


def run_eval(cfg: RunConfig, checkpoint, out_dir, stage: str = "adapt") -> dict:
    out = Path(out_dir)
    cfg.write_resolved(out)
    state = load_checkpoint(checkpoint)
    learner = learner_from_checkpoint(state, cfg)
    splits = load_splits(cfg, stage, state.standardization)
    row = {}
    for split, ds in (("train", splits.train), ("val", splits.val)):
        if ds.n_classes != learner.model.config.n_classes:
            raise ConfigError(f"checkpoint head has {learner.model.config.n_classes} classes but the "
                              f"{stage} data has {ds.n_classes}; pass --stage to match")
        m = evaluate(learner, ds, cfg.train.eval_batch_size)
        row[f"{split}_loss"], row[f"{split}_acc"] = m["loss"], m["accuracy"]
    write_rows(out / "eval.csv", tuple(row), [row])
    (out / "eval.json").write_text(json.dumps(row, indent=2))
    return row
