"""Checkpoints: a JSON manifest plus one little-endian raw tensor blob.

Layout of a checkpoint directory::

    manifest.json   {"format", "version", "step", "config_hash", "config",
                     "standardization", "blob_bytes", "entries": [...]}
    tensors.bin     entries concatenated in manifest order

Each entry is {name, kind, shape, dtype, offset, nbytes, frozen, tag} where
``kind`` is "param", "adam_m" or "adam_v".
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vimsvp.errors import CheckpointError
from vimsvp.numerics import Tensor
from vimsvp.vim.registry import ParameterRegistry

FORMAT = "vimsvp-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
KINDS = ("param", "adam_m", "adam_v")


@dataclass
class CheckpointState:
    params: dict                      # name -> ndarray
    tags: dict                        # name -> tag
    frozen: dict                      # name -> bool
    moments: dict = field(default_factory=dict)  # name -> (m, v)
    step: int = 0
    optimizer_step: int = 0
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    standardization: dict | None = None


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(path, registry: ParameterRegistry, optimizer=None, step: int = 0,
                    config: dict | None = None, config_hash: str = "",
                    standardization: dict | None = None) -> Path:
    """Write every allocated registry tensor (and optimizer moments) under directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks = [], []
    offset = 0

    def put(name, kind, arr, frozen, tag):
        nonlocal offset
        arr = _le(np.asarray(arr))
        raw = arr.tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw), "frozen": bool(frozen), "tag": tag})
        chunks.append(raw)
        offset += len(raw)

    for e in registry:
        if e.tensor is not None:
            put(e.name, "param", e.tensor.data, e.frozen, e.tag)
    opt_step = 0
    if optimizer is not None:
        opt_step = optimizer.step_count
        for name, (m, v) in optimizer.moment_arrays().items():
            e = registry.entry(name)
            put(name, "adam_m", m, e.frozen, e.tag)
            put(name, "adam_v", v, e.frozen, e.tag)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "step": int(step),
        "optimizer_step": int(opt_step),
        "config_hash": config_hash,
        "config": config or {},
        "standardization": standardization,
        "blob_bytes": offset,
        "entries": entries,
    }
    tmp = path / (BLOB + ".tmp")
    with open(tmp, "wb") as fh:
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _read_manifest(path: Path) -> dict:
    mpath = path / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{mpath}: corrupt manifest ({exc})") from None
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mpath}: not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{mpath}: unsupported version {manifest.get('version')}")
    if not isinstance(manifest.get("entries"), list):
        raise CheckpointError(f"{mpath}: manifest has no entry list")
    return manifest


def load_checkpoint(path) -> CheckpointState:
    """Read and validate a checkpoint; errors name the first inconsistent entry."""
    path = Path(path)
    manifest = _read_manifest(path)
    bpath = path / BLOB
    if not bpath.exists():
        raise FileNotFoundError(f"checkpoint blob not found: {bpath}")
    blob = bpath.read_bytes()
    declared = manifest.get("blob_bytes")
    if declared is not None and declared != len(blob):
        raise CheckpointError(f"{bpath}: blob holds {len(blob)} bytes but the manifest declares {declared}")

    params, tags, frozen, m_parts, v_parts = {}, {}, {}, {}, {}
    expected_offset = 0
    for i, ent in enumerate(manifest["entries"]):
        label = f"entry {i} ({ent.get('name', '?')!r}, {ent.get('kind', '?')})"
        try:
            name, kind, shape = ent["name"], ent["kind"], tuple(int(s) for s in ent["shape"])
            dtype = np.dtype(ent["dtype"])
            offset, nbytes = int(ent["offset"]), int(ent["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{label}: malformed manifest entry ({exc})") from None
        if kind not in KINDS:
            raise CheckpointError(f"{label}: unknown kind")
        if offset != expected_offset:
            raise CheckpointError(f"{label}: offset {offset}, expected {expected_offset}")
        if nbytes != math.prod(shape) * dtype.itemsize:
            raise CheckpointError(f"{label}: {nbytes} bytes cannot hold shape {shape} of {dtype}")
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{label}: needs bytes [{offset}, {offset + nbytes}) but blob has {len(blob)}")
        arr = np.frombuffer(blob, dtype=dtype, count=math.prod(shape), offset=offset).reshape(shape)
        arr = arr.astype(dtype.newbyteorder("="))
        expected_offset += nbytes
        if kind == "param":
            if name in params:
                raise CheckpointError(f"{label}: duplicate parameter")
            params[name], tags[name], frozen[name] = arr, ent.get("tag", "backbone"), bool(ent.get("frozen"))
        elif kind == "adam_m":
            m_parts[name] = arr
        else:
            v_parts[name] = arr
    if expected_offset != len(blob):
        raise CheckpointError(f"{bpath}: {len(blob) - expected_offset} trailing bytes after the last entry")
    moments = {}
    for name in m_parts:
        if name not in v_parts:
            raise CheckpointError(f"optimizer entry {name!r} has a first moment but no second moment")
        moments[name] = (m_parts[name], v_parts[name])
    return CheckpointState(params, tags, frozen, moments, int(manifest.get("step", 0)),
                           int(manifest.get("optimizer_step", 0)), manifest.get("config") or {},
                           manifest.get("config_hash", ""), manifest.get("standardization"))


def restore_registry(state: CheckpointState, registry: ParameterRegistry, restore_frozen: bool = False,
                     tags: tuple | None = None, strict: bool = True) -> list:
    """Copy checkpoint tensors into allocated registry entries (shapes must match).

    ``tags`` limits restoration to entries with those tags.  With ``strict`` a
    registry entry absent from the checkpoint is an error.  Returns the names
    restored.
    """
    restored = []
    for e in registry:
        if tags is not None and e.tag not in tags:
            continue
        if e.name not in state.params:
            if strict:
                raise CheckpointError(f"checkpoint has no tensor for parameter {e.name!r}")
            continue
        arr = state.params[e.name]
        if arr.shape != e.shape:
            raise CheckpointError(f"shape mismatch for {e.name!r}: checkpoint {arr.shape} vs model {e.shape}")
        dtype = e.tensor.dtype if e.tensor is not None else arr.dtype
        registry.replace(e.name, Tensor(np.array(arr, dtype=dtype)))
        if restore_frozen:
            registry.set_frozen(e.name, state.frozen[e.name])
        restored.append(e.name)
    return restored
