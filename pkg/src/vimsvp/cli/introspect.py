"""Update-gate and retention maps from traced forwards, plus PGM export."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from vimsvp.errors import ContractError, FormatError
from vimsvp.ssm import GateTrace, minmax_normalize

SNAPSHOTS = (0.25, 0.5, 0.75, 1.0)
NORMALIZE = ("layer", "global")


def token_update_gates(layer_traces: dict, sample: int = 0) -> np.ndarray:
    """Raw per-token update-gate means (L,) of one layer, averaged over both scan directions.

    Backward traces are stored in scan order and are flipped back first.
    """
    parts = []
    for direction, traces in layer_traces.items():
        tr: GateTrace = traces[sample]
        if direction == "bwd":
            tr = tr.reversed()
        parts.append(tr.update_magnitude.mean(axis=1))
    if not parts:
        raise ContractError("no traces recorded for this layer")
    return np.mean(parts, axis=0)


def gate_maps(traces: list, cls_index: int, normalize: str = "layer", sample: int = 0,
              layers=None) -> np.ndarray:
    """(n_layers, L) update-gate values scaled to [0, 1].

    The class-token slot is replaced by the mean over patch tokens before
    scaling so it neither sets nor stretches the range.  ``normalize="layer"``
    scales each layer on its own; ``"global"`` uses one range for all layers.
    """
    if normalize not in NORMALIZE:
        raise ContractError(f"normalize must be one of {NORMALIZE}")
    layers = range(len(traces)) if layers is None else layers
    raw = np.stack([token_update_gates(traces[j], sample) for j in layers])
    if cls_index is not None:
        patch = np.delete(raw, cls_index, axis=1)
        raw[:, cls_index] = patch.mean(axis=1)
    return minmax_normalize(raw, axis=1 if normalize == "layer" else None)


def to_patch_grid(values: np.ndarray, cls_index: int | None, grid: int) -> np.ndarray:
    """Drop the class slot from a length n+1 vector and reshape to (grid, grid)."""
    patch = np.delete(values, cls_index) if cls_index is not None else np.asarray(values)
    if patch.size != grid * grid:
        raise ContractError(f"{patch.size} patch values do not fill a {grid}x{grid} grid")
    return patch.reshape(grid, grid)


def motif_margin(grid_values: np.ndarray, motif_mask: np.ndarray) -> float:
    """Mean over motif-covered cells minus mean over background cells."""
    mask = np.asarray(motif_mask, dtype=bool)
    if not mask.any() or mask.all():
        raise ContractError("motif mask must cover some but not all cells")
    return float(grid_values[mask].mean() - grid_values[~mask].mean())


def motif_gate_margins(traces: list, cls_index: int, masks: np.ndarray, grid: int,
                       normalize: str = "layer") -> np.ndarray:
    """Per-sample motif-minus-background margin of the layer-averaged normalized update gate.

    ``traces`` come from one batched forward; ``masks`` is (B, grid, grid).
    """
    masks = np.asarray(masks, dtype=bool)
    out = np.empty(len(masks))
    for s in range(len(masks)):
        maps = gate_maps(traces, cls_index, normalize=normalize, sample=s)
        out[s] = motif_margin(to_patch_grid(maps.mean(axis=0), cls_index, grid), masks[s])
    return out


def retention_profile(forget_gate: np.ndarray, progress: float) -> np.ndarray:
    """Retention of each token's write after a fraction ``progress`` of the scan.

    With forget gates a_k (scan order, shape (L, h, d)) and t the last step
    reached, token i <= t retains mean_{h,d} prod_{k=i+1..t} a_k; tokens not yet
    scanned retain 0.  Returned in scan order.
    """
    L = forget_gate.shape[0]
    if not 0 < progress <= 1:
        raise ContractError("progress must lie in (0, 1]")
    t = max(int(np.ceil(progress * L)) - 1, 0)
    logs = np.log(np.maximum(forget_gate[: t + 1], np.finfo(np.float64).tiny)).astype(np.float64)
    # suffix sums: S[i] = sum_{k=i+1..t} log a_k
    suffix = np.zeros_like(logs)
    suffix[:-1] = np.cumsum(logs[::-1], axis=0)[::-1][1:]
    out = np.zeros(L)
    out[: t + 1] = np.exp(suffix).mean(axis=(1, 2))
    return out


def retention_snapshots(trace: GateTrace, fractions=SNAPSHOTS) -> np.ndarray:
    """(len(fractions), L) retention profiles in original token order."""
    rows = [retention_profile(trace.forget_gate, f) for f in fractions]
    out = np.stack(rows)
    return out[:, ::-1].copy() if trace.direction == "bwd" else out


def write_pgm(path, values: np.ndarray) -> None:
    """Binary (P5) 8-bit grayscale image of ``values`` in [0, 1]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError("PGM data must be 2-D")
    pix = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    payload = raw[pos + 1:]  # exactly one whitespace byte ends the header
    if len(payload) != w * h:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
