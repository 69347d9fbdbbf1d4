"""Synthetic two-task image data for the pretrain-then-adapt protocol.

Every image holds one motif from a fixed library of distinct 4x4 pixel
patterns, pasted on ``copies`` distinct patch-aligned cells of one quadrant of
a noisy background.  Task A labels the motif identity; task B labels the image
quadrant the motif sits in.  Both
tasks draw images from the same generator, so they differ only in the rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vimsvp.data.dataset import Dataset
from vimsvp.errors import ContractError

TASKS = ("A", "B")
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
MOTIF = 4


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str = "A"
    count: int = 1000
    split: str = "train"
    image_size: int = 32
    n_motifs: int = 10
    noise: float = 0.05
    copies: int = 1
    background_jitter: float = 0.0
    seed: int = 0
    library_seed: int = 1234
    min_unambiguous: float = 0.95

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"task must be one of {TASKS}")
        if self.split not in SPLIT_CODES:
            raise ContractError(f"split must be one of {tuple(SPLIT_CODES)}")
        if self.image_size % (2 * MOTIF):
            raise ContractError(f"image_size must be a multiple of {2 * MOTIF}")
        if not 2 <= self.n_motifs <= 64:
            raise ContractError("n_motifs must lie in [2, 64]")
        if self.count < 0 or self.noise < 0:
            raise ContractError("count and noise must be non-negative")
        if not 1 <= self.copies <= (self.image_size // MOTIF // 2) ** 2:
            raise ContractError("copies must lie in [1, cells per quadrant]")
        if not 0 <= self.background_jitter <= 0.4:
            raise ContractError("background_jitter must lie in [0, 0.4]")

    @property
    def n_classes(self) -> int:
        return self.n_motifs if self.task == "A" else 4

    @property
    def grid(self) -> int:
        return self.image_size // MOTIF


def motif_library(n_motifs: int, seed: int = 1234, min_distance: int = 12) -> np.ndarray:
    """(n_motifs, 4, 4, 3) high-contrast motifs, pairwise differing in >= ``min_distance`` values."""
    rng = np.random.default_rng(seed)
    motifs: list = []
    tries = 0
    while len(motifs) < n_motifs:
        tries += 1
        if tries > 100_000:
            raise ContractError("could not draw a library of distinct motifs")
        cand = rng.integers(0, 2, size=(MOTIF, MOTIF, 3)).astype(np.float64)
        if all(np.abs(cand - m).sum() >= min_distance for m in motifs):
            motifs.append(cand)
    return np.stack(motifs) * 0.9 + 0.05


def quadrant_of(cell_row, cell_col, grid: int):
    """Row-major quadrant index (0 top-left .. 3 bottom-right) of a patch cell."""
    half = grid // 2
    return 2 * (np.asarray(cell_row) >= half) + (np.asarray(cell_col) >= half)


def _balanced(rng: np.random.Generator, count: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(count) % k)


def match_motifs(images: np.ndarray, library: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-matching oracle: best (motif, cell) over all patch-aligned windows.

    Returns motif ids (n,) and cells (n, 2) minimising the squared difference.
    """
    n, H, W, C = images.shape
    g = H // MOTIF
    windows = images.reshape(n, g, MOTIF, g, MOTIF, C).transpose(0, 1, 3, 2, 4, 5).reshape(n, g * g, -1)
    lib = library.reshape(len(library), -1)
    # |w - m|^2 = |w|^2 - 2 w.m + |m|^2
    err = ((windows ** 2).sum(-1)[:, :, None] - 2.0 * windows @ lib.T + (lib ** 2).sum(-1)[None, None])
    flat = err.reshape(n, -1).argmin(axis=1)
    cell, motif = np.divmod(flat, len(library))
    return motif, np.stack(np.divmod(cell, g), axis=1)


def generate_synthetic(spec: SyntheticTaskSpec) -> Dataset:
    """Deterministic dataset for ``spec``; raises if the oracle agreement is below ``min_unambiguous``."""
    library = motif_library(spec.n_motifs, spec.library_seed)
    rng = np.random.default_rng([spec.seed, SPLIT_CODES[spec.split]])
    n, S, g = spec.count, spec.image_size, spec.grid
    half = g // 2
    motif = _balanced(rng, n, spec.n_motifs)
    quadrant = _balanced(rng, n, 4)
    # distinct cells inside the quadrant; the first one is the anchor recorded in meta
    picks = np.argsort(rng.random((n, half * half)), axis=1)[:, :spec.copies]
    rows = (quadrant // 2)[:, None] * half + picks // half
    cols = (quadrant % 2)[:, None] * half + picks % half
    cell_row, cell_col = rows[:, 0], cols[:, 0]
    background = 0.5 + rng.uniform(-spec.background_jitter, spec.background_jitter, size=(n, 1, 1, 3))
    images = np.broadcast_to(background, (n, S, S, 3)).copy()
    for i in range(n):
        for cr, cc in zip(rows[i], cols[i]):
            r, c = cr * MOTIF, cc * MOTIF
            images[i, r:r + MOTIF, c:c + MOTIF] = library[motif[i]]
    images += spec.noise * rng.standard_normal(images.shape)
    images = np.clip(np.rint(images * 255.0), 0, 255) / 255.0

    mask = np.zeros((n, g, g), dtype=bool)
    mask[np.arange(n)[:, None], rows, cols] = True
    labels = motif if spec.task == "A" else quadrant
    meta = {
        "motif": motif,
        "quadrant": quadrant,
        "cell": np.stack([cell_row, cell_col], axis=1),
        "motif_mask": mask,
    }
    if n:
        found_motif, found_cell = match_motifs(images, library)
        found = found_motif if spec.task == "A" else quadrant_of(found_cell[:, 0], found_cell[:, 1], g)
        agreement = float((found == labels).mean())
        if agreement < spec.min_unambiguous:
            raise ContractError(
                f"only {agreement:.1%} of labels are recoverable by pixel matching "
                f"(need {spec.min_unambiguous:.0%}); lower the noise level"
            )
        meta["unambiguous_fraction"] = agreement
    return Dataset(images.astype(np.float32), labels, spec.n_classes, split=spec.split, meta=meta)
