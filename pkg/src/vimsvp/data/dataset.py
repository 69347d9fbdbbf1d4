"""In-memory image classification datasets and batching."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from vimsvp.errors import ContractError, DimensionError


@dataclass
class Dataset:
    """Images (count, H, W, C) with values in [0, 1] (or standardized) and integer labels.

    ``mean``/``std`` are the per-channel statistics applied by :meth:`standardized`,
    ``None`` while the images are still raw.  ``meta`` carries per-sample side
    information such as synthetic motif placements.
    """

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DimensionError(f"images must be (count, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DimensionError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def standardized_flag(self) -> bool:
        return self.mean is not None

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and std over every pixel of this split."""
        flat = self.images.reshape(-1, self.images.shape[-1]).astype(np.float64)
        std = flat.std(axis=0)
        return flat.mean(axis=0), np.where(std > 0, std, 1.0)

    def standardized(self, mean=None, std=None) -> "Dataset":
        """Copy with (x - mean) / std applied; statistics default to this split's own."""
        if self.standardized_flag:
            raise ContractError("dataset is already standardized")
        if mean is None or std is None:
            mean, std = self.channel_stats()
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        images = ((self.images - mean) / std).astype(self.images.dtype)
        return replace(self, images=images, mean=mean, std=std)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        meta = {k: v[index] for k, v in self.meta.items() if isinstance(v, np.ndarray) and len(v) == len(self)}
        meta.update({k: v for k, v in self.meta.items() if k not in meta})
        return replace(self, images=self.images[index], labels=self.labels[index], meta=meta)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def balanced_indices(labels: np.ndarray, n_classes: int, limit: int) -> np.ndarray:
    """First-in-storage-order indices giving ``limit`` samples spread evenly over classes.

    When ``limit`` does not divide evenly the lowest classes receive one extra.
    """
    if limit < 0:
        raise ContractError("limit must be non-negative")
    per, extra = divmod(limit, n_classes)
    chosen = []
    for k in range(n_classes):
        want = per + (1 if k < extra else 0)
        chosen.append(np.flatnonzero(labels == k)[:want])
    return np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)


def batch_iterator(ds: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0,
                   epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches covering ``ds`` once.

    With ``shuffle`` the order is the permutation drawn from
    ``default_rng(seed + epoch)``, so reusing the same ``epoch`` replays the
    same order and consecutive epochs differ.  The last partial batch is kept.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if len(ds) == 0:
        raise ContractError("cannot iterate over an empty dataset")
    order = np.random.default_rng(seed + epoch).permutation(len(ds)) if shuffle else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]
