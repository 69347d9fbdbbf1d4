"""Reader and writer for the CIFAR-10 binary record layout.

Each record is 3073 bytes: one label byte followed by 1024 red, 1024 green and
1024 blue bytes, each plane row-major 32x32.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from vimsvp.data.dataset import Dataset, balanced_indices
from vimsvp.errors import CorruptRecordError, FormatError

SIDE = 32
PIXELS = SIDE * SIDE * 3
RECORD_BYTES = PIXELS + 1
N_CLASSES = 10

TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)


def parse_records(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode raw record bytes into uint8 images (n, 32, 32, 3) and labels (n,)."""
    if len(raw) % RECORD_BYTES:
        n_full = len(raw) // RECORD_BYTES
        raise FormatError(
            f"{source}: length {len(raw)} is not a multiple of {RECORD_BYTES}; "
            f"expected {n_full * RECORD_BYTES} or {(n_full + 1) * RECORD_BYTES} bytes"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= N_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise CorruptRecordError(
            f"{source}: record {i} at byte offset {i * RECORD_BYTES} has label {labels[i]} (must be < {N_CLASSES})"
        )
    images = rec[:, 1:].reshape(-1, 3, SIDE, SIDE).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def encode_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_records` for uint8 images (n, 32, 32, 3)."""
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.shape[1:] != (SIDE, SIDE, 3):
        raise FormatError(f"expected uint8 images of shape (n, 32, 32, 3), got {images.dtype} {images.shape}")
    labels = np.asarray(labels)
    if len(labels) != len(images) or (labels < 0).any() or (labels >= 256).any():
        raise FormatError("labels must be one byte per image")
    rec = np.empty((len(images), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images.transpose(0, 3, 1, 2).reshape(len(images), PIXELS)
    return rec.tobytes()


def write_cifar10_binary(path, images: np.ndarray, labels: np.ndarray) -> None:
    Path(path).write_bytes(encode_records(images, labels))


def to_uint8(images: np.ndarray) -> np.ndarray:
    """Quantise [0, 1] float images to bytes."""
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def load_cifar10_binary(directory, split: str = "train", limit: int | None = None,
                        dtype=np.float32) -> Dataset:
    """Load a CIFAR-10 split from ``directory``.

    ``split`` is "train" (data_batch_1..5) or "test" (test_batch); files that
    are absent are skipped but at least one must exist.  A single ``.bin``
    file path is also accepted.  ``limit`` keeps a class-balanced prefix.
    """
    directory = Path(directory)
    if directory.is_file():
        paths = [directory]
    else:
        if not directory.is_dir():
            raise FileNotFoundError(f"dataset path does not exist: {directory}")
        names = {"train": TRAIN_FILES, "test": TEST_FILES}.get(split)
        if names is None:
            raise FormatError(f"unknown split {split!r}; expected 'train' or 'test'")
        paths = [directory / n for n in names if (directory / n).exists()]
        if not paths:
            raise FileNotFoundError(f"no {split} batch files under {directory}")
    imgs, labs = [], []
    for p in paths:
        im, lb = parse_records(p.read_bytes(), source=os.fspath(p))
        imgs.append(im)
        labs.append(lb)
    images = np.concatenate(imgs)
    labels = np.concatenate(labs)
    if limit is not None:
        keep = balanced_indices(labels, N_CLASSES, limit)
        images, labels = images[keep], labels[keep]
    return Dataset((images.astype(np.float64) / 255.0).astype(dtype), labels, N_CLASSES, split=split)
