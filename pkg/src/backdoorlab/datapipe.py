"""Dataset ingestion (IDX), deterministic splits and the clean holdout."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import DTYPE, load_segments, save_segments
from .numcore.seeds import make_rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """IDX file fails structural validation."""


@dataclass
class LabeledDataset:
    """Images (N, H, W, C) with pixels in [0, 1] and integer labels (N,)."""

    images: np.ndarray
    labels: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, indices: np.ndarray, provenance: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.images[indices], self.labels[indices],
                              provenance if provenance is not None else self.provenance)

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


@dataclass
class SplitSpec:
    holding_ratio: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.holding_ratio <= 1.0:
            raise ValueError(f"holding_ratio must be in (0, 1], got {self.holding_ratio}")


def _read_exact(f, n: int, path) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise IdxFormatError(f"{path}: truncated (wanted {n} bytes, got {len(raw)})")
    return raw


def load_idx(images_path: str | Path, labels_path: str | Path,
             provenance: str | None = None) -> LabeledDataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1] by /255."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(f"{images_path}: magic 0x{magic:08x}, "
                                 f"expected 0x{IDX_IMAGE_MAGIC:08x}")
        raw = _read_exact(f, count * rows * cols, images_path)
        if f.read(1):
            raise IdxFormatError(f"{images_path}: trailing bytes after payload")
    with open(labels_path, "rb") as f:
        magic, lcount = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(f"{labels_path}: magic 0x{magic:08x}, "
                                 f"expected 0x{IDX_LABEL_MAGIC:08x}")
        lraw = _read_exact(f, lcount, labels_path)
        if f.read(1):
            raise IdxFormatError(f"{labels_path}: trailing bytes after payload")
    if count != lcount:
        raise IdxFormatError(f"image count {count} != label count {lcount}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols, 1)
    labels = np.frombuffer(lraw, dtype=np.uint8).astype(np.int64)
    src = provenance if provenance is not None else f"idx:{Path(images_path).name}"
    return LabeledDataset(images.astype(DTYPE) / 255.0, labels, src)


def save_idx(data: LabeledDataset, images_path: str | Path, labels_path: str | Path) -> None:
    """Write the IDX pair back; exact inverse of load_idx on /255-grid pixels."""
    if data.images.shape[3] != 1:
        raise ValueError("IDX export supports single-channel images only")
    n, rows, cols, _ = data.images.shape
    pixels = np.rint(data.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(data.labels.astype(np.uint8).tobytes())


def save_cache(data: LabeledDataset, path: str | Path) -> None:
    save_segments(path, [("images", data.images), ("labels", data.labels.astype(DTYPE))])


def load_cache(path: str | Path, provenance: str = "") -> LabeledDataset:
    seg = dict(load_segments(path))
    return LabeledDataset(seg["images"], seg["labels"].astype(np.int64), provenance)


def holdout_size(holding_ratio: float, train_size: int) -> int:
    """Round-half-up count of clean samples granted to the defender."""
    return int(np.floor(holding_ratio * train_size + 0.5))


def take_clean_holdout(test_set: LabeledDataset, train_size: int,
                       spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Sample the defender's clean holdout from the test set.

    Returns (holdout, remainder); the remainder is kept for evaluation and is
    disjoint from the holdout by construction.
    """
    count = holdout_size(spec.holding_ratio, train_size)
    if count == 0:
        raise ValueError("holdout would be empty; the defender needs at least one sample")
    if count > len(test_set):
        raise ValueError(f"holdout of {count} exceeds test set of {len(test_set)}")
    rng = make_rng(spec.seed, "holdout")
    perm = rng.permutation(len(test_set))
    hold = test_set.subset(np.sort(perm[:count]), provenance=test_set.provenance + "/holdout")
    rest = test_set.subset(np.sort(perm[count:]), provenance=test_set.provenance + "/eval")
    return hold, rest
