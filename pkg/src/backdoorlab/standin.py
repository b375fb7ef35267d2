"""Bundled desk-scale digits dataset for environments without MNIST files.

Expands scikit-learn's 8x8 handwritten digits to 28x28 IDX files with small
random shifts so arbitrary train/test sizes are available. Source images are
split before expansion, so train and test never share a source digit.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.datasets import load_digits

from .datapipe import LabeledDataset, save_idx
from .numcore import DTYPE
from .numcore.seeds import make_rng

_TEST_SOURCE_FRACTION = 0.25


def _expand(images8: np.ndarray, labels: np.ndarray, size: int,
            rng: np.random.Generator) -> LabeledDataset:
    idx = rng.integers(0, len(images8), size=size)
    out = np.zeros((size, 28, 28, 1), dtype=DTYPE)
    for k, i in enumerate(idx):
        img = ndimage.zoom(images8[i], 22.0 / 8.0, order=1)  # 8x8 -> 22x22
        # jitter around the center, keeping a black margin on every side as
        # real MNIST does (patch triggers must not overlap digit strokes)
        dy, dx = rng.integers(2, 5, size=2)
        out[k, dy:dy + 22, dx:dx + 22, 0] = img
    # snap onto the /255 grid so IDX round-trips are bit-exact
    out = np.rint(np.clip(out, 0.0, 1.0) * 255.0) / 255.0
    return LabeledDataset(out, labels[idx], "standin-digits")


def make_digits_standin(out_dir: str | Path, train_size: int = 10000,
                        test_size: int = 2000, seed: int = 0) -> dict[str, Path]:
    """Write train/test IDX pairs under out_dir and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = load_digits()
    images8 = raw.images.astype(DTYPE) / 16.0
    labels = raw.target.astype(np.int64)

    rng = make_rng(seed, "standin")
    perm = rng.permutation(len(images8))
    n_test_src = int(len(images8) * _TEST_SOURCE_FRACTION)
    test_src, train_src = perm[:n_test_src], perm[n_test_src:]

    train = _expand(images8[train_src], labels[train_src], train_size, make_rng(seed, "standin", "train"))
    test = _expand(images8[test_src], labels[test_src], test_size, make_rng(seed, "standin", "test"))

    paths = {
        "train_images": out_dir / "train-images-idx3-ubyte",
        "train_labels": out_dir / "train-labels-idx1-ubyte",
        "test_images": out_dir / "t10k-images-idx3-ubyte",
        "test_labels": out_dir / "t10k-labels-idx1-ubyte",
    }
    save_idx(train, paths["train_images"], paths["train_labels"])
    save_idx(test, paths["test_images"], paths["test_labels"])
    return paths
