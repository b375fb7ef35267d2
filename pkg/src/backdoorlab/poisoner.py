"""Ground-truth backdoor attacks: triggers, dataset poisoning, the ASR metric."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datapipe import LabeledDataset
from .netlab import Classifier
from .numcore import DTYPE, load_segments, save_segments
from .numcore.seeds import make_rng

PATCH_SIZES = (3, 5, 7)


@dataclass
class TriggerSpec:
    """A patch (or full-image) trigger with its placement, mode and target.

    pattern: (s, s, C) values in [0, 1].
    placement: ("fixed", x, y) or ("random",) drawn per image.
    mode: ("replace",) or ("blend", kappa) with kappa in (0, 1].
    """

    pattern: np.ndarray
    placement: tuple
    mode: tuple
    target_label: int

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=DTYPE)
        if self.pattern.ndim != 3 or self.pattern.shape[0] != self.pattern.shape[1]:
            raise ValueError(f"pattern must be square (s, s, C), got {self.pattern.shape}")
        if self.pattern.min() < 0.0 or self.pattern.max() > 1.0:
            raise ValueError("pattern values must lie in [0, 1]")
        if self.mode[0] not in ("replace", "blend"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode[0] == "blend" and not 0.0 < self.mode[1] <= 1.0:
            raise ValueError("blend kappa must be in (0, 1]")
        if self.placement[0] not in ("fixed", "random"):
            raise ValueError(f"unknown placement {self.placement!r}")

    @property
    def size(self) -> int:
        return self.pattern.shape[0]

    def validate_for(self, input_shape: tuple[int, int, int]) -> None:
        h, w, c = input_shape
        s = self.size
        if s > min(h, w):
            raise ValueError(f"pattern of size {s} does not fit in image {input_shape}")
        if self.pattern.shape[2] != c:
            raise ValueError(f"pattern channels {self.pattern.shape[2]} vs image {c}")
        if s not in PATCH_SIZES and (s, s) != (h, w):
            raise ValueError(f"patch size must be one of {PATCH_SIZES} or full-image, got {s}")
        if self.placement[0] == "fixed":
            _, x, y = self.placement
            if not (0 <= x <= h - s and 0 <= y <= w - s):
                raise ValueError(f"fixed placement ({x}, {y}) puts the pattern outside the image")

    def save(self, path_prefix: str | Path) -> None:
        prefix = Path(path_prefix)
        meta = {"placement": list(self.placement), "mode": list(self.mode),
                "target_label": self.target_label}
        prefix.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        save_segments(prefix.with_suffix(".ckpt"), [("pattern", self.pattern)])

    @classmethod
    def load(cls, path_prefix: str | Path) -> "TriggerSpec":
        prefix = Path(path_prefix)
        meta = json.loads(prefix.with_suffix(".json").read_text())
        pattern = dict(load_segments(prefix.with_suffix(".ckpt")))["pattern"]
        return cls(pattern, tuple(meta["placement"]), tuple(meta["mode"]),
                   int(meta["target_label"]))


@dataclass
class PoisonedDataset:
    base: LabeledDataset
    poisoned_indices: np.ndarray
    spec: TriggerSpec
    poison_rate: float
    data: LabeledDataset = field(repr=False, default=None)


def white_square_trigger(size: int, channels: int, target_label: int,
                         placement: tuple = ("fixed", 0, 0)) -> TriggerSpec:
    return TriggerSpec(np.ones((size, size, channels)), placement,
                       ("replace",), target_label)


def noise_blend_trigger(input_shape: tuple[int, int, int], target_label: int,
                        seed: int, kappa: float = 0.2) -> TriggerSpec:
    """Dense pseudo-random full-image pattern blended at low opacity.

    Stand-in for noise-style (imperceptible) triggers; not a reproduction of
    any specific published attack optimizer.
    """
    h, w, c = input_shape
    if h != w:
        raise ValueError("noise trigger requires square images")
    rng = make_rng(seed, "noise-trigger")
    pattern = rng.uniform(0.0, 1.0, size=(h, w, c))
    return TriggerSpec(pattern, ("fixed", 0, 0), ("blend", kappa), target_label)


def apply_trigger(image: np.ndarray, spec: TriggerSpec,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Stamp the trigger onto a copy of the image; pixels stay in [0, 1]."""
    h, w, c = image.shape
    s = spec.size
    if s > min(h, w):
        raise ValueError(f"pattern of size {s} larger than image {image.shape}")
    if spec.placement[0] == "fixed":
        _, x, y = spec.placement
    else:
        if rng is None:
            raise ValueError("random placement requires an rng")
        x = int(rng.integers(0, h - s + 1))
        y = int(rng.integers(0, w - s + 1))
    out = np.array(image, dtype=DTYPE, copy=True)
    window = out[x:x + s, y:y + s, :]
    if spec.mode[0] == "replace":
        window[...] = spec.pattern
    else:
        kappa = spec.mode[1]
        window[...] = np.clip((1.0 - kappa) * window + kappa * spec.pattern, 0.0, 1.0)
    return out


def poison_dataset(data: LabeledDataset, spec: TriggerSpec, poison_rate: float,
                   seed: int) -> PoisonedDataset:
    """Trigger-and-relabel a uniform sample of non-target-label images."""
    if not 0.0 < poison_rate < 1.0:
        raise ValueError(f"poison_rate must be in (0, 1), got {poison_rate}")
    spec.validate_for(data.input_shape)
    count = int(np.floor(poison_rate * len(data) + 0.5))
    if count == 0:
        raise ValueError(f"poison_rate {poison_rate} rounds to zero samples")
    eligible = np.flatnonzero(data.labels != spec.target_label)
    if len(eligible) < count:
        raise ValueError(f"only {len(eligible)} non-target samples for {count} poisons")
    rng = make_rng(seed, "poison-select")
    chosen = np.sort(rng.choice(eligible, size=count, replace=False))
    images = data.images.copy()
    labels = data.labels.copy()
    for k, i in enumerate(chosen):
        images[i] = apply_trigger(data.images[i], spec, make_rng(seed, "poison-place", k))
        labels[i] = spec.target_label
    poisoned = LabeledDataset(images, labels, data.provenance + "/poisoned")
    return PoisonedDataset(data, chosen, spec, poison_rate, poisoned)


def attack_success_rate(model: Classifier, clean_eval: LabeledDataset,
                        perturbation, target_label: int,
                        rng: np.random.Generator | None = None) -> float:
    """Fraction of triggered non-target-label inputs classified as the target.

    `perturbation` is either a TriggerSpec (stamped per image) or a full-image
    additive tensor applied as clip(x + perturbation, 0, 1).
    """
    keep = clean_eval.labels != target_label
    if not keep.any():
        raise ValueError("every sample already carries the target label")
    images = clean_eval.images[keep]
    if isinstance(perturbation, TriggerSpec):
        triggered = np.stack([
            apply_trigger(img, perturbation,
                          make_rng(0, "asr-place", i) if rng is None else rng)
            for i, img in enumerate(images)
        ])
    else:
        pert = np.asarray(perturbation, dtype=DTYPE)
        if pert.shape != images.shape[1:]:
            raise ValueError(f"perturbation {pert.shape} vs image {images.shape[1:]}")
        triggered = np.clip(images + pert, 0.0, 1.0)
    preds = model.predict(triggered)
    return float(np.mean(preds == target_label))
