"""Backdoor erasure by gradient-ascent unlearning with a weighted L1 anchor.

The unlearning loss descends clean cross-entropy, ascends backdoor
cross-entropy (via the minus sign) and pays a per-dimension L1 penalty for
drifting from the pre-unlearning parameters; the penalty weights are the mean
absolute per-sample clean gradients, recomputed every iteration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .datapipe import LabeledDataset
from .netlab import Classifier, TrainConfig, accuracy, per_sample_abs_grad_mean, train
from .numcore import Tensor
from .numcore.seeds import make_rng
from .poisoner import attack_success_rate
from .recovery import TriggerPool


@dataclass
class UnlearnConfig:
    alpha: float = 1.0
    beta: float = 1.0
    max_iterations: int = 50
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    asr_target: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class PenaltyWeights:
    """Nonnegative per-dimension weights, stored per parameter segment."""

    by_segment: dict[str, np.ndarray]

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.by_segment.values()])


@dataclass
class UnlearnTrace:
    records: list[dict] = field(default_factory=list)

    def to_csv(self, path: str | Path, num_classes: int) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "asr", "acc", "loss"]
                            + [f"h{k}" for k in range(num_classes)])
            for r in self.records:
                writer.writerow([r["iteration"], r["asr"], r["acc"], r["loss"]]
                                + list(r["hist"]))


def penalty_weights(model: Classifier, clean_set: LabeledDataset) -> PenaltyWeights:
    """Mean of |per-sample clean CE gradient| for every parameter dimension."""
    if len(clean_set) == 0:
        raise ValueError("clean set is empty")
    return PenaltyWeights(per_sample_abs_grad_mean(model, clean_set.images,
                                                   clean_set.labels))


def _drift_penalty(model: Classifier, theta0: dict[str, np.ndarray],
                   omega: PenaltyWeights) -> Tensor:
    total = None
    for name, p in model.params.segments:
        w = omega.by_segment[name]
        if w.shape != p.data.shape:
            raise nc.ShapeError(f"penalty weights for {name!r}: {w.shape} vs {p.data.shape}")
        term = nc.tsum(nc.mul(Tensor(w), nc.absolute(p - Tensor(theta0[name]))))
        total = term if total is None else total + term
    return total


def unlearn_loss(model: Classifier, clean_batch: tuple[np.ndarray, np.ndarray],
                 backdoor_batch: tuple[np.ndarray, np.ndarray],
                 theta0: dict[str, np.ndarray], omega: PenaltyWeights,
                 alpha: float, beta: float) -> Tensor:
    """alpha*(CE_clean - CE_backdoor) + beta * sum_k omega_k |theta_k - theta0_k|."""
    xc, yc = clean_batch
    xb, yb = backdoor_batch
    ce_clean = nc.softmax_cross_entropy(model.forward(xc, params_require_grad=True), yc)
    ce_back = nc.softmax_cross_entropy(model.forward(xb, params_require_grad=True), yb)
    loss = nc.scale(ce_clean - ce_back, alpha)
    if beta != 0.0:
        loss = loss + nc.scale(_drift_penalty(model, theta0, omega), beta)
    return loss


def naive_unlearn_loss(model: Classifier,
                       backdoor_batch: tuple[np.ndarray, np.ndarray]) -> Tensor:
    """Negated backdoor cross-entropy; the catastrophic-forgetting baseline."""
    xb, yb = backdoor_batch
    return nc.scale(nc.softmax_cross_entropy(model.forward(xb, params_require_grad=True), yb), -1.0)


def build_backdoor_batch(clean_set: LabeledDataset, pool: TriggerPool,
                         batch_size: int, rng: np.random.Generator
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Clean images plus sampled pool perturbations, labeled with the pool label."""
    if len(pool) == 0:
        raise ValueError("trigger pool is empty")
    img_idx = rng.integers(0, len(clean_set), size=batch_size)
    ent_idx = rng.integers(0, len(pool), size=batch_size)
    images = np.empty((batch_size, *clean_set.input_shape), dtype=nc.DTYPE)
    labels = np.empty(batch_size, dtype=np.int64)
    for k in range(batch_size):
        e = pool.entries[ent_idx[k]]
        images[k] = np.clip(clean_set.images[img_idx[k]] + e.perturbation, 0.0, 1.0)
        labels[k] = e.target_label
    return images, labels


def _pool_metrics(model: Classifier, clean_set: LabeledDataset,
                  pool: TriggerPool) -> tuple[float, np.ndarray]:
    """Worst per-entry ASR on the clean set plus the pooled prediction histogram."""
    asrs = []
    hist = np.zeros(model.num_classes, dtype=np.int64)
    for e in pool.entries:
        keep = clean_set.labels != e.target_label
        triggered = np.clip(clean_set.images[keep] + e.perturbation, 0.0, 1.0)
        preds = model.predict(triggered)
        asrs.append(float(np.mean(preds == e.target_label)))
        hist += np.bincount(preds, minlength=model.num_classes)
    return max(asrs), hist


def unlearn(model: Classifier, pool: TriggerPool, clean_set: LabeledDataset,
            cfg: UnlearnConfig, mode: str = "penalty") -> tuple[Classifier, UnlearnTrace]:
    """Erase the pooled triggers; returns the purified model and its trace.

    mode "penalty" uses the weighted loss; mode "naive" ascends plain backdoor
    cross-entropy (kept as the catastrophic-forgetting baseline).
    """
    if len(pool) == 0:
        raise ValueError("trigger pool is empty: recovery found no trigger, nothing to unlearn")
    if len(clean_set) == 0:
        raise ValueError("clean set is empty")
    if mode not in ("penalty", "naive"):
        raise ValueError(f"unknown mode {mode!r}")
    theta0 = model.params.snapshot()
    opt = nc.MomentumSGD(model.params, lr=cfg.lr, momentum=cfg.momentum)
    rng = make_rng(cfg.seed, "unlearn")
    trace = UnlearnTrace()

    asr, hist = _pool_metrics(model, clean_set, pool)
    trace.records.append({"iteration": 0, "asr": asr,
                          "acc": accuracy(model, clean_set),
                          "loss": float("nan"), "hist": hist})
    for j in range(cfg.max_iterations):
        if asr <= cfg.asr_target:
            break
        xb = build_backdoor_batch(clean_set, pool, cfg.batch_size, rng)
        if mode == "naive":
            loss = naive_unlearn_loss(model, xb)
        else:
            omega = penalty_weights(model, clean_set)
            ci = rng.integers(0, len(clean_set), size=min(cfg.batch_size, len(clean_set)))
            xc = (clean_set.images[ci], clean_set.labels[ci])
            loss = unlearn_loss(model, xc, xb, theta0, omega, cfg.alpha, cfg.beta)
        grads = nc.backward(loss, model.params)
        opt.step(grads)
        asr, hist = _pool_metrics(model, clean_set, pool)
        trace.records.append({"iteration": j + 1, "asr": asr,
                              "acc": accuracy(model, clean_set),
                              "loss": loss.item(), "hist": hist})
    model.params.set_requires_grad(False)
    return model, trace


def finetune_baseline(model: Classifier, clean_set: LabeledDataset,
                      epochs: int, lr: float, batch_size: int = 128,
                      momentum: float = 0.9, seed: int = 0) -> Classifier:
    """Continued clean-data training, the weakest comparison defense."""
    if epochs == 0:
        return model
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr,
                      momentum=momentum, seed=seed)
    model, _ = train(model, clean_set, cfg)
    return model
