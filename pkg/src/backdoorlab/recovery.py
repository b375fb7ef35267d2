"""Trigger recovery: per-threshold generators with a mutual-information bonus.

Each candidate target label gets one generator per confidence threshold; the
generators are trained against the frozen victim to push the label's softmax
probability past the threshold for a whole batch, while a neural MI lower
bound keeps the generated perturbations diverse. Candidates that flip enough
held-out images into the label are collected into the trigger pool.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .datapipe import LabeledDataset
from .netlab import Classifier
from .numcore import ParamVector, Tensor
from .numcore.seeds import derive_seed, make_rng
from .poisoner import attack_success_rate

log = logging.getLogger(__name__)


@dataclass
class RecoveryConfig:
    thresholds: int = 5
    mi_weight: float = 0.1        # weight of the MI bonus in the loss
    asr_threshold: float = 0.9    # pool acceptance bar
    batch_size: int = 64
    steps: int = 400
    noise_dim: int = 32
    lr: float = 0.05
    estimator_lr: float = 0.2     # the statistics net needs larger steps than the generator
    momentum: float = 0.9
    mean_samples: int = 256       # noise draws averaged into the candidate
    seed: int = 0

    def __post_init__(self):
        if self.thresholds < 1:
            raise ValueError("thresholds must be >= 1")
        if not 0.0 < self.asr_threshold <= 1.0:
            raise ValueError("asr_threshold must be in (0, 1]")
        if self.mi_weight < 0.0:
            raise ValueError("mi_weight must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


def make_thresholds(n: int) -> list[float]:
    """Evenly spaced thresholds i/n for i = 1..n (right-closed grid on (0, 1])."""
    if n < 1:
        raise ValueError("need at least one threshold")
    return [(i + 1) / n for i in range(n)]


def _mlp_init(prefix: str, dims: list[int], seed: int, tag: str) -> ParamVector:
    rng = make_rng(seed, "mlp-init", tag)
    pv = ParamVector()
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        bound = np.sqrt(1.0 / a)
        pv.add(f"{prefix}.dense{i + 1}.w", rng.uniform(-bound, bound, size=(a, b)))
        pv.add(f"{prefix}.dense{i + 1}.b", np.zeros(b))
    return pv


def _mlp_forward(pv: ParamVector, prefix: str, x: Tensor, n_layers: int,
                 final: str) -> Tensor:
    h = x
    for i in range(n_layers):
        w = pv.tensor(f"{prefix}.dense{i + 1}.w")
        b = pv.tensor(f"{prefix}.dense{i + 1}.b")
        h = nc.matmul(h, w) + b
        if i < n_layers - 1:
            h = nc.relu(h)
    if final == "tanh":
        h = nc.tanh(h)
    return h


class Generator:
    """MLP mapping noise vectors to full-image perturbations in [-1, 1]."""

    def __init__(self, output_shape: tuple[int, int, int], noise_dim: int,
                 seed: int, hidden: tuple[int, int] = (256, 512)):
        self.output_shape = tuple(output_shape)
        self.noise_dim = noise_dim
        out = int(np.prod(output_shape))
        self.dims = [noise_dim, *hidden, out]
        self.params = _mlp_init("gen", self.dims, seed, "generator")

    def forward(self, noise: Tensor) -> Tensor:
        flat = _mlp_forward(self.params, "gen", noise, len(self.dims) - 1, "tanh")
        return nc.reshape(flat, (noise.shape[0], *self.output_shape))

    def mean_perturbation(self, n_samples: int, rng: np.random.Generator) -> np.ndarray:
        self.params.set_requires_grad(False)
        noise = Tensor(rng.normal(size=(n_samples, self.noise_dim)))
        return self.forward(noise).data.mean(axis=0)


class MIEstimator:
    """Statistics network T(a, b) for the Donsker-Varadhan lower bound."""

    def __init__(self, dim_a: int, dim_b: int, seed: int, hidden: int = 128):
        self.dims = [dim_a + dim_b, hidden, 1]
        self.params = _mlp_init("mi", self.dims, seed, "mi-estimator")

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[0] != b.shape[0]:
            raise nc.ShapeError(f"MI estimator: batch {a.shape[0]} vs {b.shape[0]}")
        return _mlp_forward(self.params, "mi", nc.concat(a, b, axis=1),
                            len(self.dims) - 1, "linear")


def mine_estimate(estimator: MIEstimator, joint_a: Tensor, joint_b: Tensor,
                  marginal_a: Tensor, marginal_b: Tensor) -> Tensor:
    """Donsker-Varadhan bound: E_joint[T] - log E_marginal[exp T]."""
    n = joint_a.shape[0]
    if n < 2 or marginal_a.shape[0] < 2:
        raise ValueError("MI estimation needs batches of at least 2")
    if marginal_a.shape[0] != marginal_b.shape[0]:
        raise nc.ShapeError("marginal batches differ in size")
    t_joint = estimator.forward(joint_a, joint_b)
    t_marg = estimator.forward(marginal_a, marginal_b)
    log_mean_exp = nc.logsumexp(t_marg) - float(np.log(marginal_a.shape[0]))
    return nc.tmean(t_joint) - log_mean_exp


def recovery_loss(model: Classifier, gen: Generator, estimator: MIEstimator,
                  images: np.ndarray, threshold: float, mi_weight: float,
                  target_label: int, noise: Tensor, noise_marginal: Tensor) -> Tensor:
    """Hinge on the target-label softmax probability minus the MI bonus.

    The victim's parameters stay off the gradient tape; perturbed images are
    clipped to [0, 1] before the model sees them.
    """
    if not 0 <= target_label < model.num_classes:
        raise ValueError(f"label {target_label} outside label space of size {model.num_classes}")
    b = len(images)
    pert = gen.forward(noise)
    x = nc.clip(Tensor(images) + pert, 0.0, 1.0)
    logits = model.forward(x, params_require_grad=False)
    probs = nc.softmax(logits)
    p_target = nc.gather_labels(probs, np.full(b, target_label))
    hinge = nc.tmean(nc.relu(float(threshold) - p_target))
    if mi_weight == 0.0:
        return hinge
    flat = nc.reshape(pert, (b, -1))
    mi = mine_estimate(estimator, flat, noise, flat, noise_marginal)
    return hinge - mi_weight * mi


@dataclass
class PoolEntry:
    perturbation: np.ndarray
    target_label: int
    asr: float
    threshold: float


@dataclass
class TriggerPool:
    entries: list[PoolEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def modal_label(self) -> int | None:
        if not self.entries:
            return None
        labels = [e.target_label for e in self.entries]
        return int(np.bincount(labels).argmax())

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = [{"index": i, "target_label": e.target_label, "asr": e.asr,
                     "threshold": e.threshold} for i, e in enumerate(self.entries)]
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
        nc.save_segments(out_dir / "perturbations.ckpt",
                         [(f"entry{i}", e.perturbation) for i, e in enumerate(self.entries)])

    @classmethod
    def load(cls, out_dir: str | Path) -> "TriggerPool":
        out_dir = Path(out_dir)
        manifest = json.loads((out_dir / "manifest.json").read_text())
        segs = dict(nc.load_segments(out_dir / "perturbations.ckpt")) if manifest else {}
        entries = [PoolEntry(segs[f"entry{m['index']}"], int(m["target_label"]),
                             float(m["asr"]), float(m["threshold"])) for m in manifest]
        return cls(entries)


def recover_for_label(model: Classifier, holdout: LabeledDataset, target_label: int,
                      cfg: RecoveryConfig) -> list[tuple[float, np.ndarray]]:
    """Train one generator per threshold; return (threshold, mean perturbation)."""
    if len(holdout) == 0:
        raise ValueError("holdout is empty")
    theta_before = model.params.flatten()
    image_dim = int(np.prod(model.input_shape))
    candidates: list[tuple[float, np.ndarray]] = []
    for i, eps in enumerate(make_thresholds(cfg.thresholds)):
        job_seed = derive_seed(cfg.seed, "recover", target_label, i)
        gen = Generator(model.input_shape, cfg.noise_dim, job_seed)
        est = MIEstimator(image_dim, cfg.noise_dim, derive_seed(job_seed, "mi"))
        joint = ParamVector(gen.params.segments + est.params.segments)
        n_gen = len(gen.params.segments)
        # one backward pass, two step sizes: at the generator's small lr the
        # statistics net never learns and the MI bonus is inert
        gen_opt = nc.MomentumSGD(gen.params, lr=cfg.lr, momentum=cfg.momentum)
        est_opt = nc.MomentumSGD(est.params, lr=cfg.estimator_lr, momentum=cfg.momentum)
        rng = make_rng(job_seed, "opt")
        diverged = False
        for _ in range(cfg.steps):
            idx = rng.choice(len(holdout), size=min(cfg.batch_size, len(holdout)),
                             replace=len(holdout) < cfg.batch_size)
            noise = Tensor(rng.normal(size=(len(idx), cfg.noise_dim)))
            noise_marg = Tensor(rng.normal(size=(len(idx), cfg.noise_dim)))
            joint.set_requires_grad(True)
            try:
                loss = recovery_loss(model, gen, est, holdout.images[idx], eps,
                                     cfg.mi_weight, target_label, noise, noise_marg)
            except nc.NumericError:
                diverged = True
                break
            if not np.isfinite(loss.data).all():
                diverged = True
                break
            grads = nc.backward(loss, joint)
            gen_opt.step(ParamVector(grads.segments[:n_gen]))
            est_opt.step(ParamVector(grads.segments[n_gen:]))
        if diverged:
            log.warning("recovery diverged for label %d at threshold %.3f; skipping",
                        target_label, eps)
            continue
        pert = gen.mean_perturbation(cfg.mean_samples, make_rng(job_seed, "mean"))
        candidates.append((eps, pert))
    if not np.array_equal(model.params.flatten(), theta_before):
        raise RuntimeError("victim parameters changed during recovery")
    return candidates


def recover_all(model: Classifier, holdout: LabeledDataset,
                cfg: RecoveryConfig) -> TriggerPool:
    """Run recovery for every label and keep candidates that clear the ASR bar."""
    pool = TriggerPool()
    for y_p in range(model.num_classes):
        if (holdout.labels != y_p).sum() == 0:
            log.warning("holdout has only label %d samples; skipping that label", y_p)
            continue
        for eps, pert in recover_for_label(model, holdout, y_p, cfg):
            asr = attack_success_rate(model, holdout, pert, y_p)
            if asr >= cfg.asr_threshold:
                pool.entries.append(PoolEntry(pert, y_p, asr, eps))
    return pool


def fit_mi_estimator(a: np.ndarray, b: np.ndarray, steps: int = 2000,
                     batch_size: int = 256, lr: float = 0.02, momentum: float = 0.9,
                     seed: int = 0, hidden: int = 128) -> tuple[MIEstimator, float]:
    """Train a statistics network on paired samples; return the final DV bound.

    The bound is evaluated on the full sample with a fixed derangement-style
    shuffle for the marginal term.
    """
    a = np.asarray(a, dtype=nc.DTYPE)
    b = np.asarray(b, dtype=nc.DTYPE)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if len(a) != len(b):
        raise ValueError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    est = MIEstimator(a.shape[1], b.shape[1], seed, hidden=hidden)
    opt = nc.MomentumSGD(est.params, lr=lr, momentum=momentum)
    rng = make_rng(seed, "mine-fit")
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        shuf = rng.permutation(idx)
        est.params.set_requires_grad(True)
        bound = mine_estimate(est, Tensor(a[idx]), Tensor(b[idx]),
                              Tensor(a[idx]), Tensor(b[shuf]))
        grads = nc.backward(nc.scale(bound, -1.0), est.params)
        opt.step(grads)
    est.params.set_requires_grad(False)
    shuf = make_rng(seed, "mine-eval").permutation(n)
    final = mine_estimate(est, Tensor(a), Tensor(b), Tensor(a), Tensor(b[shuf]))
    return est, final.item()
