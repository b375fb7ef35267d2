"""Victim classifier architectures, supervised training and evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .datapipe import LabeledDataset
from .numcore import ParamVector, Tensor
from .numcore.seeds import make_rng


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Classifier:
    """Declarative layer list plus its parameter vector."""

    def __init__(self, arch: list[dict], params: ParamVector,
                 input_shape: tuple[int, int, int], num_classes: int):
        self.arch = arch
        self.params = params
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)

    def forward(self, images, params_require_grad: bool = False) -> Tensor:
        """Logits for a batch; `images` may be an ndarray or a graph Tensor."""
        self.params.set_requires_grad(params_require_grad)
        h = images if isinstance(images, Tensor) else Tensor(images)
        if h.shape[1:] != self.input_shape:
            raise nc.ShapeError(f"forward: batch shape {h.shape} vs input {self.input_shape}")
        for layer in self.arch:
            kind = layer["kind"]
            if kind == "conv":
                w = self.params.tensor(layer["name"] + ".w")
                b = self.params.tensor(layer["name"] + ".b")
                h = nc.conv2d(h, w, b, stride=layer.get("stride", 1))
            elif kind == "dense":
                w = self.params.tensor(layer["name"] + ".w")
                b = self.params.tensor(layer["name"] + ".b")
                h = nc.matmul(h, w) + b
            elif kind == "relu":
                h = nc.relu(h)
            elif kind == "maxpool":
                h = nc.maxpool2d(h)
            elif kind == "flatten":
                h = nc.reshape(h, (h.shape[0], -1))
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return h

    def logits(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        out = np.empty((len(images), self.num_classes), dtype=nc.DTYPE)
        for lo in range(0, len(images), batch_size):
            out[lo:lo + batch_size] = self.forward(images[lo:lo + batch_size]).data
        return out

    def predict(self, images: np.ndarray) -> np.ndarray:
        # np.argmax breaks ties toward the smaller label index
        return np.argmax(self.logits(images), axis=1)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        nc.save_params(path, self.params)
        desc = {"arch": self.arch, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes}
        path.with_suffix(path.suffix + ".arch.json").write_text(json.dumps(desc, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Classifier":
        path = Path(path)
        desc = json.loads(path.with_suffix(path.suffix + ".arch.json").read_text())
        params = nc.load_params(path)
        return cls(desc["arch"], params, tuple(desc["input_shape"]), desc["num_classes"])


def _init_dense(pv: ParamVector, name: str, n_in: int, n_out: int,
                rng: np.random.Generator) -> None:
    bound = np.sqrt(1.0 / n_in)
    pv.add(name + ".w", rng.uniform(-bound, bound, size=(n_in, n_out)))
    pv.add(name + ".b", np.zeros(n_out))


def _init_conv(pv: ParamVector, name: str, k: int, c_in: int, c_out: int,
               rng: np.random.Generator) -> None:
    fan_in = k * k * c_in
    bound = np.sqrt(1.0 / fan_in)
    pv.add(name + ".w", rng.uniform(-bound, bound, size=(k, k, c_in, c_out)))
    pv.add(name + ".b", np.zeros(c_out))


def build_classifier(kind: str, input_shape: tuple[int, int, int],
                     num_classes: int, seed: int,
                     conv_channels: tuple[int, int] = (8, 16),
                     hidden: int = 64) -> Classifier:
    """Construct a small CNN or MLP with fan-in-scaled uniform init."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    h, w, c = input_shape
    if h < 1 or w < 1 or c < 1:
        raise ValueError(f"bad input_shape {input_shape}")
    rng = make_rng(seed, "init", kind)
    pv = ParamVector()
    if kind == "small_cnn":
        c1, c2 = conv_channels
        h1, w1 = h - 2, w - 2          # conv 3x3
        h2, w2 = h1 // 2, w1 // 2      # pool
        h3, w3 = h2 - 2, w2 - 2        # conv 3x3
        h4, w4 = h3 // 2, w3 // 2      # pool
        if min(h4, w4) < 1:
            raise ValueError(f"input_shape {input_shape} too small for the CNN layer stack")
        _init_conv(pv, "conv1", 3, c, c1, rng)
        _init_conv(pv, "conv2", 3, c1, c2, rng)
        _init_dense(pv, "dense1", h4 * w4 * c2, hidden, rng)
        _init_dense(pv, "dense2", hidden, num_classes, rng)
        arch = [
            {"kind": "conv", "name": "conv1", "stride": 1},
            {"kind": "relu"},
            {"kind": "maxpool"},
            {"kind": "conv", "name": "conv2", "stride": 1},
            {"kind": "relu"},
            {"kind": "maxpool"},
            {"kind": "flatten"},
            {"kind": "dense", "name": "dense1"},
            {"kind": "relu"},
            {"kind": "dense", "name": "dense2"},
        ]
    elif kind == "mlp":
        _init_dense(pv, "dense1", h * w * c, hidden, rng)
        _init_dense(pv, "dense2", hidden, num_classes, rng)
        arch = [
            {"kind": "flatten"},
            {"kind": "dense", "name": "dense1"},
            {"kind": "relu"},
            {"kind": "dense", "name": "dense2"},
        ]
    else:
        raise ValueError(f"unknown classifier kind {kind!r}")
    return Classifier(arch, pv, input_shape, num_classes)


def train(model: Classifier, data: LabeledDataset,
          cfg: TrainConfig) -> tuple[Classifier, list[dict]]:
    """Momentum-SGD training on cross-entropy; returns per-epoch history."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if data.labels.min() < 0 or data.labels.max() >= model.num_classes:
        raise ValueError("labels outside the model's label space")
    opt = nc.MomentumSGD(model.params, lr=cfg.lr, momentum=cfg.momentum) \
        if cfg.lr > 0 else None
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        rng = make_rng(cfg.seed, "train-shuffle", epoch)
        order = rng.permutation(len(data))
        losses = []
        for lo in range(0, len(data), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            logits = model.forward(data.images[idx], params_require_grad=True)
            loss = nc.softmax_cross_entropy(logits, data.labels[idx])
            losses.append(loss.item())
            if opt is not None:
                grads = nc.backward(loss, model.params)
                opt.step(grads)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "acc": accuracy(model, data)})
    model.params.set_requires_grad(False)
    return model, history


def accuracy(model: Classifier, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(model.predict(data.images) == data.labels))


# ---------------------------------------------------------------------------
# Vectorized per-sample gradient magnitudes (for the unlearning penalty)
# ---------------------------------------------------------------------------

def per_sample_abs_grad_mean(model: Classifier, images: np.ndarray,
                             labels: np.ndarray, chunk: int = 128) -> dict[str, np.ndarray]:
    """Mean over samples of |d CE_sample / d theta|, per parameter segment.

    Walks the layer list directly so per-sample gradients stay vectorized;
    for dense layers the rank-1 structure makes the absolute value factor
    exactly, for conv layers one einsum keeps the sample axis.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(images)
    if n == 0:
        raise ValueError("need at least one sample")
    acc = {name: np.zeros_like(t.data) for name, t in model.params.segments}
    for lo in range(0, n, chunk):
        _accumulate_abs_grads(model, images[lo:lo + chunk], labels[lo:lo + chunk], acc)
    return {k: v / n for k, v in acc.items()}


def _accumulate_abs_grads(model: Classifier, x: np.ndarray, y: np.ndarray,
                          acc: dict[str, np.ndarray]) -> None:
    B = len(x)
    h = np.asarray(x, dtype=nc.DTYPE)
    cache = []
    for layer in model.arch:
        kind = layer["kind"]
        if kind == "conv":
            w = model.params.tensor(layer["name"] + ".w").data
            b = model.params.tensor(layer["name"] + ".b").data
            s = layer.get("stride", 1)
            kh, kw, cin, cout = w.shape
            ho = (h.shape[1] - kh) // s + 1
            wo = (h.shape[2] - kw) // s + 1
            win = np.lib.stride_tricks.sliding_window_view(h, (kh, kw), axis=(1, 2))
            win = win[:, ::s, ::s]
            cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B, ho * wo, kh * kw * cin)
            out = (cols @ w.reshape(kh * kw * cin, cout)).reshape(B, ho, wo, cout) + b
            cache.append((layer, {"cols": cols, "in_shape": h.shape, "ho": ho, "wo": wo}))
            h = out
        elif kind == "dense":
            w = model.params.tensor(layer["name"] + ".w").data
            b = model.params.tensor(layer["name"] + ".b").data
            cache.append((layer, {"inp": h}))
            h = h @ w + b
        elif kind == "relu":
            cache.append((layer, {"mask": h > 0}))
            h = h * (h > 0)
        elif kind == "maxpool":
            Bq, H, W, C = h.shape
            ho, wo = H // 2, W // 2
            t = h[:, :ho * 2, :wo * 2, :].reshape(Bq, ho, 2, wo, 2, C)
            t = t.transpose(0, 1, 3, 2, 4, 5).reshape(Bq, ho, wo, 4, C)
            idx = t.argmax(axis=3)
            h = np.take_along_axis(t, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
            cache.append((layer, {"idx": idx, "in_shape": (Bq, H, W, C)}))
        elif kind == "flatten":
            cache.append((layer, {"in_shape": h.shape}))
            h = h.reshape(B, -1)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")

    # per-sample CE gradient at the logits: softmax - onehot (no 1/B)
    z = h - h.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    d = p
    d[np.arange(B), y] -= 1.0

    for layer, ctx in reversed(cache):
        kind = layer["kind"]
        if kind == "dense":
            w = model.params.tensor(layer["name"] + ".w").data
            inp = ctx["inp"]
            acc[layer["name"] + ".w"] += np.abs(inp).T @ np.abs(d)
            acc[layer["name"] + ".b"] += np.abs(d).sum(axis=0)
            d = d @ w.T
        elif kind == "conv":
            w = model.params.tensor(layer["name"] + ".w").data
            s = layer.get("stride", 1)
            kh, kw, cin, cout = w.shape
            ho, wo = ctx["ho"], ctx["wo"]
            dflat = d.reshape(B, ho * wo, cout)
            per = np.einsum("bpk,bpo->bko", ctx["cols"], dflat)
            acc[layer["name"] + ".w"] += np.abs(per).sum(axis=0).reshape(w.shape)
            acc[layer["name"] + ".b"] += np.abs(dflat.sum(axis=1)).sum(axis=0)
            gcols = (dflat @ w.reshape(kh * kw * cin, cout).T).reshape(B, ho, wo, kh, kw, cin)
            gx = np.zeros(ctx["in_shape"], dtype=nc.DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + s * ho:s, j:j + s * wo:s, :] += gcols[:, :, :, i, j, :]
            d = gx
        elif kind == "relu":
            d = d * ctx["mask"]
        elif kind == "maxpool":
            Bq, H, W, C = ctx["in_shape"]
            ho, wo = H // 2, W // 2
            gt = np.zeros((Bq, ho, wo, 4, C), dtype=nc.DTYPE)
            np.put_along_axis(gt, ctx["idx"][:, :, :, None, :], d[:, :, :, None, :], axis=3)
            gt = gt.reshape(Bq, ho, wo, 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
            gx = np.zeros((Bq, H, W, C), dtype=nc.DTYPE)
            gx[:, :ho * 2, :wo * 2, :] = gt.reshape(Bq, ho * 2, wo * 2, C)
            d = gx
        elif kind == "flatten":
            d = d.reshape(ctx["in_shape"])
