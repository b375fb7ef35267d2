"""Dense tensors with reverse-mode automatic differentiation.

The whole project runs on float64; mixing widths is forbidden so that
finite-difference gradient checks are reproducible. The operation graph is
rebuilt on every forward pass and discarded after one backward pass.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NumericError(ValueError):
    """An operand or result contains NaN or Inf."""


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericError(f"{op}: non-finite values in operand")


class Tensor:
    """A dense float64 array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: Sequence["Tensor"] = (),
                 backward: Callable[[np.ndarray], None] | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(()))

    def accumulate(self, g: np.ndarray) -> None:
        # first touch adopts the array; later touches allocate a fresh sum so
        # adopted buffers shared with sibling nodes are never mutated
        if self.grad is None:
            self.grad = g if g.shape == self.data.shape else np.broadcast_to(g, self.data.shape)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` to undo numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Run one reverse pass from a scalar loss, accumulating .grad fields."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss has shape {loss.shape}, expected scalar")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("add", a.data, b.data)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(data, parents=(a, b), backward=bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("mul", a.data, b.data)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(data, parents=(a, b), backward=bwd)


def scale(a: Tensor, c: float) -> Tensor:
    _check_finite("scale", a.data)
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return Tensor(a.data * c, parents=(a,), backward=bwd)


def relu(a: Tensor) -> Tensor:
    _check_finite("relu", a.data)
    mask = a.data > 0

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * mask)

    return Tensor(a.data * mask, parents=(a,), backward=bwd)


def sigmoid(a: Tensor) -> Tensor:
    _check_finite("sigmoid", a.data)
    # Stable split form avoids exp overflow on large |x|.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * out * (1.0 - out))

    return Tensor(out, parents=(a,), backward=bwd)


def tanh(a: Tensor) -> Tensor:
    _check_finite("tanh", a.data)
    out = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * (1.0 - out * out))

    return Tensor(out, parents=(a,), backward=bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is in range."""
    _check_finite("clip", a.data)
    inside = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * inside)

    return Tensor(np.clip(a.data, lo, hi), parents=(a,), backward=bwd)


def absolute(a: Tensor) -> Tensor:
    """Elementwise |x| with the sign(0) = 0 subgradient."""
    _check_finite("absolute", a.data)
    s = np.sign(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * s)

    return Tensor(np.abs(a.data), parents=(a,), backward=bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), parents=(a,), backward=bwd)


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat: ranks {a.shape} vs {b.shape} differ")
    data = np.concatenate([a.data, b.data], axis=axis)
    n = a.data.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [n], axis=axis)
        if a.requires_grad:
            a.accumulate(ga)
        if b.requires_grad:
            b.accumulate(gb)

    return Tensor(data, parents=(a, b), backward=bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    return Tensor(a.data.sum(), parents=(a,), backward=bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g / n, a.data.shape).copy())

    return Tensor(a.data.mean(), parents=(a,), backward=bwd)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of elementwise absolute differences."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shapes {a.shape} vs {b.shape}")
    return tsum(absolute(a - b))


# ---------------------------------------------------------------------------
# Contractions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("matmul", a.data, b.data)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return Tensor(data, parents=(a, b), backward=bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid (no padding) 2-D cross-correlation, NHWC layout, stride 1 or 2.

    x: (B, H, W, Cin); w: (kh, kw, Cin, Cout); b: (Cout,) optional.
    """
    _check_finite("conv2d", x.data, w.data)
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride {stride} unsupported (use 1 or 2)")
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[3] != w.data.shape[2]:
        raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} do not conform")
    B, H, W, Cin = x.data.shape
    kh, kw, _, Cout = w.data.shape
    if kh > H or kw > W:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    ho = (H - kh) // stride + 1
    wo = (W - kw) // stride + 1
    # (B, H-kh+1, W-kw+1, Cin, kh, kw) windows, strided, then flattened for one GEMM.
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * ho * wo, kh * kw * Cin)
    wmat = w.data.reshape(kh * kw * Cin, Cout)
    out = (cols @ wmat).reshape(B, ho, wo, Cout)
    if b is not None:
        if b.data.shape != (Cout,):
            raise ShapeError(f"conv2d: bias {b.shape} vs Cout {Cout}")
        out = out + b.data

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gflat = g.reshape(B * ho * wo, Cout)
        if w.requires_grad:
            w.accumulate((cols.T @ gflat).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b.accumulate(gflat.sum(axis=0))
        if x.requires_grad:
            gcols = (gflat @ wmat.T).reshape(B, ho, wo, kh, kw, Cin)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            x.accumulate(gx)

    return Tensor(out, parents=parents, backward=bwd)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped."""
    _check_finite("maxpool2d", x.data)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected rank-4 NHWC input, got {x.shape}")
    B, H, W, C = x.data.shape
    ho, wo = H // 2, W // 2
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool2d: input {x.shape} too small for a 2x2 window")
    t = x.data[:, :ho * 2, :wo * 2, :].reshape(B, ho, 2, wo, 2, C)
    t = t.transpose(0, 1, 3, 2, 4, 5).reshape(B, ho, wo, 4, C)
    idx = t.argmax(axis=3)  # first maximum wins on ties
    out = np.take_along_axis(t, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bwd(g):
        if not x.requires_grad:
            return
        gt = np.zeros((B, ho, wo, 4, C), dtype=DTYPE)
        np.put_along_axis(gt, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        gt = gt.reshape(B, ho, wo, 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
        gx = np.zeros_like(x.data)
        gx[:, :ho * 2, :wo * 2, :] = gt.reshape(B, ho * 2, wo * 2, C)
        x.accumulate(gx)

    return Tensor(out, parents=(x,), backward=bwd)


# ---------------------------------------------------------------------------
# Reductions with stability handling
# ---------------------------------------------------------------------------

def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(x))) over all elements, max-subtracted for stability."""
    _check_finite("logsumexp", a.data)
    m = a.data.max()
    e = np.exp(a.data - m)
    s = e.sum()
    out = m + np.log(s)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * e / s)

    return Tensor(out, parents=(a,), backward=bwd)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax of (B, K) logits, max-subtracted for stability."""
    _check_finite("softmax", a.data)
    if a.data.ndim != 2:
        raise ShapeError(f"softmax: expected (B, K) logits, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(p * (g - (g * p).sum(axis=1, keepdims=True)))

    return Tensor(p, parents=(a,), backward=bwd)


def gather_labels(a: Tensor, labels: np.ndarray) -> Tensor:
    """Pick a[i, labels[i]] for each row, returning a (B,) tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_labels: expected (B, K), got {a.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (a.data.shape[0],):
        raise ShapeError(f"gather_labels: labels {labels.shape} vs batch {a.data.shape[0]}")
    if labels.min() < 0 or labels.max() >= a.data.shape[1]:
        raise ShapeError("gather_labels: label index out of range")
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, labels]

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[rows, labels] = g
            a.accumulate(ga)

    return Tensor(data, parents=(a,), backward=bwd)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (B, K) logits against integer labels, stable form."""
    _check_finite("softmax_cross_entropy", logits.data)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (B, K), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.data.shape
    if labels.shape != (B,):
        raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} vs batch {B}")
    if labels.min() < 0 or labels.max() >= K:
        raise ShapeError("softmax_cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    losses = lse - z[rows, labels]
    p = np.exp(z - lse[:, None])

    def bwd(g):
        if logits.requires_grad:
            gl = p.copy()
            gl[rows, labels] -= 1.0
            logits.accumulate(g * gl / B)

    return Tensor(losses.mean(), parents=(logits,), backward=bwd)
