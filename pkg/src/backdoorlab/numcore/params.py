"""Named, ordered parameter collections and gradient extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, Tensor, backward as _tape_backward


@dataclass
class ParamVector:
    """An ordered list of named parameter tensors; order is part of identity."""

    segments: list[tuple[str, Tensor]] = field(default_factory=list)

    @property
    def total_dims(self) -> int:
        return sum(t.size for _, t in self.segments)

    def names(self) -> list[str]:
        return [n for n, _ in self.segments]

    def tensor(self, name: str) -> Tensor:
        for n, t in self.segments:
            if n == name:
                return t
        raise KeyError(name)

    def add(self, name: str, data: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self.names():
            raise ValueError(f"duplicate parameter segment {name!r}")
        t = Tensor(np.asarray(data, dtype=DTYPE), requires_grad=requires_grad)
        self.segments.append((name, t))
        return t

    def flatten(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([t.data.reshape(-1) for _, t in self.segments])

    def assign_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=DTYPE)
        if vec.shape != (self.total_dims,):
            raise ValueError(f"assign_flat: got {vec.shape}, expected ({self.total_dims},)")
        off = 0
        for _, t in self.segments:
            n = t.size
            t.data[...] = vec[off:off + n].reshape(t.data.shape)
            off += n

    def snapshot(self) -> dict[str, np.ndarray]:
        """Deep copies of every segment, for later restore or drift penalties."""
        return {n: t.data.copy() for n, t in self.segments}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, t in self.segments:
            t.data[...] = snap[n]

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.segments:
            t.requires_grad = flag

    def zero_grads(self) -> None:
        for _, t in self.segments:
            t.grad = None


def backward(loss: Tensor, params: ParamVector) -> ParamVector:
    """Backpropagate a scalar loss and collect gradients aligned with `params`.

    Parameters that do not appear on the recorded graph get zero gradients.
    """
    params.zero_grads()
    _tape_backward(loss)
    grads = ParamVector()
    for name, t in params.segments:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        grads.add(name, g.copy(), requires_grad=False)
    params.zero_grads()
    return grads
