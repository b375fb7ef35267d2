"""Momentum SGD with selectable update direction."""

from __future__ import annotations

import numpy as np

from .params import ParamVector


class MomentumSGD:
    """v <- momentum*v + g; descend: theta -= lr*v, ascend: theta += lr*v.

    Momentum buffers persist across step() calls for the optimizer's lifetime.
    """

    def __init__(self, params: ParamVector, lr: float, momentum: float = 0.0,
                 direction: str = "descend"):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if direction not in ("descend", "ascend"):
            raise ValueError(f"direction must be 'descend' or 'ascend', got {direction!r}")
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.sign = -1.0 if direction == "descend" else 1.0
        self._buffers: dict[str, np.ndarray] = {}

    def step(self, grads: ParamVector) -> None:
        if grads.names() != self.params.names():
            raise ValueError("gradient segments do not match parameter segments")
        for (name, p), (_, g) in zip(self.params.segments, grads.segments):
            if p.data.shape != g.data.shape:
                raise ValueError(f"segment {name!r}: grad shape {g.data.shape} "
                                 f"vs param shape {p.data.shape}")
            v = self._buffers.get(name)
            if v is None:
                v = np.zeros_like(p.data)
                self._buffers[name] = v
            v *= self.momentum
            v += g.data
            p.data += self.sign * self.lr * v
