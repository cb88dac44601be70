"""SGD with momentum and a frozen-parameter set."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor


class SGD:
    """Momentum SGD: ``v = mu*v + grad; theta -= lr*v``.

    Parameters whose names are in ``frozen`` keep their values and momentum
    buffers untouched by every step.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4,
                 momentum: float = 0.9, frozen: Iterable[str] = ()):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.frozen = frozenset(frozen)
        unknown = self.frozen - self.params.keys()
        if unknown:
            raise KeyError(f"frozen names not among parameters: {sorted(unknown)}")
        self.velocity: dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.params.items()
            if name not in self.frozen
        }

    def trainable(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def step(self) -> None:
        missing = [n for n in self.trainable() if self.params[n].grad is None]
        if missing:
            raise RuntimeError(f"no gradient for trainable parameter {missing[0]!r}")
        for name in self.trainable():
            p = self.params[name]
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data = p.data - (self.lr * v).astype(p.data.dtype)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
