"""RMSProp: per-parameter squared-gradient accumulator with plain updates.

acc <- decay * acc + (1 - decay) * g^2
p   <- p - lr * g / (sqrt(acc) + eps)

The learning rate default matches the training recipe (1e-4); decay and
the stabilizer keep the optimizer's canonical defaults.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def rmsprop_step(values: np.ndarray, grad: np.ndarray, acc: np.ndarray,
                 lr: float = 1e-4, decay: float = 0.9, eps: float = 1e-10):
    """Functional single-parameter update; returns (new values, new acc)."""
    acc = decay * acc + (1.0 - decay) * grad * grad
    return values - lr * grad / (np.sqrt(acc) + eps), acc


class RMSProp:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 decay: float = 0.9, eps: float = 1e-10):
        self.params = params
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.acc = {name: np.zeros_like(p.values) for name, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            p.values, self.acc[name] = rmsprop_step(
                p.values, p.grad, self.acc[name], self.lr, self.decay, self.eps
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Accumulators under a reserved prefix, for checkpointing."""
        return {f"opt.acc.{name}": acc for name, acc in self.acc.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.acc:
            key = f"opt.acc.{name}"
            if key in arrays:
                self.acc[name] = arrays[key].astype(self.acc[name].dtype, copy=True)
