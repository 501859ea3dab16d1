"""AdamW with decoupled weight decay and the three-anchor cyclic learning rate.

The schedule is piecewise log-linear: up from the initial rate to the peak over
the first 40% of steps, then down to the final rate over the remainder.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ParamRegistry

WARMUP_FRACTION = 0.4


def cyclic_lr(step: float, total_steps: float, lr0: float = 1e-4,
              lr_peak: float = 1e-3, lr_end: float = 1e-8) -> float:
    if lr0 <= 0 or lr_peak <= 0 or lr_end <= 0:
        raise ValueError("learning rates must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = WARMUP_FRACTION * total_steps
    if warm == 0:
        return lr_end
    if step <= warm:
        return lr0 * (lr_peak / lr0) ** (step / warm)
    return lr_peak * (lr_end / lr_peak) ** ((step - warm) / (total_steps - warm))


class AdamW:
    """Decoupled-weight-decay Adam over a :class:`ParamRegistry`.

    ``step()`` consumes populated gradients (raising if any are missing),
    applies the update at the scheduled learning rate, and clears gradients.
    """

    def __init__(self, registry: ParamRegistry, total_steps: int,
                 lr0: float = 1e-4, lr_peak: float = 1e-3, lr_end: float = 1e-8,
                 weight_decay: float = 1e-2,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.registry = registry
        self.total_steps = total_steps
        self.lr0, self.lr_peak, self.lr_end = lr0, lr_peak, lr_end
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in registry.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in registry.items()}

    def current_lr(self) -> float:
        return cyclic_lr(min(self.t, self.total_steps), self.total_steps,
                         self.lr0, self.lr_peak, self.lr_end)

    def step(self) -> float:
        lr = self.current_lr()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.registry.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None
        return lr
