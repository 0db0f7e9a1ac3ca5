"""Adam, momentum SGD and a cosine learning-rate schedule.

Both optimizers apply weight decay as an L2 term added to the gradient and
skip parameters that received no gradient in the current step, so pruned
operators keep their last weights untouched.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _decayed(self, p: Tensor, decay_mask: Optional[np.ndarray]) -> np.ndarray:
        g = p.grad
        if self.weight_decay:
            if decay_mask is None:
                g = g + self.weight_decay * p.data
            else:
                g = g + self.weight_decay * p.data * decay_mask
        return g


class SGD(Optimizer):
    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum
        self.buffers: dict[int, np.ndarray] = {}

    def step(self, decay_masks: Optional[dict] = None, update_masks: Optional[dict] = None) -> None:
        """One update. ``decay_masks``/``update_masks`` map ``id(param)`` to
        elementwise multipliers restricting decay or the whole update."""
        for p in self.params:
            if p.grad is None:
                continue
            key = id(p)
            g = self._decayed(p, None if decay_masks is None else decay_masks.get(key))
            if self.momentum:
                buf = self.buffers.get(key)
                buf = g.copy() if buf is None else self.momentum * buf + g
                if update_masks is not None and key in update_masks:
                    buf = buf * update_masks[key]
                self.buffers[key] = buf
                g = buf
            elif update_masks is not None and key in update_masks:
                g = g * update_masks[key]
            p.data -= (self.lr * g).astype(p.data.dtype, copy=False)


class Adam(Optimizer):
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.betas = betas
        self.eps = eps
        self.state: dict[int, list] = {}

    def step(self) -> None:
        b1, b2 = self.betas
        for p in self.params:
            if p.grad is None:
                continue
            g = self._decayed(p, None)
            st = self.state.get(id(p))
            if st is None:
                st = [0, np.zeros_like(p.data), np.zeros_like(p.data)]
                self.state[id(p)] = st
            st[0] += 1
            t, m, v = st
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype, copy=False)


def cosine_lr(base_lr: float, total_steps: int) -> Callable[[int], float]:
    """Learning rate annealed from ``base_lr`` at step 0 to zero at ``total_steps``."""
    def lr_at(step: int) -> float:
        if total_steps <= 0:
            return base_lr
        return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
    return lr_at
