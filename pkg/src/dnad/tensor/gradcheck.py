"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, param_index: int, coord: tuple):
        super().__init__(f"{message} at parameter {param_index}, coordinate {coord}")
        self.param_index = param_index
        self.coord = coord


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
               coords: Optional[Sequence[tuple[int, tuple]]] = None) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` is re-evaluated with each probed coordinate perturbed in place;
    it must be deterministic. ``coords`` restricts probing to
    ``(param_index, index_tuple)`` pairs, otherwise every coordinate is
    probed. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    grads = analytic_grads(f, params)
    if coords is None:
        coords = [(k, idx) for k, p in enumerate(params) for idx in np.ndindex(p.shape)]
    worst = 0.0
    for k, idx in coords:
        p = params[k]
        orig = p.data[idx].copy()
        p.data[idx] = orig + step
        up = f().item()
        p.data[idx] = orig - step
        down = f().item()
        p.data[idx] = orig
        numeric = (up - down) / (2 * step)
        analytic = float(grads[k][idx])
        if not (np.isfinite(up) and np.isfinite(down) and np.isfinite(analytic)):
            raise NonFiniteError("non-finite value during gradient check", k, tuple(idx))
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst
