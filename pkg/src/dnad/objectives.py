"""Scalar objectives: sparsity entropy, task loss, the performance-attentive
composite and the distillation losses."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, ops

ENTROPY_FLATNESS = 50.0
ZERO_NORM = 1e-12
PROB_FLOOR = 1e-12


class KDVariant(str, enum.Enum):
    NONE = "none"
    ST = "st"
    AT = "at"
    ST_AT = "st+at"

    @property
    def uses_at(self) -> bool:
        return self in (KDVariant.AT, KDVariant.ST_AT)

    @property
    def uses_st(self) -> bool:
        return self in (KDVariant.ST, KDVariant.ST_AT)


@dataclass
class KDConfig:
    variant: KDVariant = KDVariant.AT
    beta: float = 1e3
    temperature: float = 4.0
    blocks: int = 3
    # "student_teacher" keeps the KL argument order D(p_S || p_T)
    kl_direction: str = "student_teacher"

    def __post_init__(self):
        self.variant = KDVariant(self.variant)
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.temperature < 1:
            raise ValueError("temperature must be >= 1")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.kl_direction not in ("student_teacher", "teacher_student"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")


@dataclass
class LossBreakdown:
    task: float
    sparsity: float
    total: float
    gamma: float
    mu: float
    attention_transfer: Optional[float] = None
    soft_target: Optional[float] = None
    core: float = field(default=0.0)

    def recomputed_total(self) -> float:
        return self.core * (1 + self.gamma * self.sparsity) + self.gamma * self.mu * self.sparsity


# ------------------------------------------------------------ sparsity entropy

def node_sparsity_entropy(delta, K: float = ENTROPY_FLATNESS):
    """``sum log(1 + K * delta)`` over one node's attention weights.

    Accepts a numpy vector (returns float) or a Tensor (returns Tensor).
    """
    if K <= 0:
        raise ValueError("K must be positive")
    if isinstance(delta, Tensor):
        if np.any(delta.data < 0):
            raise ValueError("attention weights must be non-negative")
        return ops.log(ops.add(ops.mul(delta, K), 1.0)).sum()
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise ValueError("attention weights must be non-negative")
    return float(np.log1p(K * delta).sum())


def total_sparsity_entropy(supernet, K: float = ENTROPY_FLATNESS, differentiable: bool = True):
    """Sum of node entropies over every intermediate node of every cell."""
    if not differentiable:
        return float(sum(node_sparsity_entropy(n.attention_values(), K) for n in supernet.iter_nodes()))
    terms = [node_sparsity_entropy(n.attention_weights(), K) for n in supernet.iter_nodes()]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def entropy_bounds(m: int, K: float = ENTROPY_FLATNESS) -> tuple[float, float]:
    """(minimum, maximum) of the node entropy over the m-simplex."""
    return math.log1p(K), m * math.log1p(K / m)


# ------------------------------------------------------------------- task loss

def prediction_loss(logits: Tensor, labels) -> Tensor:
    return ops.cross_entropy(logits, labels)


def composite_loss(core, sparsity, gamma: float, mu: float):
    """``core * (1 + gamma * sparsity) + gamma * mu * sparsity``."""
    if gamma < 0 or mu < 0:
        raise ValueError("gamma and mu must be non-negative")
    if gamma == 0:
        return core
    return core * (sparsity * gamma + 1.0) + sparsity * (gamma * mu)


# --------------------------------------------------------- distillation terms

def attention_map(features: Tensor) -> Tensor:
    """Channel-wise sum of absolute activations, (B,C,H,W) -> (B,H,W)."""
    if features.ndim != 4:
        raise ShapeError("attention_map", f"expected (B,C,H,W), got {features.shape}")
    return ops.abs(features).sum(axis=1)


def _normalized_maps(q: Tensor) -> Tensor:
    b = q.shape[0]
    flat = q.reshape(b, -1)
    norms = np.sqrt((flat.data.astype(np.float64) ** 2).sum(axis=1))
    live = (norms >= ZERO_NORM).astype(flat.data.dtype)
    safe = np.where(norms >= ZERO_NORM, 0.0, 1.0).astype(flat.data.dtype)
    # dead samples get denominator 1 and a zero mask so they contribute nothing
    denom = ops.sqrt(ops.add((flat * flat).sum(axis=1, keepdims=True), Tensor(safe[:, None])))
    return (flat / denom) * Tensor(live[:, None]), live


def at_loss(student_maps: Sequence[Tensor], teacher_maps: Sequence[Tensor]) -> Tensor:
    """Batch mean of the summed per-block squared distance between L2-normalised attention maps."""
    if len(student_maps) != len(teacher_maps):
        raise ShapeError("at_loss", f"{len(student_maps)} student blocks vs {len(teacher_maps)} teacher blocks")
    total = None
    for k, (s, t) in enumerate(zip(student_maps, teacher_maps), start=1):
        if s.shape[0] != t.shape[0] or s.shape[2:] != t.shape[2:]:
            raise ShapeError("at_loss", f"block {k}: student {s.shape} vs teacher {t.shape} spatial mismatch")
        qs, live_s = _normalized_maps(attention_map(s))
        qt, live_t = _normalized_maps(attention_map(Tensor(t.data)))
        both = Tensor((live_s * live_t)[:, None])
        diff = (qs - qt) * both
        term = (diff * diff).sum() * (1.0 / s.shape[0])
        total = term if total is None else total + term
    return total


def st_loss(student_logits: Tensor, teacher_logits: Tensor, t: float,
            direction: str = "student_teacher") -> Tensor:
    """Batch-mean KL divergence between temperature-softened distributions."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError("st_loss", f"{student_logits.shape} vs {teacher_logits.shape}")
    if t <= 0:
        raise ValueError("temperature must be positive")
    ps = ops.softmax(student_logits * (1.0 / t))
    pt = ops.softmax(Tensor(teacher_logits.data) * (1.0 / t))
    log_ps = ops.log(ops.clip_min(ps, PROB_FLOOR))
    log_pt = ops.log(ops.clip_min(pt, PROB_FLOOR))
    if direction == "student_teacher":
        kl = (ps * (log_ps - log_pt)).sum()
    elif direction == "teacher_student":
        kl = (pt * (log_pt - log_ps)).sum()
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return kl * (1.0 / student_logits.shape[0])


def kd_loss(variant, task, at=None, st=None, beta: float = 1e3, t: float = 4.0):
    """Distillation objective for the chosen variant."""
    variant = KDVariant(variant)
    if variant.uses_at and at is None:
        raise ValueError(f"variant {variant.value} needs the attention-transfer term")
    if variant.uses_st and st is None:
        raise ValueError(f"variant {variant.value} needs the soft-target term")
    total = task
    if variant.uses_at:
        total = total + at * (beta / 2.0)
    if variant.uses_st:
        total = total + st * (t * t)
    return total
