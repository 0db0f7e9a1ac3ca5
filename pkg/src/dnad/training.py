"""From-scratch training of fixed networks (discrete architectures and teachers)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, apply_cutout, iterate_batches
from .layers import Module
from .optim import SGD, cosine_lr
from .tensor import Tape, Tensor, no_record, ops

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, last_finite: dict | None = None):
        super().__init__(message)
        self.last_finite = last_finite or {}


@dataclass
class RetrainConfig:
    epochs: int = 600
    batch_size: int = 96
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    cutout: int = 16
    drop_path: float = 0.3
    channels: int = 36
    seed: int = 0
    eval_batch: int = 250

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr and batch_size must be positive")
        if not 0 <= self.drop_path < 1:
            raise ValueError("drop_path must lie in [0, 1)")


@dataclass
class EvalReport:
    best_val_acc: float
    final_val_acc: float
    params: int
    macs: int
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    seed: int = 0


def evaluate(net: Module, x: np.ndarray, y: np.ndarray, batch: int = 250) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) in evaluation mode."""
    net.eval()
    losses, correct = [], 0
    with no_record():
        for start in range(0, len(x), batch):
            xb, yb = x[start:start + batch], y[start:start + batch]
            logits = net(Tensor(xb))
            losses.append(ops.cross_entropy(logits, yb).item() * len(xb))
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    net.train()
    return float(np.sum(losses) / len(x)), correct / len(x)


def train_network(net: Module, dataset: Dataset, cfg: RetrainConfig, macs: int = 0) -> EvalReport:
    """Cosine-annealed momentum SGD with cutout; evaluates every epoch."""
    x_tr, y_tr = dataset.split("train")
    x_va, y_va = dataset.split("val")
    data_rng = np.random.default_rng([cfg.seed, 7])
    steps_per_epoch = max(1, len(x_tr) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    schedule = cosine_lr(cfg.lr, total - 1)
    opt = SGD(list(net.parameters()), cfg.lr, cfg.momentum, cfg.weight_decay)
    report = EvalReport(0.0, 0.0, net.param_count(), macs, seed=cfg.seed)
    step = 0
    net.train()
    for epoch in range(cfg.epochs):
        losses, correct, seen = [], 0, 0
        for idx in iterate_batches(len(x_tr), cfg.batch_size, data_rng):
            opt.lr = schedule(step)
            xb = apply_cutout(x_tr[idx], cfg.cutout, data_rng)
            opt.zero_grad()
            with Tape() as tape:
                logits = net(Tensor(xb))
                loss = ops.cross_entropy(logits, y_tr[idx])
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}",
                                      {k: v[-1] for k, v in vars(report).items() if isinstance(v, list) and v})
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
            correct += int((logits.data.argmax(axis=1) == y_tr[idx]).sum())
            seen += len(idx)
            step += 1
        vl, va = evaluate(net, x_va, y_va, cfg.eval_batch)
        report.train_loss.append(float(np.mean(losses)))
        report.train_acc.append(correct / max(seen, 1))
        report.val_loss.append(vl)
        report.val_acc.append(va)
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, report.train_loss[-1], va)
    report.best_val_acc = max(report.val_acc)
    report.final_val_acc = report.val_acc[-1]
    return report
