"""Search orchestration: warm-up, the one-level joint (α, w) step with
pruning and controller feedback, Pareto snapshot collection, retraining
and cost counting."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import controller as ctl
from .data import Dataset, iterate_batches
from .distillation import (BlockPartition, TeacherBundle, check_compatible, collect_feature_maps,
                           partition_blocks)
from .objectives import (ENTROPY_FLATNESS, KDConfig, KDVariant, LossBreakdown, at_loss, composite_loss,
                         kd_loss, prediction_loss, st_loss, total_sparsity_entropy)
from .optim import SGD, Adam
from .search_space import (BASE, DiscreteArch, NetConfig, OperatorSpace, SuperNet, instantiate_discrete,
                           prune_below_threshold, snapshot_discrete)
from .tensor import Tape, Tensor, no_record, ops
from .training import DivergenceError, EvalReport, RetrainConfig, train_network

log = logging.getLogger(__name__)

# candidate operators of the 14-cell, 4-intermediate-node, 3-kind reference supernet
REFERENCE_CANDIDATES = 14 * (2 + 3 + 4 + 5) * 3
REFERENCE_LS_MIN = 200.0
# margin above the smallest reachable entropy (one op per node)
LS_MIN_HEADROOM = 1.1


class Mode(str, enum.Enum):
    SNPS = "snps"
    DNAD = "dnad"


@dataclass
class SearchConfig:
    mode: Mode = Mode.SNPS
    kd: KDConfig = field(default_factory=KDConfig)
    net: NetConfig = field(default_factory=NetConfig)
    space: OperatorSpace = BASE
    controller: ctl.ControllerConfig = field(default_factory=ctl.ControllerConfig)
    w_lr: float = 5e-3
    w_betas: tuple = (0.5, 0.999)
    w_weight_decay: float = 3e-4
    alpha_lr: float = 0.2
    alpha_momentum: float = 0.9
    alpha_weight_decay: float = 3e-4
    warmup_epochs: int = 5
    warmup_alpha: bool = True
    batch_size: int = 64
    seed: int = 0
    max_steps: int = 100_000
    # replace controller.ls_min by the value scaled to this supernet's size
    auto_ls_min: bool = False

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.w_lr <= 0 or self.alpha_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be positive and max_steps non-negative")


def scaled_ls_min(candidates: int, nodes: int, K: float = ENTROPY_FLATNESS) -> float:
    """Termination entropy proportional to supernet size, kept reachable.

    The proportional value is floored at ``LS_MIN_HEADROOM`` times the
    entropy of a network with exactly one operator per node, which is the
    smallest value pruning can reach.
    """
    proportional = REFERENCE_LS_MIN * candidates / REFERENCE_CANDIDATES
    return max(proportional, LS_MIN_HEADROOM * nodes * math.log1p(K))


# ------------------------------------------------------------------ state

@dataclass
class StepReport:
    step: int
    epoch: int
    losses: LossBreakdown
    n_prune: int
    alive: int
    state: ctl.ControllerState
    correct: int
    batch: int
    snapshot: bool = False


@dataclass
class Snapshot:
    arch: DiscreteArch
    step: int
    op_count: int
    sparsity_entropy: float
    running_task_loss: float


@dataclass
class ParetoSet:
    snapshots: list = field(default_factory=list)
    truncated: bool = False

    def offer(self, snap: Snapshot) -> bool:
        """Keep ``snap`` only if it is strictly smaller and sparser than the last entry."""
        if self.snapshots:
            last = self.snapshots[-1]
            if snap.op_count >= last.op_count or snap.sparsity_entropy >= last.sparsity_entropy:
                return False
        self.snapshots.append(snap)
        return True

    def __len__(self) -> int:
        return len(self.snapshots)

    def __iter__(self):
        return iter(self.snapshots)

    def __getitem__(self, k) -> Snapshot:
        return self.snapshots[k]

    @property
    def archs(self) -> list:
        return [s.arch for s in self.snapshots]

    def manifest(self, files: Optional[list] = None) -> dict:
        files = files or [snapshot_filename(k) for k in range(len(self))]
        return {"truncated": self.truncated,
                "snapshots": [{"file": f, "step": s.step, "op_count": s.op_count,
                               "sparsity_entropy": s.sparsity_entropy,
                               "running_task_loss": s.running_task_loss}
                              for f, s in zip(files, self.snapshots)]}


def snapshot_filename(k: int) -> str:
    return f"{k:03d}.json"


class Search:
    """Mutable search state: supernet, optimizers, controller, logs."""

    def __init__(self, dataset: Dataset, cfg: SearchConfig, teacher: Optional[TeacherBundle] = None):
        if cfg.mode is Mode.DNAD and cfg.kd.variant is not KDVariant.NONE and teacher is None:
            raise ValueError(f"variant {cfg.kd.variant.value} needs a teacher")
        net_cfg = replace(cfg.net, input_shape=dataset.input_shape, classes=dataset.classes)
        self.cfg = cfg
        self.dataset = dataset
        self.teacher = teacher
        self.supernet = SuperNet(net_cfg, cfg.space, seed=cfg.seed)
        ccfg = cfg.controller
        if cfg.auto_ls_min:
            n_nodes = sum(1 for _ in self.supernet.iter_nodes())
            ccfg = replace(ccfg, ls_min=scaled_ls_min(self.supernet.candidate_count(), n_nodes))
        self.controller_cfg = ccfg
        self.state = ctl.ControllerState.initial(ccfg)
        self.partition: Optional[BlockPartition] = None
        if cfg.mode is Mode.DNAD and cfg.kd.variant.uses_at:
            self.partition = partition_blocks(self.supernet, cfg.kd.blocks)
            check_compatible(self.partition, teacher.partition)
        self.w_opt = Adam(self.supernet.weight_parameters(), cfg.w_lr, tuple(cfg.w_betas),
                          weight_decay=cfg.w_weight_decay)
        self.a_opt = SGD(self.supernet.arch_parameters(), cfg.alpha_lr, cfg.alpha_momentum,
                         cfg.alpha_weight_decay)
        # data order never shares a generator with weight init
        self.data_rng = np.random.default_rng([cfg.seed, 2])
        self.step = 0
        self.epoch = 0
        self.trajectory = ctl.TrajectoryLog()
        self.step_rows: list[dict] = []
        self.epoch_rows: list[dict] = []
        self.pareto = ParetoSet()
        self.running_la = float("nan")

    # -------------------------------------------------------------- losses

    def _losses(self, x: np.ndarray, y: np.ndarray, gamma: float, mu: float, distill: bool):
        net = self.supernet
        kd = self.cfg.kd
        at = st = None
        if distill and kd.variant.uses_at:
            maps, logits = collect_feature_maps(net, self.partition, Tensor(x))
            t_maps, t_logits = self.teacher.feature_maps(x)
            at = at_loss(maps, t_maps)
        else:
            logits = net(Tensor(x))
            t_logits = None
        la = prediction_loss(logits, y)
        core = la
        if distill:
            if kd.variant.uses_st:
                if t_logits is None:
                    with no_record():
                        t_logits = Tensor(self.teacher.net(Tensor(x)).data)
                st = st_loss(logits, t_logits, kd.temperature, kd.kl_direction)
            core = kd_loss(kd.variant, la, at, st, kd.beta, kd.temperature)
        ls = total_sparsity_entropy(net)
        total = composite_loss(core, ls, gamma, mu)
        breakdown = LossBreakdown(task=la.item(), sparsity=ls.item(), total=total.item(), gamma=gamma, mu=mu,
                                  attention_transfer=None if at is None else at.item(),
                                  soft_target=None if st is None else st.item(), core=core.item())
        return total, logits, breakdown

    def _update(self, tape: Tape, total: Tensor, alpha: bool) -> None:
        self.w_opt.zero_grad()
        self.a_opt.zero_grad()
        tape.backward(total)
        for p in self.w_opt.params + self.a_opt.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient at step {self.step}", self._last_finite())
        self.w_opt.step()
        if alpha:
            self.a_opt.step(self.supernet.alpha_decay_masks(), self.supernet.alpha_update_masks())

    def _last_finite(self) -> dict:
        return dict(self.step_rows[-1]) if self.step_rows else {}

    def _forward_backward(self, x, y, gamma, mu, distill, alpha):
        with Tape() as tape:
            total, logits, br = self._losses(x, y, gamma, mu, distill)
        if not math.isfinite(br.total):
            raise DivergenceError(f"non-finite loss at step {self.step}", self._last_finite())
        self._update(tape, total, alpha)
        return logits, br

    # --------------------------------------------------------------- phases

    def warmup(self) -> None:
        """Unconstrained epochs on the task loss: gamma held at 0, nothing pruned."""
        x_tr, y_tr = self.dataset.split("train")
        for epoch in range(self.cfg.warmup_epochs):
            losses, correct = [], 0
            for idx in iterate_batches(len(x_tr), self.cfg.batch_size, self.data_rng):
                logits, br = self._forward_backward(x_tr[idx], y_tr[idx], 0.0, 0.0, False,
                                                    self.cfg.warmup_alpha)
                losses.append(br.task)
                correct += int((logits.data.argmax(axis=1) == y_tr[idx]).sum())
            log.info("warm-up epoch %d loss %.4f", epoch, float(np.mean(losses)))

    def search_step(self, x: np.ndarray, y: np.ndarray) -> StepReport:
        distill = self.cfg.mode is Mode.DNAD
        st = self.state
        logits, br = self._forward_backward(x, y, st.gamma, st.mu, distill, True)
        pr = prune_below_threshold(self.supernet, self.controller_cfg.eps)
        st = ctl.control_step(st, pr.n_prune, self.controller_cfg)
        due, st = ctl.should_snapshot(st, self.controller_cfg)
        self.state = st
        self.step += 1
        self.running_la = br.task if math.isnan(self.running_la) else 0.9 * self.running_la + 0.1 * br.task
        ls_after = self.supernet.sparsity_entropy()
        if due:
            self._offer_snapshot(ls_after)
        correct = int((logits.data.argmax(axis=1) == y).sum())
        self.trajectory.append(self.step, st, pr.n_prune, ls_after, br.task)
        self.step_rows.append({"step": self.step, "epoch": self.epoch, "L_A": br.task, "L_core": br.core,
                               "L_AT": br.attention_transfer, "L_ST": br.soft_target, "L_S": ls_after,
                               "total": br.total, "gamma": br.gamma, "mu": br.mu, "n_prune": pr.n_prune,
                               "alive": self.supernet.alive_count(), "train_acc": correct / len(y)})
        return StepReport(self.step, self.epoch, br, pr.n_prune, self.supernet.alive_count(), st,
                          correct, len(y), due)

    def _offer_snapshot(self, ls: float) -> bool:
        arch = snapshot_discrete(self.supernet, self.step)
        return self.pareto.offer(Snapshot(arch, self.step, arch.op_count, ls, self.running_la))

    def done(self) -> bool:
        return ctl.terminated(self.supernet.sparsity_entropy(), self.controller_cfg)

    def run(self) -> ParetoSet:
        x_tr, y_tr = self.dataset.split("train")
        self.warmup()
        while not self.done():
            if self.step >= self.cfg.max_steps:
                self.pareto.truncated = True
                log.warning("step budget %d exhausted before termination", self.cfg.max_steps)
                break
            losses, correct, seen = [], 0, 0
            for idx in iterate_batches(len(x_tr), self.cfg.batch_size, self.data_rng):
                rep = self.search_step(x_tr[idx], y_tr[idx])
                losses.append(rep.losses.task)
                correct += rep.correct
                seen += rep.batch
                if self.done() or self.step >= self.cfg.max_steps:
                    break
            self.epoch_rows.append({"epoch": self.epoch, "steps": self.step, "L_A": float(np.mean(losses)),
                                    "train_acc": correct / max(seen, 1),
                                    "L_S": self.supernet.sparsity_entropy(),
                                    "alive": self.supernet.alive_count()})
            log.info("search epoch %d step %d L_S %.2f alive %d", self.epoch, self.step,
                     self.supernet.sparsity_entropy(), self.supernet.alive_count())
            self.epoch += 1
        if not self.pareto.truncated:
            self._offer_snapshot(self.supernet.sparsity_entropy())
        return self.pareto

    def final_arch(self) -> DiscreteArch:
        return snapshot_discrete(self.supernet, self.step)

    # --------------------------------------------------------------- output

    def metrics_csv(self) -> str:
        return _csv(self.step_rows, STEP_COLUMNS)

    def epoch_csv(self) -> str:
        return _csv(self.epoch_rows, EPOCH_COLUMNS)

    def write_outputs(self, out: Path) -> None:
        out = Path(out)
        (out / "pareto").mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.metrics_csv())
        (out / "metrics_epoch.csv").write_text(self.epoch_csv())
        (out / "controller.csv").write_text(self.trajectory.to_csv())
        files = []
        for k, s in enumerate(self.pareto):
            name = snapshot_filename(k)
            (out / "pareto" / name).write_text(s.arch.to_json())
            files.append(f"pareto/{name}")
        manifest = self.pareto.manifest(files)
        manifest.update({"ls_min": self.controller_cfg.ls_min, "steps": self.step, "mode": self.cfg.mode.value,
                         "kd_variant": self.cfg.kd.variant.value if self.cfg.mode is Mode.DNAD else None,
                         "normalization": {"mean": self.dataset.mean.tolist(), "std": self.dataset.std.tolist()}})
        (out / "pareto" / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        (out / "final.json").write_text(self.final_arch().to_json())


STEP_COLUMNS = ("step", "epoch", "L_A", "L_core", "L_AT", "L_ST", "L_S", "total", "gamma", "mu",
                "n_prune", "alive", "train_acc")
EPOCH_COLUMNS = ("epoch", "steps", "L_A", "train_acc", "L_S", "alive")


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


# ------------------------------------------------------ functional surface

def warmup(search: Search) -> SuperNet:
    search.warmup()
    return search.supernet


def search_step(search: Search, x: np.ndarray, y: np.ndarray) -> StepReport:
    return search.search_step(x, y)


def run_search(dataset: Dataset, cfg: SearchConfig, teacher: Optional[TeacherBundle] = None) -> Search:
    """Warm up, then step until the sparsity entropy reaches its floor.

    Returns the finished ``Search``; its ``pareto`` attribute holds the
    snapshot set (``truncated`` if ``max_steps`` ran out first).
    """
    search = Search(dataset, cfg, teacher)
    search.run()
    return search


# ---------------------------------------------------------------- retrain

@dataclass
class CostReport:
    params: int
    macs: int


def count_cost(arch: DiscreteArch, channels: int, input_shape, classes: int,
               space: OperatorSpace = BASE) -> CostReport:
    """Parameter count and multiply-accumulates of one forward pass on one image.

    Convolutions and the classifier are counted; normalisation and
    activations are not.
    """
    net = instantiate_discrete(arch, channels, input_shape, classes, space)
    net.eval()
    with ops.count_macs() as counter, no_record():
        net(Tensor(np.zeros((1,) + tuple(input_shape))))
    return CostReport(net.param_count(), int(counter[0]))


def retrain(arch: DiscreteArch, dataset: Dataset, cfg: RetrainConfig, space: OperatorSpace = BASE) -> EvalReport:
    net = instantiate_discrete(arch, cfg.channels, dataset.input_shape, dataset.classes, space,
                               seed=cfg.seed, drop_path=cfg.drop_path)
    cost = count_cost(arch, cfg.channels, dataset.input_shape, dataset.classes, space)
    return train_network(net, dataset, cfg, cost.macs)


@dataclass
class MultiSeedReport:
    runs: list

    @property
    def mean_best(self) -> float:
        return float(np.mean([r.best_val_acc for r in self.runs]))

    @property
    def spread_best(self) -> float:
        return float(np.std([r.best_val_acc for r in self.runs]))

    @property
    def best_of_mean(self) -> float:
        """Best epoch of the seed-averaged validation curve."""
        return float(np.max(np.mean([r.val_acc for r in self.runs], axis=0)))

    def to_dict(self) -> dict:
        return {"mean_best_val_acc": self.mean_best, "spread_best_val_acc": self.spread_best,
                "best_of_mean_val_acc": self.best_of_mean, "runs": [asdict(r) for r in self.runs]}


def retrain_seeds(arch: DiscreteArch, dataset: Dataset, cfg: RetrainConfig, seeds,
                  space: OperatorSpace = BASE) -> MultiSeedReport:
    return MultiSeedReport([retrain(arch, dataset, replace(cfg, seed=s), space) for s in seeds])


def nearest_mac_pairs(a: list, b: list) -> list:
    """For each cost in ``a`` the index in ``b`` with the closest MAC count."""
    return [(i, int(np.argmin([abs(x.macs - y.macs) for y in b]))) for i, x in enumerate(a)]
