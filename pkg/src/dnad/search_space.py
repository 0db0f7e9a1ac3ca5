"""Cell-based super-network with ReLU-normalised attention over candidate operators.

Every cell owns its own topology: architecture parameters, operator weights
and alive flags are never shared between cells, so pruning is local.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .layers import BatchNorm, Conv2d, Linear, Module, ReLU, Sequential, relu_conv_bn
from .objectives import ENTROPY_FLATNESS, node_sparsity_entropy
from .tensor import Tensor, ops

SKIP = "skip_connect"
SEP_CONV = "sep_conv_3x3"
DIL_CONV = "dil_conv_5x5"
MAX_POOL = "max_pool_3x3"
AVG_POOL = "avg_pool_3x3"
ALL_KINDS = (SKIP, SEP_CONV, DIL_CONV, MAX_POOL, AVG_POOL)
FORMAT_VERSION = 1


class StructuralError(RuntimeError):
    """A node lost every incoming operator or an architecture is malformed."""


@dataclass(frozen=True)
class OperatorSpace:
    kinds: tuple

    def __post_init__(self):
        if not self.kinds:
            raise ValueError("operator space must not be empty")
        if len(set(self.kinds)) != len(self.kinds):
            raise ValueError(f"duplicate operator kinds in {self.kinds}")
        unknown = set(self.kinds) - set(ALL_KINDS)
        if unknown:
            raise ValueError(f"unknown operator kinds {sorted(unknown)}")

    def rank(self, kind: str) -> int:
        return self.kinds.index(kind)

    def __contains__(self, kind) -> bool:
        return kind in self.kinds

    def __len__(self) -> int:
        return len(self.kinds)

    @classmethod
    def preset(cls, name: str) -> "OperatorSpace":
        try:
            return PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown operator space {name!r}; choose from {sorted(PRESETS)}") from None


BASE = OperatorSpace((SKIP, SEP_CONV, DIL_CONV))
BASE_MAXPOOL = OperatorSpace((SKIP, SEP_CONV, DIL_CONV, MAX_POOL))
BASE_AVGPOOL = OperatorSpace((SKIP, SEP_CONV, DIL_CONV, AVG_POOL))
PRESETS = {"base": BASE, "base+maxpool": BASE_MAXPOOL, "base+avgpool": BASE_AVGPOOL}


@dataclass
class NetConfig:
    """Shape of a cell network. Reduction cells default to floor(L/3), floor(2L/3)."""

    cells: int = 8
    nodes: int = 5
    channels: int = 16
    input_shape: tuple = (3, 16, 16)
    classes: int = 10
    reduction_cells: Optional[tuple] = None

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if self.nodes < 3:
            raise ValueError("a cell needs at least one intermediate node (nodes >= 3)")
        if self.channels < 1 or self.classes < 2:
            raise ValueError("channels must be >= 1 and classes >= 2")
        red = self.reductions()
        if len(set(red)) != 2 or any(not 0 <= r < self.cells for r in red):
            raise ValueError(f"{self.cells} cells cannot hold two distinct reduction cells")

    def reductions(self) -> tuple:
        if self.reduction_cells is not None:
            return tuple(self.reduction_cells)
        return (self.cells // 3, 2 * self.cells // 3)


# ------------------------------------------------------------------ operators

class Identity(Module):
    def __call__(self, x):
        return x


class SepConv(Module):
    """ReLU, depthwise conv, norm, ReLU, pointwise conv, norm (single application)."""

    def __init__(self, rng, c, kernel, stride):
        self.body = Sequential(
            ReLU(), Conv2d(rng, c, c, kernel, stride, kernel // 2, groups=c), BatchNorm(c),
            ReLU(), Conv2d(rng, c, c, 1), BatchNorm(c))

    def __call__(self, x):
        return self.body(x)


class DilConv(Module):
    def __init__(self, rng, c, kernel, stride, dilation):
        pad = dilation * (kernel - 1) // 2
        self.body = Sequential(
            ReLU(), Conv2d(rng, c, c, kernel, stride, pad, dilation=dilation, groups=c),
            Conv2d(rng, c, c, 1), BatchNorm(c))

    def __call__(self, x):
        return self.body(x)


class Pool(Module):
    def __init__(self, kind, stride):
        self.fn = ops.max_pool3x3 if kind == MAX_POOL else ops.avg_pool3x3
        self.stride = stride

    def __call__(self, x):
        return self.fn(x, self.stride)


def make_op(kind: str, channels: int, stride: int, rng: np.random.Generator) -> Module:
    if kind == SKIP:
        # a strided skip becomes a 1x1 stride-2 convolution
        return Identity() if stride == 1 else relu_conv_bn(rng, channels, channels, 1, stride)
    if kind == SEP_CONV:
        return SepConv(rng, channels, 3, stride)
    if kind == DIL_CONV:
        return DilConv(rng, channels, 5, stride, 2)
    if kind in (MAX_POOL, AVG_POOL):
        return Pool(kind, stride)
    raise ValueError(f"unknown operator kind {kind!r}")


# --------------------------------------------------------------------- cells

@dataclass
class MixedEdge:
    """Read-only view of the candidates on edge (source -> target)."""

    source: int
    target: int
    alpha: dict
    alive: dict
    ops: dict


class MixedNode(Module):
    """Intermediate node j: every (source, kind) pair with source < j."""

    def __init__(self, cell_index, target, channels, reduction, space, rng):
        self.cell_index = cell_index
        self.target = target
        self.entries = [(i, k) for i in range(target) for k in space.kinds]
        self.ops = [make_op(k, channels, 2 if reduction and i < 2 else 1, rng) for i, k in self.entries]
        self.alpha = Tensor(np.ones(len(self.entries)), requires_grad=True, name="alpha")
        self.alive = np.ones(len(self.entries), dtype=bool)

    def alive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.alive)

    def attention_values(self) -> np.ndarray:
        """Attention weights over alive entries as float64 numpy (no recording)."""
        a = self.alpha.data[self.alive].astype(np.float64)
        if a.size == 0:
            raise StructuralError(f"cell {self.cell_index} node {self.target} has no alive operator")
        r = np.maximum(a, 0.0)
        s = r.sum()
        if s <= 0:
            return np.full(a.size, 1.0 / a.size)
        return r / s

    def attention_weights(self) -> Tensor:
        idx = self.alive_indices()
        if idx.size == 0:
            raise StructuralError(f"cell {self.cell_index} node {self.target} has no alive operator")
        a = self.alpha[idx]
        r = ops.relu(a)
        if not np.any(r.data > 0):
            # ReLU normalisation undefined; fall back to uniform credit
            return Tensor(np.full(idx.size, 1.0 / idx.size))
        return r / r.sum()

    def mixed(self, states):
        idx = self.alive_indices()
        delta = self.attention_weights()
        outs = [self.ops[k](states[self.entries[k][0]]) for k in idx]
        if len(outs) == 1:
            return outs[0] * delta
        return ops.weighted_sum(outs, delta)

    def edges(self) -> list[MixedEdge]:
        out = {}
        for k, (i, kind) in enumerate(self.entries):
            e = out.setdefault(i, MixedEdge(i, self.target, {}, {}, {}))
            e.alpha[kind] = float(self.alpha.data[k])
            e.alive[kind] = bool(self.alive[k])
            e.ops[kind] = self.ops[k]
        return list(out.values())


class SuperCell(Module):
    def __init__(self, index, nodes, channels, c_prev_prev, c_prev, reduction, reduction_prev, space, rng):
        self.index = index
        self.reduction = reduction
        self.channels = channels
        self.pre0 = relu_conv_bn(rng, c_prev_prev, channels, 1, 2 if reduction_prev else 1)
        self.pre1 = relu_conv_bn(rng, c_prev, channels, 1)
        self.nodes = [MixedNode(index, j, channels, reduction, space, rng) for j in range(2, nodes)]

    @property
    def out_channels(self) -> int:
        return self.channels * len(self.nodes)

    def __call__(self, s0, s1):
        states = [self.pre0(s0), self.pre1(s1)]
        for node in self.nodes:
            states.append(node.mixed(states))
        return ops.concat(states[2:], axis=1)


class CellNetwork(Module):
    """Stem, a stack of two-input cells, global pooling and a linear head."""

    def _build_skeleton(self, cfg: NetConfig, rng, make_cell):
        self.cfg = cfg
        c = cfg.channels
        self.stem = Sequential(Conv2d(rng, cfg.input_shape[0], c, 3, 1, 1), BatchNorm(c))
        reductions = set(cfg.reductions())
        c_pp, c_p, c_cur = c, c, c
        self.cells = []
        red_prev = False
        for k in range(cfg.cells):
            red = k in reductions
            if red:
                c_cur *= 2
            cell = make_cell(k, c_cur, c_pp, c_p, red, red_prev)
            self.cells.append(cell)
            c_pp, c_p = c_p, cell.out_channels
            red_prev = red
        self.classifier = Linear(rng, c_p, cfg.classes)

    def run_cells(self, state, start: int, stop: int):
        s0, s1 = state
        for cell in self.cells[start:stop]:
            s0, s1 = s1, cell(s0, s1)
        return s0, s1

    def stem_state(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        s = self.stem(x)
        return s, s

    def head(self, state) -> Tensor:
        return self.classifier(ops.global_avg_pool(state[1]))

    def __call__(self, x) -> Tensor:
        return self.head(self.run_cells(self.stem_state(x), 0, len(self.cells)))

    def cut_candidates(self) -> list[int]:
        """Cell indices after which the resolution changes next (-1 = after the stem), plus the last cell."""
        return [r - 1 for r in sorted(self.cfg.reductions())] + [len(self.cells) - 1]


class SuperNet(CellNetwork):
    def __init__(self, cfg: NetConfig, space: OperatorSpace = BASE, seed: int = 0):
        self.space = space
        rng = np.random.default_rng(seed)

        def make_cell(k, c, c_pp, c_p, red, red_prev):
            return SuperCell(k, cfg.nodes, c, c_pp, c_p, red, red_prev, space, rng)
        self._build_skeleton(cfg, rng, make_cell)

    def iter_nodes(self) -> Iterator[MixedNode]:
        for cell in self.cells:
            yield from cell.nodes

    def arch_parameters(self) -> list[Tensor]:
        return [n.alpha for n in self.iter_nodes()]

    def weight_parameters(self) -> list[Tensor]:
        arch = {id(a) for a in self.arch_parameters()}
        return [p for p in self.parameters() if id(p) not in arch]

    def alive_count(self) -> int:
        return int(sum(n.alive.sum() for n in self.iter_nodes()))

    def candidate_count(self) -> int:
        return int(sum(len(n.entries) for n in self.iter_nodes()))

    def alpha_decay_masks(self) -> dict:
        """Weight decay applies to alive α only, and never to a node's last alive op."""
        masks = {}
        for n in self.iter_nodes():
            m = n.alive.astype(n.alpha.data.dtype)
            if n.alive.sum() == 1:
                m[:] = 0
            masks[id(n.alpha)] = m
        return masks

    def alpha_update_masks(self) -> dict:
        return {id(n.alpha): n.alive.astype(n.alpha.data.dtype) for n in self.iter_nodes()}

    def sparsity_entropy(self, K: float = ENTROPY_FLATNESS) -> float:
        return float(sum(node_sparsity_entropy(n.attention_values(), K) for n in self.iter_nodes()))


def build_supernet(cfg: NetConfig, space: OperatorSpace = BASE, seed: int = 0) -> SuperNet:
    return SuperNet(cfg, space, seed)


def attention_weights(node: MixedNode) -> Tensor:
    return node.attention_weights()


def mixed_forward(supernet: SuperNet, x) -> Tensor:
    return supernet(x)


# ------------------------------------------------------------------- pruning

@dataclass
class PruneReport:
    n_prune: int
    pruned: list = field(default_factory=list)


def prune_below_threshold(supernet: SuperNet, eps: float) -> PruneReport:
    """Kill alive operators whose attention weight is below ``eps``.

    Candidates are visited in ascending attention order; the last alive
    operator into a node is never removed.
    """
    if not 0 < eps < 1:
        raise ValueError("threshold must lie in (0, 1)")
    report = PruneReport(0)
    for node in supernet.iter_nodes():
        idx = node.alive_indices()
        delta = node.attention_values()
        order = np.argsort(delta, kind="stable")
        for pos in order:
            if delta[pos] >= eps:
                break
            if node.alive.sum() <= 1:
                break
            k = idx[pos]
            node.alive[k] = False
            source, kind = node.entries[k]
            report.pruned.append((node.cell_index, node.target, source, kind))
            report.n_prune += 1
    return report


# ------------------------------------------------------------ discretisation

@dataclass
class CellArch:
    index: int
    type: str
    nodes: int
    edges: tuple

    def to_dict(self) -> dict:
        return {"index": self.index, "type": self.type, "nodes": self.nodes,
                "edges": [{"from": s, "to": t, "op": o} for s, t, o in self.edges]}


@dataclass
class DiscreteArch:
    cells: list
    channels: int
    step: int = 0
    sparsity_entropy: float = 0.0
    format_version: int = FORMAT_VERSION

    @property
    def op_count(self) -> int:
        return sum(len(c.edges) for c in self.cells)

    def reductions(self) -> tuple:
        return tuple(c.index for c in self.cells if c.type == "reduction")

    def kinds(self) -> set:
        return {o for c in self.cells for _, _, o in c.edges}

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "cells": [c.to_dict() for c in self.cells],
            "channels": self.channels,
            "meta": {"step": self.step, "op_count": self.op_count,
                     "sparsity_entropy": self.sparsity_entropy},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteArch":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported architecture format_version {d.get('format_version')!r}")
        cells = [CellArch(c["index"], c["type"], c["nodes"],
                          tuple((e["from"], e["to"], e["op"]) for e in c["edges"])) for c in d["cells"]]
        meta = d.get("meta", {})
        arch = cls(cells, d["channels"], meta.get("step", 0), meta.get("sparsity_entropy", 0.0))
        if "op_count" in meta and meta["op_count"] != arch.op_count:
            raise ValueError(f"meta.op_count {meta['op_count']} disagrees with {arch.op_count} edges")
        arch.validate()
        return arch

    @classmethod
    def from_json(cls, text: str) -> "DiscreteArch":
        return cls.from_dict(json.loads(text))

    def validate(self, space: Optional[OperatorSpace] = None) -> None:
        for c in self.cells:
            if c.type not in ("normal", "reduction"):
                raise StructuralError(f"cell {c.index}: unknown type {c.type!r}")
            for j in range(2, c.nodes):
                if not any(t == j for _, t, _ in c.edges):
                    raise StructuralError(f"cell {c.index}: node {j} has no incoming operator")
            for s, t, o in c.edges:
                if not 0 <= s < t < c.nodes:
                    raise StructuralError(f"cell {c.index}: bad edge {s}->{t}")
                if space is not None and o not in space:
                    raise StructuralError(f"cell {c.index}: operator {o!r} is outside the space {space.kinds}")
        if len(self.reductions()) != 2:
            raise StructuralError("architecture must contain exactly two reduction cells")


def snapshot_discrete(supernet: SuperNet, step: int = 0) -> DiscreteArch:
    space = supernet.space
    red = set(supernet.cfg.reductions())
    cells = []
    for cell in supernet.cells:
        edges = []
        for node in cell.nodes:
            for k in node.alive_indices():
                s, kind = node.entries[k]
                edges.append((s, node.target, kind))
        edges.sort(key=lambda e: (e[1], e[0], space.rank(e[2])))
        cells.append(CellArch(cell.index, "reduction" if cell.index in red else "normal",
                              supernet.cfg.nodes, tuple(edges)))
    return DiscreteArch(cells, supernet.cfg.channels, step, supernet.sparsity_entropy())


# --------------------------------------------------------- discrete networks

class DiscreteCell(Module):
    def __init__(self, arch_cell: CellArch, channels, c_prev_prev, c_prev, reduction_prev, rng):
        self.index = arch_cell.index
        self.reduction = arch_cell.type == "reduction"
        self.channels = channels
        self.n_nodes = arch_cell.nodes
        self.pre0 = relu_conv_bn(rng, c_prev_prev, channels, 1, 2 if reduction_prev else 1)
        self.pre1 = relu_conv_bn(rng, c_prev, channels, 1)
        self.edges = list(arch_cell.edges)
        self.ops = [make_op(o, channels, 2 if self.reduction and s < 2 else 1, rng) for s, _, o in self.edges]
        self.drop_prob = 0.0
        self.rng: Optional[np.random.Generator] = None

    @property
    def out_channels(self) -> int:
        return self.channels * (self.n_nodes - 2)

    def __call__(self, s0, s1):
        states = [self.pre0(s0), self.pre1(s1)]
        for j in range(2, self.n_nodes):
            acc = None
            for (s, t, _), op in zip(self.edges, self.ops):
                if t != j:
                    continue
                h = op(states[s])
                if self.training and self.drop_prob > 0 and not isinstance(op, Identity):
                    keep = 1.0 - self.drop_prob
                    mask = (self.rng.random(h.shape[0]) < keep).astype(h.data.dtype) / keep
                    h = h * Tensor(mask[:, None, None, None])
                acc = h if acc is None else acc + h
            states.append(acc)
        return ops.concat(states[2:], axis=1)


class DiscreteNet(CellNetwork):
    """Standalone network for a discrete architecture; nodes are plain sums."""

    def __init__(self, arch: DiscreteArch, cfg: NetConfig, seed: int = 0, drop_path: float = 0.0):
        self.arch = arch
        rng = np.random.default_rng(seed)
        cells = {c.index: c for c in arch.cells}

        def make_cell(k, c, c_pp, c_p, red, red_prev):
            return DiscreteCell(cells[k], c, c_pp, c_p, red_prev, rng)
        self._build_skeleton(cfg, rng, make_cell)
        self.drop_rng = np.random.default_rng([seed, 1])
        self.set_drop_path(drop_path)

    def set_drop_path(self, prob: float) -> None:
        if not 0 <= prob < 1:
            raise ValueError("drop-path probability must lie in [0, 1)")
        for cell in self.cells:
            cell.drop_prob = prob
            cell.rng = self.drop_rng


def instantiate_discrete(arch: DiscreteArch, channels: int, input_shape, classes: int,
                         space: OperatorSpace = BASE, seed: int = 0, drop_path: float = 0.0) -> DiscreteNet:
    arch.validate(space)
    nodes = {c.nodes for c in arch.cells}
    if len(nodes) != 1:
        raise StructuralError(f"cells disagree on node count: {sorted(nodes)}")
    cfg = NetConfig(cells=len(arch.cells), nodes=nodes.pop(), channels=channels,
                    input_shape=tuple(input_shape), classes=classes, reduction_cells=arch.reductions())
    return DiscreteNet(arch, cfg, seed, drop_path)


def export_dot(arch: DiscreteArch) -> str:
    """One digraph per cell; skip connections are drawn in red."""
    colors = {SKIP: "red", SEP_CONV: "blue", DIL_CONV: "darkgreen", MAX_POOL: "orange", AVG_POOL: "purple"}
    lines = []
    for c in arch.cells:
        lines.append(f'digraph cell_{c.index} {{')
        lines.append(f'  label="cell {c.index} ({c.type})";')
        lines.append('  rankdir=LR;')
        names = ["c_{k-2}", "c_{k-1}"] + [str(j - 2) for j in range(2, c.nodes)] + ["c_{k}"]
        for j, name in enumerate(names):
            shape = "box" if j < 2 or j == c.nodes else "ellipse"
            lines.append(f'  n{j} [label="{name}", shape={shape}];')
        for s, t, o in c.edges:
            lines.append(f'  n{s} -> n{t} [label="{o}", color={colors[o]}];')
        for j in range(2, c.nodes):
            lines.append(f'  n{j} -> n{c.nodes} [color=gray];')
        lines.append('}')
    return "\n".join(lines) + "\n"
