"""Teacher networks and block-wise feature-map collection for attention transfer."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .layers import Linear, Module, Sequential, conv_bn_relu
from .search_space import CellNetwork
from .tensor import Tensor, no_record, ops
from .training import RetrainConfig, evaluate, train_network

TEACHER_MAGIC = b"DNADTCH\x00"
TEACHER_VERSION = 1


class TeacherFormatError(ValueError):
    pass


class CompatibilityError(ValueError):
    def __init__(self, block: int, student, teacher):
        super().__init__(f"block {block}: student resolution {student} != teacher resolution {teacher}")
        self.block = block


class TeacherNet(Module):
    """Plain convolutional network: per stage two conv-norm-ReLU layers,
    the first of which carries the stage stride."""

    def __init__(self, input_shape=(3, 16, 16), classes=10, width=16, strides=(1, 2, 2), seed=0):
        self.input_shape = tuple(input_shape)
        self.classes = classes
        self.width = width
        self.strides = tuple(strides)
        rng = np.random.default_rng(seed)
        c_in = input_shape[0]
        self.stages = []
        for k, s in enumerate(self.strides):
            c = width * 2 ** k
            self.stages.append(Sequential(conv_bn_relu(rng, c_in, c, 3, s, 1), conv_bn_relu(rng, c, c, 3, 1, 1)))
            c_in = c
        self.classifier = Linear(rng, c_in, classes)

    def descriptor(self) -> dict:
        return {"kind": "plain_conv", "input_shape": list(self.input_shape), "classes": self.classes,
                "width": self.width, "strides": list(self.strides)}

    def resolutions(self) -> list[int]:
        h = self.input_shape[1]
        out = []
        for s in self.strides:
            h = (h + 2 - 3) // s + 1
            out.append(h)
        return out

    def forward_blocks(self, x, cuts: Sequence[int]):
        x = x if isinstance(x, Tensor) else Tensor(x)
        maps = []
        for k, stage in enumerate(self.stages):
            x = stage(x)
            if k in cuts:
                maps.append(x)
        return maps, self.classifier(ops.global_avg_pool(x))

    def __call__(self, x):
        return self.forward_blocks(x, ())[1]


# ------------------------------------------------------------ partitioning

@dataclass
class BlockPartition:
    """Cut points of a network into M consecutive segments.

    For cell networks a cut is a cell index (-1 means right after the
    stem); for teachers it is a stage index. The final segment continues
    through the classifier head.
    """

    kind: str
    cuts: tuple
    resolutions: tuple

    @property
    def blocks(self) -> int:
        return len(self.cuts)


def _cell_resolution(net: CellNetwork, cut: int) -> int:
    h = net.cfg.input_shape[1]
    for r in sorted(net.cfg.reductions()):
        if r <= cut:
            h = (h + 1) // 2
    return h


def partition_blocks(net, blocks: int = 3) -> BlockPartition:
    """Cut before every resolution change and at the end, keeping the last ``blocks`` cuts."""
    if blocks < 1:
        raise ValueError("need at least one block")
    if isinstance(net, TeacherNet):
        cuts = list(range(len(net.stages)))
        res = net.resolutions()
        kind = "teacher"
    elif isinstance(net, CellNetwork):
        cuts = net.cut_candidates()
        res = [_cell_resolution(net, c) for c in cuts]
        kind = "cells"
    else:
        raise TypeError(f"cannot partition {type(net).__name__}")
    if blocks > len(cuts):
        raise ValueError(f"network offers {len(cuts)} resolution blocks, {blocks} requested")
    return BlockPartition(kind, tuple(cuts[-blocks:]), tuple(res[-blocks:]))


def check_compatible(student: BlockPartition, teacher: BlockPartition) -> None:
    if student.blocks != teacher.blocks:
        raise ValueError(f"student has {student.blocks} blocks, teacher {teacher.blocks}")
    for k, (s, t) in enumerate(zip(student.resolutions, teacher.resolutions), start=1):
        if s != t:
            raise CompatibilityError(k, s, t)


def collect_feature_maps(net, partition: BlockPartition, x):
    """Block-end feature maps and the logits from one composed pass.

    Teacher maps are detached; student maps stay on the tape.
    """
    if isinstance(net, TeacherNet):
        with no_record():
            maps, logits = net.forward_blocks(x, partition.cuts)
        return [Tensor(m.data) for m in maps], Tensor(logits.data)
    state = net.stem_state(x)
    maps = []
    prev = -1
    for cut in partition.cuts:
        state = net.run_cells(state, prev + 1, cut + 1)
        maps.append(state[1])
        prev = cut
    state = net.run_cells(state, prev + 1, len(net.cells))
    return maps, net.head(state)


# ----------------------------------------------------------------- bundles

@dataclass
class TeacherBundle:
    net: TeacherNet
    accuracy: float
    blocks: int = 3
    meta: dict = field(default_factory=dict)

    @property
    def partition(self) -> BlockPartition:
        return partition_blocks(self.net, self.blocks)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for _, p in self.net.named_parameters(include_frozen=True):
            h.update(p.data.tobytes())
        return h.hexdigest()

    def feature_maps(self, x):
        return collect_feature_maps(self.net, self.partition, x)


def save_teacher(bundle: TeacherBundle, path) -> None:
    named = list(bundle.net.named_parameters(include_frozen=True))
    header = {
        "format_version": TEACHER_VERSION,
        "arch": bundle.net.descriptor(),
        "accuracy": bundle.accuracy,
        "blocks": bundle.blocks,
        "meta": bundle.meta,
        "tensors": [{"name": n, "shape": list(p.shape), "dtype": p.data.dtype.str.lstrip("<>=|")}
                    for n, p in named],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [TEACHER_MAGIC, struct.pack("<I", len(hb)), hb]
    for _, p in named:
        payload = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<")).tobytes()
        parts += [struct.pack("<Q", len(payload)), payload]
    Path(path).write_bytes(b"".join(parts))


def load_teacher(path) -> TeacherBundle:
    data = Path(path).read_bytes()
    if data[:8] != TEACHER_MAGIC:
        raise TeacherFormatError(f"{path}: not a teacher container (bad magic)")
    if len(data) < 12:
        raise TeacherFormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise TeacherFormatError(f"{path}: truncated header")
    header = json.loads(data[12:12 + hlen])
    if header.get("format_version") != TEACHER_VERSION:
        raise TeacherFormatError(f"{path}: unsupported format_version {header.get('format_version')!r}")
    arch = header["arch"]
    net = TeacherNet(tuple(arch["input_shape"]), arch["classes"], arch["width"], tuple(arch["strides"]))
    named = dict(net.named_parameters(include_frozen=True))
    pos = 12 + hlen
    arrays = {}
    for spec in header["tensors"]:
        if pos + 8 > len(data):
            raise TeacherFormatError(f"{path}: truncated before tensor {spec['name']}")
        (n,) = struct.unpack("<Q", data[pos:pos + 8])
        pos += 8
        if pos + n > len(data):
            raise TeacherFormatError(f"{path}: truncated payload of tensor {spec['name']}")
        arr = np.frombuffer(data[pos:pos + n], dtype=np.dtype("<" + spec["dtype"])).reshape(spec["shape"])
        pos += n
        if spec["name"] not in named or named[spec["name"]].shape != arr.shape:
            raise TeacherFormatError(f"{path}: tensor {spec['name']} does not fit the declared architecture")
        arrays[spec["name"]] = arr
    if pos != len(data) or set(arrays) != set(named):
        raise TeacherFormatError(f"{path}: tensor table does not match payload")
    for name, p in named.items():
        p.data = arrays[name].astype(arrays[name].dtype.newbyteorder("="))
    net.freeze()
    return TeacherBundle(net, header["accuracy"], header["blocks"], header.get("meta", {}))


def train_teacher(dataset: Dataset, cfg: RetrainConfig, width: int = 16, blocks: int = 3,
                  strides: Optional[Sequence[int]] = None) -> TeacherBundle:
    strides = tuple(strides) if strides is not None else (1,) + (2,) * (blocks - 1)
    net = TeacherNet(dataset.input_shape, dataset.classes, width, strides, seed=cfg.seed)
    report = train_network(net, dataset, cfg)
    net.freeze()
    _, acc = evaluate(net, *dataset.split("val"))
    return TeacherBundle(net, acc, blocks, {"epochs": cfg.epochs, "seed": cfg.seed,
                                             "best_val_acc": report.best_val_acc})
