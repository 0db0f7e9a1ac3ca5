"""Run configuration: one validated JSON document covering data, supernet,
search, controller, distillation, teacher and retraining settings.

Named presets carry the CIFAR-10 and ImageNet hyper-parameters and a
desk-scale preset small enough to finish on a single CPU core.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .controller import ControllerConfig
from .data import Dataset, gen_synthetic, load_idx
from .driver import Mode, SearchConfig
from .objectives import KDConfig, KDVariant
from .search_space import NetConfig, OperatorSpace
from .training import RetrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSpec(_Strict):
    kind: Literal["synthetic", "idx"] = "synthetic"
    classes: int = Field(10, ge=2)
    per_class: int = Field(100, ge=1)
    size: int = Field(16, ge=4)
    channels: int = Field(3, ge=1)
    noise: float = Field(1.0, ge=0)
    shared: float = Field(0.7, ge=0, lt=1)
    val_fraction: float = Field(0.2, gt=0, lt=1)
    images: Optional[str] = None
    labels: Optional[str] = None

    @model_validator(mode="after")
    def _paths(self):
        if self.kind == "idx" and not (self.images and self.labels):
            raise ValueError("data.images and data.labels are required for kind 'idx'")
        return self


class NetSpec(_Strict):
    cells: int = Field(8, ge=2)
    nodes: int = Field(5, ge=3)
    channels: int = Field(16, ge=1)
    space: Literal["base", "base+maxpool", "base+avgpool"] = "base"


class ControllerSpec(_Strict):
    gamma0: float = Field(1e-4, gt=0)
    gamma_grow: float = Field(1.01, gt=1)
    gamma_shrink: float = Field(0.99, gt=0, lt=1)
    gamma_max: float = Field(0.01, gt=0)
    tau_max: int = Field(50, ge=0)
    mu0: float = Field(0.01, ge=0)
    mu_grow: float = Field(1.5, gt=1)
    n_expect: float = Field(0.003, gt=0)
    rho: float = Field(0.9, ge=0, lt=1)
    eps: float = Field(0.01, gt=0, lt=1)
    interval: int = Field(500, ge=0)
    ls_min: Union[float, Literal["auto"]] = 200.0

    @model_validator(mode="after")
    def _gamma(self):
        if self.gamma0 > self.gamma_max:
            raise ValueError("controller.gamma0 must not exceed controller.gamma_max")
        return self


class KDSpec(_Strict):
    variant: Literal["none", "st", "at", "st+at"] = "at"
    beta: float = Field(1e3, gt=0)
    temperature: float = Field(4.0, ge=1)
    blocks: int = Field(3, ge=1)
    kl_direction: Literal["student_teacher", "teacher_student"] = "student_teacher"


class SearchSpec(_Strict):
    mode: Literal["snps", "dnad"] = "snps"
    w_lr: float = Field(5e-3, gt=0)
    w_betas: tuple[float, float] = (0.5, 0.999)
    w_weight_decay: float = Field(3e-4, ge=0)
    alpha_lr: float = Field(0.2, gt=0)
    alpha_momentum: float = Field(0.9, ge=0, lt=1)
    alpha_weight_decay: float = Field(3e-4, ge=0)
    warmup_epochs: int = Field(5, ge=0)
    warmup_alpha: bool = True
    batch_size: int = Field(96, ge=1)
    max_steps: int = Field(100_000, ge=0)

    @model_validator(mode="after")
    def _betas(self):
        if not all(0 <= b < 1 for b in self.w_betas):
            raise ValueError("search.w_betas must lie in [0, 1)")
        return self


class RetrainSpec(_Strict):
    epochs: int = Field(600, ge=1)
    batch_size: int = Field(96, ge=1)
    lr: float = Field(0.025, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(3e-4, ge=0)
    cutout: int = Field(16, ge=0)
    drop_path: float = Field(0.3, ge=0, lt=1)
    channels: int = Field(36, ge=1)
    eval_batch: int = Field(250, ge=1)


class TeacherSpec(_Strict):
    width: int = Field(16, ge=1)
    epochs: int = Field(600, ge=1)
    batch_size: int = Field(96, ge=1)
    lr: float = Field(0.025, gt=0)
    cutout: int = Field(16, ge=0)


class RunConfig(_Strict):
    preset: Optional[str] = None
    seed: int = Field(0, ge=0)
    out: Optional[str] = None
    data: DataSpec = DataSpec()
    net: NetSpec = NetSpec()
    search: SearchSpec = SearchSpec()
    controller: ControllerSpec = ControllerSpec()
    kd: KDSpec = KDSpec()
    teacher: TeacherSpec = TeacherSpec()
    retrain: RetrainSpec = RetrainSpec()

    # -------------------------------------------------------- conversions

    def dataset(self) -> Dataset:
        d = self.data
        if d.kind == "idx":
            return load_idx(d.images, d.labels, d.classes, d.val_fraction, self.seed)
        return gen_synthetic(d.classes, d.per_class, d.size, d.channels, d.noise, self.seed,
                             d.val_fraction, d.shared)

    def space(self) -> OperatorSpace:
        return OperatorSpace.preset(self.net.space)

    def controller_config(self) -> ControllerConfig:
        c = self.controller.model_dump()
        c["ls_min"] = 0.0 if c["ls_min"] == "auto" else c["ls_min"]
        return ControllerConfig(**c)

    def kd_config(self) -> KDConfig:
        return KDConfig(**{**self.kd.model_dump(), "variant": KDVariant(self.kd.variant)})

    def search_config(self) -> SearchConfig:
        s = self.search.model_dump()
        n = self.net
        return SearchConfig(mode=Mode(s.pop("mode")), kd=self.kd_config(),
                            net=NetConfig(cells=n.cells, nodes=n.nodes, channels=n.channels,
                                          input_shape=(self.data.channels, self.data.size, self.data.size),
                                          classes=self.data.classes),
                            space=self.space(), controller=self.controller_config(), seed=self.seed,
                            auto_ls_min=self.controller.ls_min == "auto", **s)

    def retrain_config(self, seed: Optional[int] = None) -> RetrainConfig:
        return RetrainConfig(**self.retrain.model_dump(), seed=self.seed if seed is None else seed)

    def teacher_config(self) -> RetrainConfig:
        t = self.teacher
        return RetrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, cutout=t.cutout,
                             drop_path=0.0, channels=t.width, seed=self.seed)

    def to_json(self) -> str:
        """Canonical JSON without the output location, so run trees compare equal."""
        return json.dumps(self.model_dump(mode="json", exclude={"out"}), sort_keys=True, indent=1) + "\n"


# ------------------------------------------------------------------ presets

PRESETS: dict[str, dict] = {
    "cifar10": {
        "data": {"kind": "idx", "classes": 10, "size": 32, "channels": 3,
                 "images": "cifar10-images.idx", "labels": "cifar10-labels.idx"},
        "net": {"cells": 14, "nodes": 6, "channels": 20},
        "search": {"batch_size": 96, "warmup_epochs": 5},
        "controller": {},
        "teacher": {"width": 64},
        "retrain": {"epochs": 600, "batch_size": 96, "channels": 36, "cutout": 16, "drop_path": 0.3},
    },
    "imagenet": {
        "data": {"kind": "idx", "classes": 1000, "size": 224, "channels": 3,
                 "images": "imagenet-images.idx", "labels": "imagenet-labels.idx"},
        "net": {"cells": 14, "nodes": 6, "channels": 20},
        "search": {"batch_size": 256, "warmup_epochs": 5},
        "controller": {"gamma0": 1e-6, "gamma_max": 1e-4, "rho": 0.99, "n_expect": 2e-4},
        "teacher": {"width": 64, "cutout": 0},
        "retrain": {"epochs": 250, "batch_size": 256, "channels": 48, "lr": 0.25, "weight_decay": 3e-5,
                    "cutout": 0},
    },
    # single-core scale: small synthetic task, narrow supernet, fast controller
    "desk": {
        "data": {"kind": "synthetic", "classes": 10, "per_class": 100, "size": 16, "channels": 3,
                 "noise": 1.0, "shared": 0.7},
        "net": {"cells": 8, "nodes": 5, "channels": 8},
        "search": {"batch_size": 16, "warmup_epochs": 1, "max_steps": 4000},
        "controller": {"gamma0": 1e-3, "gamma_grow": 1.05, "gamma_max": 0.05, "n_expect": 0.5,
                       "interval": 20, "ls_min": "auto"},
        # beta per spatial position of the 16x16 first block, so the attention term starts near L_A
        "kd": {"beta": 1e3 / 256},
        "teacher": {"width": 16, "epochs": 10, "batch_size": 32, "cutout": 4},
        "retrain": {"epochs": 8, "batch_size": 32, "channels": 8, "cutout": 4, "drop_path": 0.1},
    },
}


def merge_docs(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_docs(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def build_config(doc: Optional[dict] = None, **overrides) -> RunConfig:
    """Validate a config document, expanding ``preset`` first.

    Keys in ``doc`` override the preset; ``overrides`` (e.g. ``seed``)
    override both.
    """
    doc = dict(doc or {})
    name = doc.get("preset")
    if name is not None:
        if name not in PRESETS:
            raise ValueError(f"preset: unknown preset {name!r}, choose from {sorted(PRESETS)}")
        doc = merge_docs(PRESETS[name], doc)
    doc = merge_docs(doc, {k: v for k, v in overrides.items() if v is not None})
    return RunConfig.model_validate(doc)


def preset(name: str, **overrides) -> RunConfig:
    return build_config({"preset": name}, **overrides)


def load_config(path, **overrides) -> RunConfig:
    return build_config(json.loads(Path(path).read_text()), **overrides)
