"""scikit-learn style wrappers around the search and the retraining recipe.

Images are passed as ``(count, channels, height, width)`` arrays with
values in [0, 1]; labels may be any hashable class values.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .controller import ControllerConfig
from .data import Dataset
from .distillation import TeacherBundle
from .driver import Mode, ParetoSet, Search, SearchConfig
from .objectives import KDConfig
from .search_space import BASE, DiscreteArch, NetConfig, OperatorSpace, instantiate_discrete
from .tensor import Tensor, no_record, ops
from .training import RetrainConfig, train_network


def _check_images(X, y=None):
    if y is None:
        X = check_array(X, allow_nd=True, dtype=np.float64)
    else:
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (count, channels, height, width), got {X.shape}")
    return X, y


class ArchitectureSearch(BaseEstimator):
    """Progressive shrinking search; ``fit`` leaves the snapshot set in ``pareto_set_``."""

    def __init__(self, mode: str = "snps", kd_variant: str = "at", teacher: Optional[TeacherBundle] = None,
                 beta: float = 1e3 / 256, cells: int = 8, nodes: int = 5, channels: int = 8, space: OperatorSpace = BASE,
                 batch_size: int = 16, warmup_epochs: int = 1, max_steps: int = 4000,
                 controller: Optional[ControllerConfig] = None, auto_ls_min: bool = True,
                 val_fraction: float = 0.2, random_state: int = 0):
        self.mode = mode
        self.kd_variant = kd_variant
        self.teacher = teacher
        self.beta = beta
        self.cells = cells
        self.nodes = nodes
        self.channels = channels
        self.space = space
        self.batch_size = batch_size
        self.warmup_epochs = warmup_epochs
        self.max_steps = max_steps
        self.controller = controller
        self.auto_ls_min = auto_ls_min
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _search_config(self) -> SearchConfig:
        ctl = self.controller or ControllerConfig(gamma0=1e-3, gamma_grow=1.05, gamma_max=0.05,
                                                  n_expect=0.5, interval=20)
        return SearchConfig(mode=Mode(self.mode), kd=KDConfig(variant=self.kd_variant, beta=self.beta),
                            net=NetConfig(cells=self.cells, nodes=self.nodes, channels=self.channels),
                            space=self.space, controller=ctl, batch_size=self.batch_size,
                            warmup_epochs=self.warmup_epochs, max_steps=self.max_steps,
                            seed=self.random_state, auto_ls_min=self.auto_ls_min)

    def fit(self, X, y):
        X, y = _check_images(X, y)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        ds = Dataset.from_scaled(X, self.label_encoder_.transform(y), len(self.classes_),
                                 self.val_fraction, self.random_state)
        search = Search(ds, self._search_config(), self.teacher)
        self.pareto_set_: ParetoSet = search.run()
        self.search_ = search
        self.final_arch_: DiscreteArch = search.final_arch()
        self.n_steps_ = search.step
        return self

    @property
    def archs_(self) -> list:
        check_is_fitted(self, "pareto_set_")
        return self.pareto_set_.archs


class DiscreteNetClassifier(ClassifierMixin, BaseEstimator):
    """Train a discrete architecture from scratch and use it as a classifier."""

    def __init__(self, arch: Optional[DiscreteArch] = None, channels: int = 8, epochs: int = 8,
                 batch_size: int = 32, lr: float = 0.025, momentum: float = 0.9, weight_decay: float = 3e-4,
                 cutout: int = 4, drop_path: float = 0.1, space: OperatorSpace = BASE,
                 val_fraction: float = 0.2, random_state: int = 0):
        self.arch = arch
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.cutout = cutout
        self.drop_path = drop_path
        self.space = space
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y):
        if self.arch is None:
            raise ValueError("arch must be set before fit")
        X, y = _check_images(X, y)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        ds = Dataset.from_scaled(X, self.label_encoder_.transform(y), len(self.classes_),
                                 self.val_fraction, self.random_state)
        self.mean_, self.std_ = ds.mean, ds.std
        cfg = RetrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                            weight_decay=self.weight_decay, cutout=self.cutout, drop_path=self.drop_path,
                            channels=self.channels, seed=self.random_state)
        self.net_ = instantiate_discrete(self.arch, self.channels, ds.input_shape, len(self.classes_),
                                         self.space, seed=self.random_state, drop_path=self.drop_path)
        self.report_ = train_network(self.net_, ds, cfg)
        self.n_features_in_ = int(np.prod(ds.input_shape))
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X, _ = _check_images(X)
        z = ((X - self.mean_[None, :, None, None]) / self.std_[None, :, None, None]).astype(np.float32)
        self.net_.eval()
        with no_record():
            out = np.concatenate([self.net_(Tensor(z[k:k + 250])).data for k in range(0, len(z), 250)])
        self.net_.train()
        return out

    def predict_proba(self, X) -> np.ndarray:
        with no_record():
            return ops.softmax(Tensor(self._logits(X).astype(np.float64))).data

    def predict(self, X) -> np.ndarray:
        logits = self._logits(X)
        return self.classes_[logits.argmax(axis=1)]
