"""Datasets: IDX files, the synthetic desk task, batching and cutout."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

IMAGES_MAGIC = 0x00000803
IMAGES4_MAGIC = 0x00000804
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Standardised images with a fixed train/validation split.

    ``raw`` keeps the original 8-bit pixels; ``images`` are scaled to
    [0, 1] and standardised per channel with statistics of the training
    split only.
    """

    raw: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    classes: int
    mean: np.ndarray
    std: np.ndarray
    images: np.ndarray

    @classmethod
    def from_raw(cls, raw: np.ndarray, labels: np.ndarray, classes: Optional[int] = None,
                 val_fraction: float = 0.2, seed: int = 0) -> "Dataset":
        raw = np.asarray(raw, dtype=np.uint8)
        labels = np.asarray(labels, dtype=np.int64)
        if raw.ndim != 4:
            raise ValueError(f"images must be (count, channels, height, width), got {raw.shape}")
        if len(raw) != len(labels):
            raise ValueError(f"{len(raw)} images but {len(labels)} labels")
        classes = int(labels.max()) + 1 if classes is None else classes
        if labels.min() < 0 or labels.max() >= classes:
            raise ValueError(f"labels must lie in [0, {classes})")
        if not 0 <= val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        order = np.random.default_rng(seed).permutation(len(raw))
        n_val = int(round(val_fraction * len(raw)))
        val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        scaled = raw.astype(np.float64) / 255.0
        mean = scaled[train_idx].mean(axis=(0, 2, 3))
        std = scaled[train_idx].std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
        images = ((scaled - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)
        return cls(raw, labels, train_idx, val_idx, classes, mean, std, images)

    @classmethod
    def from_scaled(cls, images: np.ndarray, labels: np.ndarray, classes: Optional[int] = None,
                    val_fraction: float = 0.2, seed: int = 0) -> "Dataset":
        """Build from float images already scaled to [0, 1] (``raw`` is their 8-bit rendering)."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4:
            raise ValueError(f"images must be (count, channels, height, width), got {images.shape}")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise ValueError("scaled images must lie in [0, 1]")
        ds = cls.from_raw(np.round(images * 255).astype(np.uint8), labels, classes, val_fraction, seed)
        mean = images[ds.train_idx].mean(axis=(0, 2, 3))
        std = images[ds.train_idx].std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
        ds.mean, ds.std = mean, std
        ds.images = ((images - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)
        return ds

    @property
    def shape(self) -> tuple:
        return self.images.shape

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "val": self.val_idx}[name]
        return self.images[idx], self.labels[idx]


# ------------------------------------------------------------------------ IDX

def _read_idx(path, expected: tuple) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic not in expected:
        raise IdxFormatError(f"{path}: unexpected magic 0x{magic:08x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(data) < end:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:end])
    n = int(np.prod(dims))
    if len(data) - end < n:
        raise IdxFormatError(f"{path}: truncated payload, expected {n} bytes, found {len(data) - end}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=end).reshape(dims)


def load_idx(images_path, labels_path, classes: Optional[int] = None,
             val_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Parse an IDX image/label pair into a standardised Dataset.

    Images use magic 0x00000803 (count, rows, cols) or 0x00000804
    (count, channels, rows, cols); labels use 0x00000801.
    """
    images = _read_idx(images_path, (IMAGES_MAGIC, IMAGES4_MAGIC))
    labels = _read_idx(labels_path, (LABELS_MAGIC,))
    if images.ndim == 3:
        images = images[:, None]
    if len(images) != len(labels):
        raise IdxFormatError(f"image count {len(images)} does not match label count {len(labels)}")
    return Dataset.from_raw(images, labels, classes, val_fraction, seed)


def write_idx(images_path, labels_path, raw: np.ndarray, labels: np.ndarray) -> None:
    raw = np.asarray(raw, dtype=np.uint8)
    if raw.ndim == 4 and raw.shape[1] == 1:
        raw = raw[:, 0]
    magic = IMAGES_MAGIC if raw.ndim == 3 else IMAGES4_MAGIC
    Path(images_path).write_bytes(struct.pack(">I", magic) + struct.pack(f">{raw.ndim}I", *raw.shape)
                                  + raw.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels))
                                  + np.asarray(labels, dtype=np.uint8).tobytes())


# ------------------------------------------------------------------ synthetic

def _upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinear upsampling of (..., g, g) to (..., size, size)."""
    g = grid.shape[-1]
    pos = (np.arange(size) + 0.5) * g / size - 0.5
    lo = np.clip(np.floor(pos).astype(int), 0, g - 1)
    hi = np.clip(lo + 1, 0, g - 1)
    f = np.clip(pos - lo, 0, 1)
    rows = grid[..., lo, :] * (1 - f)[:, None] + grid[..., hi, :] * f[:, None]
    return rows[..., lo] * (1 - f) + rows[..., hi] * f


def gen_synthetic(classes: int = 10, per_class: int = 200, size: int = 16, channels: int = 3,
                  noise: float = 1.0, seed: int = 0, val_fraction: float = 0.2,
                  shared: float = 0.7) -> Dataset:
    """Class-conditional images: a smooth random template per class, jittered.

    Templates mix a component common to all classes (weight ``shared``)
    with a class-specific one, so classes differ only in part of the
    image. ``noise`` scales both the additive pixel noise and the random
    circular shift (up to ``ceil(noise * size / 4)`` pixels); ``noise=0``
    gives identical samples within a class.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if not 0 <= shared < 1:
        raise ValueError("shared must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    coarse = max(2, size // 4)
    common = _upsample(rng.normal(size=(1, channels, coarse, coarse)), size)
    own = _upsample(rng.normal(size=(classes, channels, coarse, coarse)), size)
    templates = shared * common + (1 - shared) * own
    templates /= templates.std(axis=(1, 2, 3), keepdims=True)
    labels = np.repeat(np.arange(classes), per_class)
    x = templates[labels].copy()
    if noise > 0:
        max_shift = int(np.ceil(noise * size / 4))
        shifts = rng.integers(-max_shift, max_shift + 1, size=(len(x), 2))
        for n, (dy, dx) in enumerate(shifts):
            x[n] = np.roll(x[n], (dy, dx), axis=(1, 2))
        x += noise * rng.normal(size=x.shape)
    raw = np.clip(np.round((0.5 + 0.2 * x) * 255), 0, 255).astype(np.uint8)
    return Dataset.from_raw(raw, labels, classes, val_fraction, seed)


# ------------------------------------------------------------------- batching

def iterate_batches(n: int, batch_size: int, rng: np.random.Generator,
                    drop_last: bool = True) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for start in range(0, stop, batch_size):
        yield order[start:start + batch_size]


def apply_cutout(batch: np.ndarray, size: int, rng: np.random.Generator,
                 centers: Optional[np.ndarray] = None) -> np.ndarray:
    """Zero one ``size`` x ``size`` square per image at a uniformly random center.

    Windows overhanging the border are clamped. ``centers`` (count, 2) may
    force the centers.
    """
    if size <= 0:
        return batch
    out = batch.copy()
    n, _, h, w = out.shape
    if centers is None:
        centers = np.stack([rng.integers(0, h, n), rng.integers(0, w, n)], axis=1)
    half = size // 2
    for k, (cy, cx) in enumerate(centers):
        y0, y1 = max(0, cy - half), min(h, cy - half + size)
        x0, x1 = max(0, cx - half), min(w, cx - half + size)
        out[k, :, y0:y1, x0:x1] = 0.0
    return out
