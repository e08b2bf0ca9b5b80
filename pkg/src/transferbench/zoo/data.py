"""Desk-scale datasets: a seeded synthetic shapes task and a CIFAR binary loader.

The synthetic generator draws one of ten geometric glyphs per image with
jittered position, size and colors plus Gaussian texture noise. It is fully
deterministic given the split seed, which keeps the benchmark free of any
download or filesystem dependency.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DataError

NUM_SHAPES = 10


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    path: str | None = None
    num_classes: int = 10
    image_size: int = 32
    train_size: int = 4000
    test_size: int = 1000
    seed: int = 0
    noise: float = 0.05

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar-binary"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source == "synthetic" and self.num_classes != NUM_SHAPES:
            raise ConfigError("the synthetic task defines exactly 10 classes")

    def fingerprint(self) -> dict:
        return {
            "source": self.source,
            "path": self.path,
            "num_classes": self.num_classes,
            "image_size": self.image_size,
            "train_size": self.train_size,
            "test_size": self.test_size,
            "seed": self.seed,
            "noise": self.noise,
        }

    def load(self):
        if self.source == "synthetic":
            x_tr, y_tr = synthetic_split(self.train_size, self.image_size, self.seed * 2 + 1, self.noise)
            x_te, y_te = synthetic_split(self.test_size, self.image_size, self.seed * 2 + 2, self.noise)
            return x_tr, y_tr, x_te, y_te
        return load_cifar_binary(self.path, self.train_size, self.test_size)


def _shape_mask(kind, dx, dy, s):
    adx, ady = np.abs(dx), np.abs(dy)
    if kind == 0:  # disk
        return dx * dx + dy * dy <= s * s
    if kind == 1:  # square
        return np.maximum(adx, ady) <= 0.8 * s
    if kind == 2:  # triangle, apex up
        return (dy >= -0.9 * s) & (dy <= 0.9 * s) & (adx <= 0.55 * (0.9 * s - dy))
    if kind == 3:  # ring
        r2 = dx * dx + dy * dy
        return (r2 <= s * s) & (r2 >= (0.55 * s) ** 2)
    if kind == 4:  # plus
        return ((adx <= 0.3 * s) & (ady <= s)) | ((ady <= 0.3 * s) & (adx <= s))
    if kind == 5:  # diamond
        return adx + ady <= s
    if kind == 6:  # horizontal bar
        return (ady <= 0.35 * s) & (adx <= s)
    if kind == 7:  # vertical bar
        return (adx <= 0.35 * s) & (ady <= s)
    if kind == 8:  # diagonal cross
        return (np.abs(adx - ady) <= 0.35 * s) & (np.maximum(adx, ady) <= s)
    if kind == 9:  # hollow square frame
        m = np.maximum(adx, ady)
        return (m <= s) & (m >= 0.55 * s)
    raise ConfigError(f"no shape with id {kind}")


def synthetic_split(n, size, seed, noise=0.05):
    """Balanced, shuffled split of the 10-glyph task; NCHW float32 in [0,1]."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % NUM_SHAPES
    rng.shuffle(labels)
    grid = np.arange(size, dtype=np.float32)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        cx = rng.uniform(0.38 * size, 0.62 * size)
        cy = rng.uniform(0.38 * size, 0.62 * size)
        s = rng.uniform(0.22 * size, 0.34 * size)
        mask = _shape_mask(int(labels[i]), xx - cx, yy - cy, s)
        bg = rng.uniform(0.05, 0.40, size=3).astype(np.float32)
        fg = rng.uniform(0.60, 0.95, size=3).astype(np.float32)
        img = np.where(mask[None, :, :], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, noise, size=img.shape).astype(np.float32)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# CIFAR binary batches: 3073-byte records, one label byte + 3072 pixel bytes


RECORD = 3073
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"


def _read_records(path, limit):
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read CIFAR batch {path}: {exc}") from exc
    if raw.size % RECORD:
        raise DataError(f"{path} is not a multiple of the {RECORD}-byte record size")
    raw = raw.reshape(-1, RECORD)[:limit]
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar_binary(path, train_size, test_size):
    if not path or not os.path.isdir(path):
        raise DataError(f"cifar-binary dataset needs a directory of batch files, got {path!r}")
    xs, ys = [], []
    remaining = train_size
    for name in TRAIN_FILES:
        fp = os.path.join(path, name)
        if remaining <= 0:
            break
        if not os.path.exists(fp):
            raise DataError(f"missing CIFAR training batch {fp}")
        x, y = _read_records(fp, remaining)
        xs.append(x)
        ys.append(y)
        remaining -= len(y)
    fp = os.path.join(path, TEST_FILE)
    if not os.path.exists(fp):
        raise DataError(f"missing CIFAR test batch {fp}")
    x_te, y_te = _read_records(fp, test_size)
    x_tr = np.concatenate(xs) if xs else np.empty((0, 3, 32, 32), dtype=np.float32)
    y_tr = np.concatenate(ys) if ys else np.empty((0,), dtype=np.int64)
    if len(y_tr) < train_size or len(y_te) < test_size:
        raise DataError(
            f"requested {train_size}/{test_size} train/test images, found {len(y_tr)}/{len(y_te)}"
        )
    return x_tr, y_tr, x_te, y_te
