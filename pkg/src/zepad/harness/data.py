"""Datasets for desk-scale experiments.

The default dataset, ``shapes10``, is generated procedurally: ten
geometric figure classes rendered at 32x32 RGB with randomized
position, scale, colors, background gradients, distractor dots and
pixel noise.  It needs no network access, is fully seeded, and a small
conv net neither saturates at 100% nor fails to learn it.

A CIFAR-10 loader is included for users who already have the python
batches on disk (pointed to by ``ZEPAD_CACHE``); nothing is ever
downloaded.

Split hygiene: one master array is generated per (dataset, total size,
seed) and sliced into contiguous, provably disjoint index ranges that
are recorded alongside every run.
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NUM_CLASSES = 10
IMAGE_SHAPE = (3, 32, 32)


def cache_dir() -> Path:
    return Path(os.environ.get("ZEPAD_CACHE", Path.home() / ".cache" / "zepad"))


def _render_shape(rng: np.random.Generator, label: int) -> np.ndarray:
    """One 32x32 RGB image of the given class, channels-first, in [0, 1]."""
    h = w = 32
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    cx = rng.uniform(12, 20)
    cy = rng.uniform(12, 20)
    s = rng.uniform(5.5, 9.0)
    dx = xx - cx
    dy = yy - cy
    adx, ady = np.abs(dx), np.abs(dy)

    if label == 0:  # disk
        mask = dx * dx + dy * dy <= s * s
    elif label == 1:  # ring (inner radius varies; thin holes sit near the disk class)
        r2 = dx * dx + dy * dy
        mask = (r2 <= s * s) & (r2 >= (rng.uniform(0.40, 0.62) * s) ** 2)
    elif label == 2:  # square
        mask = np.maximum(adx, ady) <= rng.uniform(0.72, 0.85) * s
    elif label == 3:  # diamond
        mask = adx + ady <= rng.uniform(0.95, 1.15) * s
    elif label == 4:  # triangle, base at the bottom
        mask = (dy <= 0.55 * s) & (adx <= (dy + 0.75 * s) * 0.85)
    elif label == 5:  # plus
        mask = ((adx <= 0.3 * s) & (ady <= s)) | ((ady <= 0.3 * s) & (adx <= s))
    elif label == 6:  # diagonal cross
        mask = (np.abs(adx - ady) <= 0.3 * s) & (np.maximum(adx, ady) <= s)
    elif label == 7:  # two horizontal bars
        mask = (adx <= s) & ((np.abs(dy - 0.5 * s) <= 0.22 * s) | (np.abs(dy + 0.5 * s) <= 0.22 * s))
    elif label == 8:  # two vertical bars
        mask = (ady <= s) & ((np.abs(dx - 0.5 * s) <= 0.22 * s) | (np.abs(dx + 0.5 * s) <= 0.22 * s))
    elif label == 9:  # opposite quadrants
        mask = (np.maximum(adx, ady) <= 0.9 * s) & (dx * dy > 0)
    else:
        raise ValueError(f"label {label} out of range")

    bg = rng.uniform(0.25, 0.60, size=3).astype(np.float32)
    gx = rng.uniform(-0.08, 0.08)
    gy = rng.uniform(-0.08, 0.08)
    gradient = (gx * (xx / w - 0.5) + gy * (yy / h - 0.5)).astype(np.float32)
    img = bg[:, None, None] + gradient[None]

    # low figure/ground contrast keeps decision margins narrow
    contrast = rng.uniform(0.15, 0.32)
    direction = rng.choice([-1.0, 1.0], size=3).astype(np.float32)
    fg = np.clip(bg + contrast * direction, 0.02, 0.98)
    img = np.where(mask[None], fg[:, None, None], img)

    for _ in range(rng.integers(1, 3)):  # distractor dots
        px, py = rng.uniform(2, 30, size=2)
        pr = rng.uniform(0.8, 1.4)
        dot = (xx - px) ** 2 + (yy - py) ** 2 <= pr * pr
        shade = np.clip(bg + rng.uniform(0.1, 0.2) * rng.choice([-1.0, 1.0]), 0, 1)
        img = np.where(dot[None], shade.astype(np.float32)[:, None, None], img)

    img += rng.normal(0.0, 0.05, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def generate_shapes10(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """n images with balanced shuffled labels; deterministic in seed."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % NUM_CLASSES).astype(np.int64)
    images = np.empty((n, 3, 32, 32), dtype=np.float32)
    for i in range(n):
        images[i] = _render_shape(rng, int(labels[i]))
    return images, labels


def _load_cifar10(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    root = cache_dir() / "cifar-10-batches-py"
    if not root.exists():
        raise FileNotFoundError(
            f"CIFAR-10 python batches not found under {root}; place the extracted "
            "archive there (no downloads are attempted), or use dataset 'shapes10'"
        )
    xs, ys = [], []
    for name in sorted(root.glob("data_batch_*")):
        with open(name, "rb") as f:
            d = pickle.load(f, encoding="bytes")
        xs.append(d[b"data"])
        ys.append(np.asarray(d[b"labels"]))
    x = np.concatenate(xs).reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    y = np.concatenate(ys).astype(np.int64)
    idx = np.random.default_rng(seed).permutation(x.shape[0])[:n]
    return x[idx], y[idx]


@dataclass(frozen=True)
class SplitIndices:
    """Contiguous, disjoint index ranges into the master arrays."""

    benign_train: np.ndarray
    adv_source: np.ndarray
    downstream_eval: np.ndarray

    def assert_disjoint(self):
        a = set(self.benign_train.tolist())
        b = set(self.adv_source.tolist())
        c = set(self.downstream_eval.tolist())
        if a & c or b & c:
            raise AssertionError("evaluation indices overlap a training split")

    def to_json_dict(self) -> dict:
        return {
            "benign_train": [int(self.benign_train[0]), int(self.benign_train[-1]) + 1],
            "adv_source": [int(self.adv_source[0]), int(self.adv_source[-1]) + 1],
            "downstream_eval": [int(self.downstream_eval[0]), int(self.downstream_eval[-1]) + 1],
        }


@dataclass
class DatasetBundle:
    images: np.ndarray
    labels: np.ndarray
    splits: SplitIndices
    name: str
    seed: int

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        idx = getattr(self.splits, which)
        return self.images[idx], self.labels[idx]


def load_dataset(name: str, n_benign_train: int, n_adv_source: int,
                 n_downstream_eval: int, seed: int, use_cache: bool = True) -> DatasetBundle:
    total = n_benign_train + n_adv_source + n_downstream_eval
    if name == "shapes10":
        cache = cache_dir() / f"shapes10_n{total}_s{seed}.npz"
        if use_cache and cache.exists():
            with np.load(cache) as z:
                images, labels = z["images"], z["labels"]
        else:
            images, labels = generate_shapes10(total, seed)
            if use_cache:
                cache.parent.mkdir(parents=True, exist_ok=True)
                tmp = cache.with_suffix(".tmp.npz")
                np.savez_compressed(tmp, images=images, labels=labels)
                os.replace(tmp, cache)
    elif name == "cifar10":
        images, labels = _load_cifar10(total, seed)
    else:
        raise ValueError(f"unknown dataset {name!r} (available: shapes10, cifar10)")
    splits = SplitIndices(
        benign_train=np.arange(0, n_benign_train),
        adv_source=np.arange(n_benign_train, n_benign_train + n_adv_source),
        downstream_eval=np.arange(n_benign_train + n_adv_source, total),
    )
    splits.assert_disjoint()
    return DatasetBundle(images=images, labels=labels, splits=splits, name=name, seed=seed)
