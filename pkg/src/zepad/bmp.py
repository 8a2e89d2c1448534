"""Benign-memory branch: contrastive pre-training on clean data only,
plus the three-layer classification heads shared by every branch.

The pre-trainer consumes provenance-tagged batches and refuses any
batch not tagged benign, so adversarial data cannot leak into this
branch by construction.  Head training freezes the encoder and asserts
(by hashing) that its weights are bit-identical afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .nn.layers import Module
from .nn.models import ClassifierHead, ProjectionHead
from .nn.optim import Adam
from .nn.serialize import save_checkpoint, weights_hash
from .nn.tensor import (
    Tensor,
    add,
    concat,
    l2_normalize_rows,
    matmul,
    mul,
    no_grad,
    softmax,
    softmax_cross_entropy,
    transpose,
)


@dataclass(frozen=True)
class Batch:
    """Images plus a provenance tag ('benign' or 'adversarial')."""

    images: np.ndarray
    labels: Optional[np.ndarray] = None
    provenance: str = "benign"


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5
    epochs: int = 10
    batch_size: int = 128
    random_crop: bool = True
    horizontal_flip: bool = True
    color_jitter: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class HeadConfig:
    hidden_sizes: tuple[int, int] = (512, 256)
    learning_rate: float = 0.005
    epochs: int = 20
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if len(self.hidden_sizes) != 2:
            raise ValueError("exactly 3 linear layers: specify the 2 hidden sizes")


# -- augmentations -----------------------------------------------------------


def augment(images: np.ndarray, rng: np.random.Generator, cfg: ContrastiveConfig) -> np.ndarray:
    """One stochastic view of each image (crop / flip / jitter)."""
    x = images.copy()
    n, c, h, w = x.shape
    if cfg.random_crop:
        pad = 4
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
        oi = rng.integers(0, 2 * pad + 1, size=n)
        oj = rng.integers(0, 2 * pad + 1, size=n)
        for i in range(n):
            x[i] = xp[i, :, oi[i] : oi[i] + h, oj[i] : oj[i] + w]
    if cfg.horizontal_flip:
        flips = rng.random(n) < 0.5
        x[flips] = x[flips, :, :, ::-1]
    if cfg.color_jitter:
        # strong jitter: the shortcut of matching views by raw color
        # statistics must be cheaper to destroy than shape structure
        brightness = rng.uniform(0.5, 1.5, size=(n, 1, 1, 1)).astype(x.dtype)
        contrast = rng.uniform(0.5, 1.5, size=(n, 1, 1, 1)).astype(x.dtype)
        channel = rng.uniform(0.6, 1.4, size=(n, c, 1, 1)).astype(x.dtype)
        mean = x.mean(axis=(2, 3), keepdims=True)
        x = ((x - mean) * contrast + mean) * brightness * channel
        gray = rng.random(n) < 0.2
        if gray.any():
            x[gray] = x[gray].mean(axis=1, keepdims=True)
    return np.clip(x, 0.0, 1.0)


# -- contrastive loss --------------------------------------------------------


def _ntxent_graph(z: Tensor, n: int, temperature: float) -> Tensor:
    """Symmetric contrastive loss over 2N pre-stacked embeddings."""
    dtype = z.dtype
    unit = l2_normalize_rows(z)
    sim = mul(matmul(unit, transpose(unit)), np.asarray(1.0 / temperature, dtype=dtype))
    # exclude self-similarity from every softmax
    logits = add(sim, (np.eye(2 * n) * -1e9).astype(dtype))
    positives = np.concatenate([np.arange(n, 2 * n), np.arange(0, n)])
    return softmax_cross_entropy(logits, positives)


def ntxent_loss(z1: np.ndarray, z2: np.ndarray, temperature: float = 0.5) -> float:
    """Normalized-temperature cross-entropy over row-aligned positives.

    Rows i of z1 and z2 are positives; everything else in the 2N pool
    is a negative.  Temperature rescales the cosine similarities.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape or z1.ndim != 2 or z1.shape[0] < 2:
        raise ValueError("z1 and z2 must be (N, d) with N >= 2")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    norms = np.concatenate([np.linalg.norm(z1, axis=1), np.linalg.norm(z2, axis=1)])
    if norms.min() < 1e-30:
        raise ValueError("zero-norm embedding")
    with no_grad():
        val = _ntxent_graph(Tensor(np.concatenate([z1, z2])), z1.shape[0], temperature).data
    return float(val)


# -- training ----------------------------------------------------------------


@dataclass
class PretrainResult:
    encoder: Module
    curves: list[dict]  # per-epoch: epoch, loss


def pretrain_bmp(
    data: Sequence[Batch],
    cfg: ContrastiveConfig,
    encoder: Module,
    learning_rate: float = 1e-3,
    out_path: Optional[str | Path] = None,
    manifest: Optional[dict] = None,
) -> PretrainResult:
    """Contrastive pre-training on benign batches only.

    Any batch whose provenance is not 'benign' is rejected outright.
    """
    for b in data:
        if b.provenance != "benign":
            raise ValueError(f"refusing non-benign batch (provenance={b.provenance!r})")
    images = np.concatenate([b.images for b in data])
    n = images.shape[0]
    if n < 2:
        raise ValueError("need at least 2 images")
    rng = np.random.default_rng(cfg.seed)
    dtype = encoder.parameters()[0].dtype
    projector = ProjectionHead(encoder.feature_dim, rng=np.random.default_rng(cfg.seed + 1),
                               dtype=dtype)
    opt = Adam(encoder.parameters() + projector.parameters(), lr=learning_rate)
    encoder.train()
    projector.train()
    curves = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.size < 2:
                continue
            xb = images[idx].astype(dtype, copy=False)
            v1 = augment(xb, rng, cfg)
            v2 = augment(xb, rng, cfg)
            both = Tensor(np.concatenate([v1, v2]))
            z = projector(encoder(both))
            loss = _ntxent_graph(z, idx.size, cfg.temperature)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite contrastive loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data)
            batches += 1
        curves.append({"epoch": epoch, "loss": total / batches})
    if out_path is not None:
        info = dict(manifest or {})
        info.update({"epochs": cfg.epochs, "seed": cfg.seed})
        save_checkpoint(out_path, encoder, info)
    return PretrainResult(encoder=encoder, curves=curves)


@dataclass
class HeadResult:
    head: Module
    curves: list[dict]  # per-epoch: epoch, loss, train_acc
    encoder_hash: str


def encode_features(encoder: Module, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode features for a stack of images."""
    encoder.eval()
    dtype = encoder.parameters()[0].dtype
    chunks = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            xb = images[start : start + batch_size].astype(dtype, copy=False)
            chunks.append(encoder(Tensor(xb)).data)
    return np.concatenate(chunks)


def predict_proba(encoder: Module, head: Module, images: np.ndarray,
                  batch_size: int = 256) -> np.ndarray:
    """Class distributions from a frozen encoder + head stack."""
    feats = encode_features(encoder, images, batch_size=batch_size)
    head.eval()
    with no_grad():
        logits = head(Tensor(feats)).data
    return softmax(logits)


def train_head(
    encoder: Module,
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    cfg: HeadConfig,
    head: Optional[Module] = None,
    out_path: Optional[str | Path] = None,
    manifest: Optional[dict] = None,
) -> HeadResult:
    """Train a classification head on features from a frozen encoder.

    The encoder is hashed before and after; any drift is a contract
    violation and raises.
    """
    hash_before = weights_hash(encoder)
    feats = encode_features(encoder, images, batch_size=cfg.batch_size)
    dtype = feats.dtype
    if head is None:
        head = ClassifierHead(feats.shape[1], num_classes, hidden_sizes=cfg.hidden_sizes,
                              rng=np.random.default_rng(cfg.seed), dtype=dtype)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(head.parameters(), lr=cfg.learning_rate)
    head.train()
    n = feats.shape[0]
    curves = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = softmax_cross_entropy(head(Tensor(feats[idx])), labels[idx])
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite head loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data)
            batches += 1
        head.eval()
        with no_grad():
            preds = np.argmax(head(Tensor(feats)).data, axis=1)
        head.train()
        curves.append({
            "epoch": epoch,
            "loss": total / batches,
            "train_acc": 100.0 * float(np.mean(preds == labels)),
        })
    hash_after = weights_hash(encoder)
    if hash_before != hash_after:
        raise RuntimeError("frozen-encoder contract violated: weights drifted during head training")
    if out_path is not None:
        info = dict(manifest or {})
        info.update({"epochs": cfg.epochs, "seed": cfg.seed, "encoder_sha256": hash_before})
        save_checkpoint(out_path, head, info)
    return HeadResult(head=head, curves=curves, encoder_hash=hash_before)
