"""Encoder and classifier-head architectures.

All branches share the same scaled-down residual conv encoder: a stem,
three residual stages separated by strided downsampling convs, global
average pooling, and a linear map to the feature dimension.  The tiny
variants exist for fast exact-gradient tests.
"""

from __future__ import annotations

import re
from typing import Optional

import numpy as np

from .layers import BatchNorm2d, Conv2d, Linear, Module, ReLU, ResidualBlock, Sequential
from .tensor import Tensor, relu, tmean, transpose


def _to_channels_last(x: Tensor) -> Tensor:
    """Accept the public NCHW image layout; compute runs channels-last."""
    return transpose(x, (0, 2, 3, 1))


class ConvEncoder(Module):
    """stem -> [res(c1), down, res(c2), down, res(c3)] -> GAP -> linear."""

    def __init__(self, channels=(8, 16, 32), feature_dim: int = 128,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        c1, c2, c3 = channels
        self.arch_id = f"smallres-{c1}-{c2}-{c3}-f{feature_dim}"
        self.feature_dim = feature_dim
        self.stem = Conv2d(3, c1, bias=False, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(c1, dtype=dtype)
        self.block1 = ResidualBlock(c1, rng=rng, dtype=dtype)
        self.down1 = Conv2d(c1, c2, stride=2, bias=False, rng=rng, dtype=dtype)
        self.down1_bn = BatchNorm2d(c2, dtype=dtype)
        self.block2 = ResidualBlock(c2, rng=rng, dtype=dtype)
        self.down2 = Conv2d(c2, c3, stride=2, bias=False, rng=rng, dtype=dtype)
        self.down2_bn = BatchNorm2d(c3, dtype=dtype)
        self.block3 = ResidualBlock(c3, rng=rng, dtype=dtype)
        self.project = Linear(c3, feature_dim, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = _to_channels_last(x)
        x = relu(self.stem_bn(self.stem(x)))
        x = self.block1(x)
        x = relu(self.down1_bn(self.down1(x)))
        x = self.block2(x)
        x = relu(self.down2_bn(self.down2(x)))
        x = self.block3(x)
        x = tmean(x, axis=1)
        x = tmean(x, axis=1)
        return self.project(x)


class TinyEncoder(Module):
    """One conv + one linear; small enough for finite-difference checks."""

    def __init__(self, channels: int = 4, feature_dim: int = 4,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        super().__init__()
        self.arch_id = f"tiny-{channels}-f{feature_dim}"
        self.feature_dim = feature_dim
        self.conv = Conv2d(3, channels, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(channels, dtype=dtype)
        self.project = Linear(channels, feature_dim, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = _to_channels_last(x)
        x = relu(self.bn(self.conv(x)))
        x = tmean(x, axis=1)
        x = tmean(x, axis=1)
        return self.project(x)


class ClassifierHead(Module):
    """Exactly three fully connected layers mapping features to K logits."""

    def __init__(self, feature_dim: int, num_classes: int, hidden_sizes=(512, 256),
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        if len(hidden_sizes) != 2:
            raise ValueError("head has exactly 3 linear layers, so 2 hidden sizes")
        h1, h2 = hidden_sizes
        self.arch_id = f"head3-{feature_dim}-{h1}-{h2}-k{num_classes}"
        self.net = Sequential(
            Linear(feature_dim, h1, rng=rng, dtype=dtype),
            ReLU(),
            Linear(h1, h2, rng=rng, dtype=dtype),
            ReLU(),
            Linear(h2, num_classes, rng=rng, dtype=dtype),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class LinearHead(Module):
    """Single linear layer; the provisional head used during encoder tuning."""

    def __init__(self, feature_dim: int, num_classes: int,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        self.arch_id = f"linear-{feature_dim}-k{num_classes}"
        self.fc = Linear(feature_dim, num_classes, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(x)


class ProjectionHead(Module):
    """Batch-normalized two-layer MLP used only during contrastive
    pre-training (the normalization keeps the embedding scale stable,
    which small-batch contrastive training needs)."""

    def __init__(self, feature_dim: int, hidden: int = 128, out: int = 64,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        self.arch_id = f"proj-{feature_dim}-{hidden}-{out}"
        self.fc1 = Linear(feature_dim, hidden, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(hidden, dtype=dtype)
        self.fc2 = Linear(hidden, out, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.bn(self.fc1(x))))


def build_encoder(arch_id: str, rng: Optional[np.random.Generator] = None,
                  dtype=np.float32) -> Module:
    """Instantiate an encoder from its architecture id string."""
    m = re.fullmatch(r"smallres-(\d+)-(\d+)-(\d+)-f(\d+)", arch_id)
    if m:
        c1, c2, c3, f = map(int, m.groups())
        return ConvEncoder(channels=(c1, c2, c3), feature_dim=f, rng=rng, dtype=dtype)
    m = re.fullmatch(r"tiny-(\d+)-f(\d+)", arch_id)
    if m:
        c, f = map(int, m.groups())
        return TinyEncoder(channels=c, feature_dim=f, rng=rng, dtype=dtype)
    raise ValueError(f"unknown encoder architecture {arch_id!r}")
