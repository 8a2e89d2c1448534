"""Adversarial fine-tuning with the hybrid classification + feature loss.

The feature term compares the batch's pairwise feature-distance
distribution under adversarial inputs against the one under benign
inputs, as a sum of per-pair binary KL divergences; the classification
term is plain cross-entropy on the adversarial inputs.  Total loss is
``l_c + lambda * l_f``.

Distance construction for a batch of N feature rows:

* s[i, j]  = cosine similarity of rows i and j
* rho[j]   = max over k != j of s[j, k]  (nearest-neighbor similarity,
  used to discount locally dense regions)
* n[i, j]  = 2 - (s[i, j] - rho[j])   which lies in [2, 4]
* d[i, j]  = n[i, j] / sum over k != i of n[i, k];  zero diagonal

so each row of ``d`` is a probability distribution over the other
batch members, and the entries are clamped away from {0, 1} before
any logarithm.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import FeatureMatrix, LabelBatch, UniversalPerturbation
from .nn.layers import Module
from .nn.models import LinearHead
from .nn.optim import Adam
from .nn.serialize import save_checkpoint
from .nn.tensor import (
    Tensor,
    add,
    clip,
    matmul,
    mul,
    no_grad,
    softmax_cross_entropy,
    l2_normalize_rows,
    tlog,
    tmax,
    transpose,
    tsum,
)
from .attack import apply_perturbation


@dataclass(frozen=True)
class PairwiseDistanceMatrix:
    """Row-normalized pairwise feature distances with zero diagonal."""

    d: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.d, dtype=np.float64)
        n = arr.shape[0]
        if arr.ndim != 2 or arr.shape[1] != n:
            raise ValueError("distance matrix must be square")
        if np.abs(np.diag(arr)).max() != 0.0:
            raise ValueError("diagonal must be exactly zero")
        off = ~np.eye(n, dtype=bool)
        if arr[off].min() <= 0.0 or arr[off].max() >= 1.0:
            raise ValueError("off-diagonal entries must lie in (0, 1)")
        sums = arr.sum(axis=1)
        # inclusive at the boundary: the entry clamp itself may shift a
        # row sum by exactly 1e-6 (one off-diagonal entry at N = 2)
        if np.abs(sums - 1.0).max() > 1e-6 + 1e-12:
            raise ValueError(f"rows must sum to 1, worst deviation {np.abs(sums - 1.0).max():.3e}")
        object.__setattr__(self, "d", arr)

    @property
    def n(self) -> int:
        return self.d.shape[0]


@dataclass(frozen=True)
class HybridLossConfig:
    """Weight of the feature term and the log-domain clamp."""

    lambda_: float = 20.0
    clamp_eps: float = 1e-6

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError("lambda must be nonnegative")
        if not (0 < self.clamp_eps < 0.5):
            raise ValueError("clamp_eps must lie in (0, 0.5)")


@dataclass(frozen=True)
class AdvTuneConfig:
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 1e-4
    loss: HybridLossConfig = field(default_factory=HybridLossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (pairwise loss needs pairs)")


# -- differentiable loss graph ----------------------------------------------


def _offdiag_mask(n: int, dtype) -> np.ndarray:
    return (1.0 - np.eye(n)).astype(dtype)


def pairwise_distance_graph(features: Tensor, clamp_eps: float = 1e-6) -> Tensor:
    """Differentiable pairwise-distance matrix on a (N, d) feature tensor."""
    n = features.shape[0]
    dtype = features.dtype
    unit = l2_normalize_rows(features)
    sim = matmul(unit, transpose(unit))
    # push the diagonal below any real similarity so the row max skips it
    masked = add(sim, (-3.0 * np.eye(n)).astype(dtype))
    rho = tmax(masked, axis=1)  # rho[j] = max_{k != j} sim[j, k]
    numer = add(add(mul(sim, -1.0), 2.0), rho.reshape(1, n))
    numer = mul(numer, _offdiag_mask(n, dtype))
    denom = tsum(numer, axis=1, keepdims=True)
    d = numer / denom
    return mul(clip(d, clamp_eps, 1.0 - clamp_eps), _offdiag_mask(n, dtype))


def feature_loss_graph(d_benign: Tensor, d_adv: Tensor) -> Tensor:
    """Sum over ordered pairs of the binary KL between matched entries."""
    n = d_benign.shape[0]
    mask = _offdiag_mask(n, d_benign.dtype)
    one = mask  # off-diagonal ones; diagonal contributes exactly zero
    db, da = d_benign, d_adv
    comp_b = mul(add(mul(db, -1.0), 1.0), mask)
    comp_a = mul(add(mul(da, -1.0), 1.0), mask)
    # diagonal entries of all four matrices are 0; patch them to 1 before
    # the log so they drop out of the sum
    eye = np.eye(n, dtype=d_benign.dtype)
    term1 = mul(db, add(tlog(add(db, eye)), mul(tlog(add(da, eye)), -1.0)))
    term2 = mul(comp_b, add(tlog(add(comp_b, eye)), mul(tlog(add(comp_a, eye)), -1.0)))
    return tsum(mul(add(term1, term2), one))


def hybrid_loss_graph(l_c: Tensor, l_f: Tensor, cfg: HybridLossConfig) -> Tensor:
    return add(l_c, mul(l_f, cfg.lambda_))


# -- public (plain ndarray) operations ---------------------------------------


def pairwise_distance(features, clamp_eps: float = 1e-6) -> PairwiseDistanceMatrix:
    """Distance matrix over encoder features; see the module docstring."""
    arr = features.features if isinstance(features, FeatureMatrix) else np.asarray(features)
    arr = arr.astype(np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("need at least 2 feature rows")
    norms = np.linalg.norm(arr, axis=1)
    if norms.min() < 1e-30:
        raise ValueError("degenerate feature vector (zero norm)")
    with no_grad():
        d = pairwise_distance_graph(Tensor(arr), clamp_eps=clamp_eps).data
    return PairwiseDistanceMatrix(d)


def binary_kl(p: float, q: float) -> float:
    """Divergence contributed by one matched pair of distance entries."""
    if not (0.0 < p < 1.0 and 0.0 < q < 1.0):
        raise ValueError("pair entries must lie strictly in (0, 1)")
    return float(p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q)))


def feature_loss(d_benign: PairwiseDistanceMatrix, d_adv: PairwiseDistanceMatrix) -> float:
    """Pairwise binary-KL divergence between benign and adversarial distances."""
    if d_benign.d.shape != d_adv.d.shape:
        raise ValueError("distance matrices must have the same shape")
    with no_grad():
        val = feature_loss_graph(Tensor(d_benign.d), Tensor(d_adv.d)).data
    return float(val)


def classification_loss(probs: np.ndarray, labels, clamp_eps: float = 1e-6) -> float:
    """Mean cross-entropy of predicted distributions against true labels.

    Probabilities at the true class are clamped into
    [clamp_eps, 1 - clamp_eps] so the loss is never infinite.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = labels.labels if isinstance(labels, LabelBatch) else np.asarray(labels)
    if p.ndim != 2 or p.shape[0] != y.shape[0]:
        raise ValueError("probs must be (N, K) aligned with labels")
    picked = np.clip(p[np.arange(len(y)), y], clamp_eps, 1.0 - clamp_eps)
    return float(-np.mean(np.log(picked)))


def hybrid_loss(lc: float, lf: float, cfg: HybridLossConfig) -> float:
    """Total tuning loss: classification term plus weighted feature term."""
    return float(lc + cfg.lambda_ * lf)


# -- training loop -----------------------------------------------------------


@dataclass
class TuneResult:
    encoder: Module
    provisional_head: Module
    curves: list[dict]  # per-epoch: epoch, l_c, l_f, hybrid


def adversarial_finetune(
    encoder: Module,
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    uap: UniversalPerturbation,
    cfg: AdvTuneConfig,
    out_dir: Optional[str | Path] = None,
    checkpoint_stem: str = "tuned",
    manifest: Optional[dict] = None,
) -> TuneResult:
    """Fine-tune an encoder on perturbed copies of the benign data.

    Per batch: build x* = clip(x + delta), compute the distance matrix
    on benign and on adversarial features (both from the encoder being
    tuned), evaluate the hybrid loss with a provisional linear head for
    the classification term, and take an Adam step.  A checkpoint is
    written per epoch when ``out_dir`` is given.
    """
    rng = np.random.default_rng(cfg.seed)
    n = images.shape[0]
    dtype = encoder.parameters()[0].dtype
    head = LinearHead(encoder.feature_dim, num_classes,
                      rng=np.random.default_rng(cfg.seed + 1), dtype=dtype)
    opt = Adam(encoder.parameters() + head.parameters(), lr=cfg.learning_rate)
    encoder.train()
    head.train()
    lam = cfg.loss.lambda_
    eps = cfg.loss.clamp_eps
    curves: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.size < 2:
                continue  # pairwise loss needs at least a pair
            xb = images[idx].astype(dtype, copy=False)
            xa = apply_perturbation(xb, uap)
            yb = labels[idx]
            tb = Tensor(xb)
            ta = Tensor(xa)
            feats_b = encoder(tb)
            feats_a = encoder(ta)
            l_f = feature_loss_graph(
                pairwise_distance_graph(feats_b, eps),
                pairwise_distance_graph(feats_a, eps),
            )
            l_c = softmax_cross_entropy(head(feats_a), yb)
            loss = hybrid_loss_graph(l_c, l_f, cfg.loss)
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"non-finite hybrid loss at epoch {epoch}, batch {batches}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += (float(l_c.data), float(l_f.data), float(loss.data))
            batches += 1
        record = {
            "epoch": epoch,
            "l_c": sums[0] / batches,
            "l_f": sums[1] / batches,
            "hybrid": sums[2] / batches,
        }
        curves.append(record)
        if out_dir is not None:
            info = dict(manifest or {})
            info.update({"epoch": epoch, "seed": cfg.seed, "lambda": lam})
            save_checkpoint(Path(out_dir) / f"{checkpoint_stem}_epoch{epoch}", encoder, info)
    if out_dir is not None:
        info = dict(manifest or {})
        info.update({"epoch": cfg.epochs - 1, "seed": cfg.seed, "lambda": lam})
        save_checkpoint(Path(out_dir) / checkpoint_stem, encoder, info)
    return TuneResult(encoder=encoder, provisional_head=head, curves=curves)
