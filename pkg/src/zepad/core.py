"""Shared domain types and the evaluation metrics BA, RA, ASR.

Conventions fixed here and relied on everywhere else:

* images live in [0, 1]; perturbation budgets are raw-pixel units
* argmax ties break to the lowest class index
* ASR is measured against clean-sample *predictions*, not labels,
  so in general ASR != 100 - RA
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

METRICS_CSV_COLUMNS = ["experiment_id", "ba", "ra", "asr", "detection_acc", "n_eval"]


@dataclass(frozen=True)
class ImageBatch:
    """Batch of images, shape (N, C, H, W), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ValueError(f"images must be rank-4 (N, C, H, W), got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("empty image batch")
        if arr.size and (arr.min() < -1e-6 or arr.max() > 1 + 1e-6):
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    def __len__(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class LabelBatch:
    """Integer class labels in [0, K)."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 1:
            raise ValueError("labels must be a 1-D vector")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("labels must be integers")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", arr)

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class FeatureMatrix:
    """Encoder features, shape (N, d), finite entries."""

    features: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.features)
        if arr.ndim != 2:
            raise ValueError("features must be rank-2 (N, d)")
        if not np.all(np.isfinite(arr)):
            raise ValueError("features contain NaN or Inf")
        object.__setattr__(self, "features", arr)


@dataclass(frozen=True)
class ProbabilityVector:
    """A K-class distribution: entries >= 0, summing to 1 within 1e-6."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("probability vector must be a nonempty 1-D array")
        if arr.min() < 0:
            raise ValueError("probabilities must be nonnegative")
        if abs(arr.sum() - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {arr.sum():.8f}, expected 1")
        object.__setattr__(self, "probs", arr)

    def __len__(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class PerturbationBudget:
    """L-infinity perturbation budget in raw-pixel units."""

    epsilon: float
    norm_order: str = "inf"

    def __post_init__(self):
        if not (0 < self.epsilon <= 1):
            raise ValueError("epsilon must lie in (0, 1]")
        if self.norm_order != "inf":
            raise ValueError("only the L-infinity norm is implemented")


@dataclass(frozen=True)
class UniversalPerturbation:
    """A single image-shaped delta bounded by its budget in max-norm."""

    delta: np.ndarray
    budget: PerturbationBudget

    def __post_init__(self):
        arr = np.asarray(self.delta)
        if arr.ndim != 3:
            raise ValueError("delta must be rank-3 (C, H, W)")
        if arr.size and np.abs(arr).max() > self.budget.epsilon + 1e-9:
            raise ValueError(
                f"max|delta| = {np.abs(arr).max():.6g} exceeds budget {self.budget.epsilon:.6g}"
            )
        object.__setattr__(self, "delta", arr)


@dataclass
class MetricsReport:
    """BA/RA/ASR (+ optional detection accuracy) for one experiment."""

    ba: float
    ra: float
    asr: float
    n_eval: int
    detection_acc: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ba", "ra", "asr"):
            v = getattr(self, name)
            if not (0.0 <= v <= 100.0):
                raise ValueError(f"{name} = {v} outside [0, 100]")
        if self.detection_acc is not None and not (0.0 <= self.detection_acc <= 100.0):
            raise ValueError(f"detection_acc = {self.detection_acc} outside [0, 100]")

    def to_json_dict(self) -> dict:
        out = {
            "ba": self.ba,
            "ra": self.ra,
            "asr": self.asr,
            "detection_acc": self.detection_acc,
            "n_eval": self.n_eval,
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def to_csv_row(self, experiment_id: str) -> str:
        det = "" if self.detection_acc is None else f"{self.detection_acc:.6g}"
        return ",".join(
            [experiment_id, f"{self.ba:.6g}", f"{self.ra:.6g}", f"{self.asr:.6g}", det,
             str(self.n_eval)]
        )


# -- operations ------------------------------------------------------------


def argmax_class(p: ProbabilityVector | np.ndarray) -> int:
    """Class decision: smallest index attaining the maximum probability."""
    arr = p.probs if isinstance(p, ProbabilityVector) else np.asarray(p)
    if arr.size == 0:
        raise ValueError("cannot take argmax of an empty vector")
    return int(np.argmax(arr))


def _as_labels(labels) -> np.ndarray:
    return labels.labels if isinstance(labels, LabelBatch) else np.asarray(labels)


def benign_accuracy(preds: Sequence[int], labels) -> float:
    """Percentage of clean-sample predictions matching the labels."""
    y = _as_labels(labels)
    p = np.asarray(preds)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} predictions vs {y.shape} labels")
    if p.size == 0:
        raise ValueError("cannot compute accuracy of an empty batch")
    return 100.0 * float(np.mean(p == y))


def robust_accuracy(adv_preds: Sequence[int], labels) -> float:
    """Percentage of adversarial-sample predictions matching the labels."""
    return benign_accuracy(adv_preds, labels)


def attack_success_rate(clean_preds: Sequence[int], adv_preds: Sequence[int]) -> float:
    """Percentage of samples whose prediction changed under perturbation."""
    c = np.asarray(clean_preds)
    a = np.asarray(adv_preds)
    if c.shape != a.shape:
        raise ValueError(f"length mismatch: {c.shape} clean vs {a.shape} adversarial")
    if c.size == 0:
        raise ValueError("cannot compute ASR of an empty batch")
    return 100.0 * float(np.mean(c != a))
