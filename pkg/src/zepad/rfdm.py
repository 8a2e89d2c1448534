"""Confidence-weighted fusion of branch predictions and DAE detection.

Each branch emits a probability vector; its confidence is the nonlinear
map c = m * exp(3 * (m - 0.5)) of the maximum probability m.  Branch
weights are the normalized confidences, the fused prediction is the
convex combination of the branch distributions, and a sample is flagged
adversarial when the adversarially-tuned branches are more confident
than the benign-only branch by a strict margin.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import ProbabilityVector, argmax_class

BRANCH_ROLES = ("bmp", "mpae_victim", "mpae_aux")
MPAE_ROLES = ("mpae_victim", "mpae_aux")
DEFAULT_DETECTION_THRESHOLD = 0.1


def confidence(m: float) -> float:
    """Confidence value for a maximum probability m in (0, 1].

    Increasing and convex: certainty near 1 is rewarded faster than
    linearly, uncertainty below 0.5 is discounted.
    """
    if not (0.0 < m <= 1.0):
        raise ValueError(f"max probability must lie in (0, 1], got {m}")
    return m * float(np.exp(3.0 * (m - 0.5)))


def confidence_batch(m: np.ndarray) -> np.ndarray:
    """Vectorized confidence over an array of max probabilities."""
    m = np.asarray(m, dtype=np.float64)
    if m.size and (m.min() <= 0.0 or m.max() > 1.0):
        raise ValueError("max probabilities must lie in (0, 1]")
    return m * np.exp(3.0 * (m - 0.5))


@dataclass(frozen=True)
class BranchOutput:
    """One branch's distribution plus its max probability and confidence."""

    probs: ProbabilityVector
    m: float
    c: float
    branch_role: str

    def __post_init__(self):
        if self.branch_role not in BRANCH_ROLES:
            raise ValueError(f"unknown branch role {self.branch_role!r}")
        expect_m = float(np.max(self.probs.probs))
        if self.m != expect_m:
            raise ValueError(f"m = {self.m} does not equal max(probs) = {expect_m}")
        expect_c = confidence(self.m)
        if self.c != expect_c:
            raise ValueError(f"c = {self.c} does not equal {expect_c}")

    @classmethod
    def from_probs(cls, probs, branch_role: str) -> "BranchOutput":
        pv = probs if isinstance(probs, ProbabilityVector) else ProbabilityVector(np.asarray(probs))
        m = float(np.max(pv.probs))
        return cls(probs=pv, m=m, c=confidence(m), branch_role=branch_role)


@dataclass(frozen=True)
class FusedDecision:
    """Outcome of fusing B branches on one sample."""

    weights: np.ndarray
    fused_probs: ProbabilityVector
    predicted_class: int
    dae_flag: bool
    confidence_gap: Optional[float]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {w.sum():.12f}, expected 1")
        if w.min() <= 0.0 or w.max() >= 1.0 + 1e-12:
            raise ValueError("each weight must lie in (0, 1)")
        object.__setattr__(self, "weights", w)


def fuse_weights(c: Sequence[float]) -> np.ndarray:
    """Normalize branch confidences into weights summing to 1."""
    arr = np.asarray(c, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("fusion needs at least 2 branches")
    if arr.min() <= 0.0:
        raise ValueError("confidence values must be positive")
    return arr / arr.sum()


def detect_dae(branches: Sequence[BranchOutput],
               threshold: float = DEFAULT_DETECTION_THRESHOLD,
               use_max_prob: bool = False) -> tuple[bool, float]:
    """Confidence-gap detector.

    gap = mean confidence of the adversarially-tuned branches minus the
    mean confidence of the benign-only branch; the sample is flagged
    adversarial iff gap > threshold (strict, so a gap exactly at the
    threshold is not flagged).  With ``use_max_prob`` the comparison
    runs on raw max probabilities instead of confidence values.
    """
    score = (lambda b: b.m) if use_max_prob else (lambda b: b.c)
    bmp = [score(b) for b in branches if b.branch_role == "bmp"]
    mpae = [score(b) for b in branches if b.branch_role in MPAE_ROLES]
    if not bmp or not mpae:
        raise ValueError("detection needs at least one bmp and one mpae branch")
    gap = float(np.mean(mpae) - np.mean(bmp))
    return gap > threshold, gap


def fuse_predict(branches: Sequence[BranchOutput],
                 threshold: float = DEFAULT_DETECTION_THRESHOLD,
                 use_max_prob: bool = False) -> FusedDecision:
    """Weight branches by confidence and fuse their distributions."""
    if len(branches) < 2:
        raise ValueError("fusion needs at least 2 branches")
    k = len(branches[0].probs)
    if any(len(b.probs) != k for b in branches):
        raise ValueError("branches disagree on the number of classes")
    weights = fuse_weights([b.c for b in branches])
    stacked = np.stack([b.probs.probs for b in branches])
    fused = weights @ stacked
    roles = {b.branch_role for b in branches}
    if "bmp" in roles and roles & set(MPAE_ROLES):
        dae_flag, gap = detect_dae(branches, threshold=threshold, use_max_prob=use_max_prob)
    else:
        dae_flag, gap = False, None
    return FusedDecision(
        weights=weights,
        fused_probs=ProbabilityVector(fused),
        predicted_class=argmax_class(fused),
        dae_flag=dae_flag,
        confidence_gap=gap,
    )
