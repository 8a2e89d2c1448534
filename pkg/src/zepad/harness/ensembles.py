"""Baseline ensembles and vectorized batch fusion.

The per-sample reference implementations live in :mod:`zepad.rfdm`;
this module adds the entropy-weighted baseline and array versions of
all fusion modes used by the evaluation loop (cross-checked against
the per-sample path in the tests).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..core import ProbabilityVector, argmax_class
from ..rfdm import (
    MPAE_ROLES,
    BranchOutput,
    FusedDecision,
    confidence_batch,
    detect_dae,
)


def _entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=axis)


def entropy_weights(probs: np.ndarray) -> np.ndarray:
    """Weights proportional to exp(-H) along the leading branch axis."""
    h = _entropy(probs, axis=-1)
    w = np.exp(-h)
    return w / w.sum(axis=0, keepdims=True)


def entropy_ensemble(branches: Sequence[BranchOutput],
                     threshold: float = 0.1,
                     use_max_prob: bool = False) -> FusedDecision:
    """Fuse with entropy-derived weights; sharper branches dominate."""
    if len(branches) < 2:
        raise ValueError("fusion needs at least 2 branches")
    k = len(branches[0].probs)
    if any(len(b.probs) != k for b in branches):
        raise ValueError("branches disagree on the number of classes")
    stacked = np.stack([b.probs.probs for b in branches])
    weights = entropy_weights(stacked)
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


def fuse_matrix(probs: np.ndarray, roles: Sequence[str], mode: str,
                threshold: float = 0.1, use_max_prob: bool = False) -> dict:
    """Vectorized fusion of a (B, N, K) probability stack.

    Returns arrays: fused (N, K), preds (N,), weights (B, N), m (B, N),
    c (B, N), gap (N,), dae_flag (N,).
    """
    probs = np.asarray(probs, dtype=np.float64)
    nb = probs.shape[0]
    m = probs.max(axis=2)
    c = confidence_batch(m)
    if mode == "rfdm":
        weights = c / c.sum(axis=0, keepdims=True)
    elif mode == "average":
        weights = np.full(m.shape, 1.0 / nb)
    elif mode == "entropy":
        weights = entropy_weights(probs)
    elif mode.startswith("single:"):
        name = mode.split(":", 1)[1]
        if name not in roles:
            raise ValueError(f"no branch with role {name!r}")
        weights = np.zeros(m.shape)
        weights[list(roles).index(name)] = 1.0
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    fused = np.einsum("bn,bnk->nk", weights, probs)
    preds = np.argmax(fused, axis=1)
    roles = list(roles)
    bmp_rows = [i for i, r in enumerate(roles) if r == "bmp"]
    mpae_rows = [i for i, r in enumerate(roles) if r in MPAE_ROLES]
    if bmp_rows and mpae_rows:
        score = m if use_max_prob else c
        gap = score[mpae_rows].mean(axis=0) - score[bmp_rows].mean(axis=0)
        dae_flag = gap > threshold
    else:
        gap = np.full(probs.shape[1], np.nan)
        dae_flag = np.zeros(probs.shape[1], dtype=bool)
    return {
        "fused": fused,
        "preds": preds,
        "weights": weights,
        "m": m,
        "c": c,
        "gap": gap,
        "dae_flag": dae_flag,
    }
