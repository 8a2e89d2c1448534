"""Confidence-separation statistics.

The defense rests on a distributional claim: on clean inputs the
benign-only branch is the most confident, on adversarial inputs the
adversarially-tuned branches are.  This module quantifies that claim
on held-out data with per-branch summaries, 20-bin histograms and
one-sided bootstrap tests of the two directional mean comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_SAMPLES = 100
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
HIST_BINS = 20


def bootstrap_greater(a: np.ndarray, b: np.ndarray, n_resamples: int = 10_000,
                      seed: int = 0) -> float:
    """One-sided bootstrap p-value for mean(a) > mean(b).

    Resamples both sets with replacement and returns the (smoothed)
    fraction of resamples in which the difference of means was <= 0.
    """
    rng = np.random.default_rng(seed)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ia = rng.integers(0, a.size, size=(n_resamples, a.size))
    ib = rng.integers(0, b.size, size=(n_resamples, b.size))
    diffs = a[ia].mean(axis=1) - b[ib].mean(axis=1)
    return float((1 + np.sum(diffs <= 0.0)) / (n_resamples + 1))


def _summary(values: np.ndarray, lo: float, hi: float) -> dict:
    hist, edges = np.histogram(values, bins=HIST_BINS, range=(lo, hi))
    return {
        "mean": float(values.mean()),
        "quantiles": {f"q{int(q*100):02d}": float(np.quantile(values, q)) for q in QUANTILES},
        "histogram": {"counts": hist.tolist(), "edges": edges.tolist()},
        "n": int(values.size),
    }


@dataclass
class SeparationReport:
    per_branch: dict
    p_clean_bmp_gt_mpae: float
    p_adv_mpae_gt_bmp: float
    clean_separated: bool
    adv_separated: bool
    alpha: float = 0.05
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "per_branch": self.per_branch,
            "p_clean_bmp_gt_mpae": self.p_clean_bmp_gt_mpae,
            "p_adv_mpae_gt_bmp": self.p_adv_mpae_gt_bmp,
            "clean_separated": self.clean_separated,
            "adv_separated": self.adv_separated,
            "alpha": self.alpha,
            **self.extra,
        }


def confidence_separation_report(
    c_clean: dict[str, np.ndarray],
    c_adv: dict[str, np.ndarray],
    n_resamples: int = 10_000,
    alpha: float = 0.05,
    seed: int = 0,
) -> SeparationReport:
    """Directional separation tests over per-branch confidence values.

    ``c_clean`` / ``c_adv`` map branch names (role-prefixed, e.g.
    'bmp', 'mpae_victim', 'mpae_aux0') to confidence arrays on the
    clean and adversarial evaluation sets.  Sets smaller than 100
    samples are refused as underpowered.
    """
    for cond, d in (("clean", c_clean), ("adv", c_adv)):
        for name, v in d.items():
            if np.asarray(v).size < MIN_SAMPLES:
                raise ValueError(
                    f"{cond}/{name} has {np.asarray(v).size} samples; "
                    f"need at least {MIN_SAMPLES}"
                )
    bmp_names = [k for k in c_clean if k.startswith("bmp")]
    mpae_names = [k for k in c_clean if k.startswith("mpae")]
    if not bmp_names or not mpae_names:
        raise ValueError("need at least one bmp and one mpae branch")

    all_vals = np.concatenate([np.asarray(v) for d in (c_clean, c_adv) for v in d.values()])
    lo, hi = float(all_vals.min()), float(all_vals.max())
    per_branch = {}
    for name in c_clean:
        per_branch[name] = {
            "clean": _summary(np.asarray(c_clean[name]), lo, hi),
            "adv": _summary(np.asarray(c_adv[name]), lo, hi),
        }

    clean_bmp = np.concatenate([np.asarray(c_clean[k]) for k in bmp_names])
    clean_mpae = np.concatenate([np.asarray(c_clean[k]) for k in mpae_names])
    adv_bmp = np.concatenate([np.asarray(c_adv[k]) for k in bmp_names])
    adv_mpae = np.concatenate([np.asarray(c_adv[k]) for k in mpae_names])

    p_clean = bootstrap_greater(clean_bmp, clean_mpae, n_resamples, seed=seed)
    p_adv = bootstrap_greater(adv_mpae, adv_bmp, n_resamples, seed=seed + 1)
    return SeparationReport(
        per_branch=per_branch,
        p_clean_bmp_gt_mpae=p_clean,
        p_adv_mpae_gt_bmp=p_adv,
        clean_separated=p_clean < alpha,
        adv_separated=p_adv < alpha,
        alpha=alpha,
    )
