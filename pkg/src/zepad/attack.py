"""Threat oracle: universal perturbations against a frozen encoder.

The generator maximizes the mean feature-space L2 distance between
clean and perturbed inputs by sign-gradient ascent, projecting back
onto the L-infinity ball after every step.  It never sees a
classification head, matching a downstream-agnostic attacker.  A
standard sample-wise PGD on the full encoder+head stack is included as
a stronger sanity-check baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import ImageBatch, PerturbationBudget, UniversalPerturbation
from .nn.layers import Module, set_requires_grad
from .nn.serialize import atomic_write_text, weights_hash
from .nn.tensor import Tensor, add, clip, no_grad, softmax_cross_entropy, tsqrt, tsum


@dataclass(frozen=True)
class UapConfig:
    budget: PerturbationBudget
    epochs: int = 20
    step_size: Optional[float] = None  # defaults to epsilon / 10
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def effective_step(self) -> float:
        return self.step_size if self.step_size is not None else self.budget.epsilon / 10.0


@dataclass
class UapResult:
    perturbation: UniversalPerturbation
    objective_per_epoch: list[float]


def apply_perturbation(x, delta) -> np.ndarray | ImageBatch:
    """clip(x + delta, 0, 1); returns the same container kind it was given."""
    arr = x.data if isinstance(x, ImageBatch) else np.asarray(x)
    d = delta.delta if isinstance(delta, UniversalPerturbation) else np.asarray(delta)
    if arr.shape[1:] != d.shape:
        raise ValueError(f"shape mismatch: images {arr.shape[1:]} vs delta {d.shape}")
    out = np.clip(arr + d.astype(arr.dtype, copy=False), 0.0, 1.0)
    return ImageBatch(out) if isinstance(x, ImageBatch) else out


def _signed_direction(grad: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """sign(grad), with exact zeros tie-broken to a seeded random sign.

    The perturbation starts at zero, which is a stationary point of the
    divergence objective (both feature maps coincide), so the first
    ascent direction must come from the tie-break.
    """
    s = np.sign(grad)
    zeros = s == 0
    if zeros.any():
        s[zeros] = rng.choice(np.array([-1.0, 1.0], dtype=grad.dtype), size=int(zeros.sum()))
    return s


def generate_uap(encoder, images: np.ndarray, cfg: UapConfig) -> UapResult:
    """Optimize a single perturbation that disrupts the encoder's features.

    The encoder is used in inference mode and its weights stay fixed;
    only the perturbation receives gradient.  The projection invariant
    max|delta| <= epsilon is asserted after every step.  Passing a list
    of encoders attacks their mean feature divergence (the white-box
    scenario where the attacker sees every branch).
    """
    encoders = list(encoder) if isinstance(encoder, (list, tuple)) else [encoder]
    images = images.data if isinstance(images, ImageBatch) else np.asarray(images)
    if images.shape[0] == 0:
        raise ValueError("empty data stream")
    eps = cfg.budget.epsilon
    step = cfg.effective_step
    dtype = encoders[0].parameters()[0].dtype
    delta = np.zeros(images.shape[1:], dtype=dtype)
    if cfg.epochs == 0:
        return UapResult(UniversalPerturbation(delta, cfg.budget), [])
    rng = np.random.default_rng(cfg.seed)
    for enc in encoders:
        enc.eval()
        set_requires_grad(enc, False)
    try:
        n = images.shape[0]
        # clean reference features are fixed for frozen encoders
        refs = []
        for enc in encoders:
            chunks = []
            with no_grad():
                for start in range(0, n, cfg.batch_size):
                    xb = images[start : start + cfg.batch_size].astype(dtype, copy=False)
                    chunks.append(enc(Tensor(xb)).data)
            refs.append(np.concatenate(chunks))
        if not all(np.all(np.isfinite(r)) for r in refs):
            raise RuntimeError("encoder produced non-finite features on clean input")
        tiny = np.asarray(1e-12, dtype=dtype)
        history = []
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            epoch_obj = 0.0
            batches = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                xb = images[idx].astype(dtype, copy=False)
                dt = Tensor(delta, requires_grad=True)
                xa = clip(add(Tensor(xb), dt), 0.0, 1.0)
                obj = None
                for enc, ref in zip(encoders, refs):
                    diff = add(enc(xa), Tensor(-ref[idx]))
                    dist = tsqrt(add(tsum(diff * diff, axis=1), tiny))
                    term = dist.mean()
                    obj = term if obj is None else add(obj, term)
                if len(encoders) > 1:
                    obj = obj * (1.0 / len(encoders))
                if not np.isfinite(obj.data):
                    raise RuntimeError("encoder produced non-finite features under attack")
                obj.backward()
                delta = delta + step * _signed_direction(dt.grad, rng)
                delta = np.clip(delta, -eps, eps)
                assert np.abs(delta).max() <= eps + 1e-9
                epoch_obj += float(obj.data)
                batches += 1
            history.append(epoch_obj / batches)
        return UapResult(UniversalPerturbation(delta, cfg.budget), history)
    finally:
        for enc in encoders:
            set_requires_grad(enc, True)


def save_uap(path: str | Path, result: UapResult, encoder: Module, cfg: UapConfig,
             extra: Optional[dict] = None):
    """Persist delta as npz plus a manifest with budget, seed and source hash."""
    path = Path(path)
    if path.suffix == ".npz":
        path = path.with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    import io, os, tempfile

    buf = io.BytesIO()
    np.savez(buf, delta=result.perturbation.delta)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path.with_suffix(".npz"))
    manifest = {
        "epsilon": cfg.budget.epsilon,
        "norm_order": cfg.budget.norm_order,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "step_size": cfg.effective_step,
        "source_encoder_sha256": weights_hash(encoder),
        "objective_per_epoch": result.objective_per_epoch,
    }
    manifest.update(extra or {})
    atomic_write_text(path.with_suffix(".json"), json.dumps(manifest, indent=2, sort_keys=True))


def load_uap(path: str | Path) -> tuple[UniversalPerturbation, dict]:
    path = Path(path)
    if path.suffix == ".npz":
        path = path.with_suffix("")
    manifest = json.loads(path.with_suffix(".json").read_text())
    with np.load(path.with_suffix(".npz")) as z:
        delta = z["delta"]
    budget = PerturbationBudget(manifest["epsilon"], manifest.get("norm_order", "inf"))
    return UniversalPerturbation(delta, budget), manifest


def pgd_samplewise(encoder: Module, head: Module, images: np.ndarray, labels: np.ndarray,
                   budget: PerturbationBudget, steps: int,
                   step_size: Optional[float] = None,
                   batch_size: int = 256) -> np.ndarray:
    """Per-sample L-infinity PGD on the cross-entropy of head(encoder(x))."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    x0 = images.data if isinstance(images, ImageBatch) else np.asarray(images)
    if steps == 0:
        return x0.copy()
    eps = budget.epsilon
    alpha = step_size if step_size is not None else 2.5 * eps / steps
    dtype = encoder.parameters()[0].dtype
    encoder.eval()
    head.eval()
    set_requires_grad(encoder, False)
    set_requires_grad(head, False)
    try:
        out = np.empty_like(x0)
        for start in range(0, x0.shape[0], batch_size):
            xb = x0[start : start + batch_size].astype(dtype, copy=False)
            yb = labels[start : start + batch_size]
            xadv = xb.copy()
            for _ in range(steps):
                xt = Tensor(xadv, requires_grad=True)
                loss = softmax_cross_entropy(head(encoder(xt)), yb)
                loss.backward()
                xadv = xadv + alpha * np.sign(xt.grad)
                xadv = np.clip(xadv, xb - eps, xb + eps)
                xadv = np.clip(xadv, 0.0, 1.0)
            out[start : start + batch_size] = xadv
        return out
    finally:
        set_requires_grad(encoder, True)
        set_requires_grad(head, True)
