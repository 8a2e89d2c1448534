"""Experiment configuration: parsing, validation, hashing.

Config files are human-readable ``key = value`` lines; nested groups
use dotted keys that mirror the field names below, e.g.::

    experiment_id = desk-default
    datasets.name = shapes10
    datasets.benign_train = 5000
    attack.epsilon = 0.0392156863
    advtune.loss.lambda = 20
    fusion = rfdm

Blank lines and ``#`` comments are ignored.  Every run directory gets
a manifest carrying the config hash; re-running into a directory whose
manifest holds a different hash is refused.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

from ..advtune import AdvTuneConfig, HybridLossConfig
from ..attack import UapConfig
from ..bmp import ContrastiveConfig, HeadConfig
from ..core import PerturbationBudget

FUSION_MODES = ("rfdm", "average", "entropy")
DEFAULT_EPSILON = 10.0 / 255.0


@dataclass(frozen=True)
class DatasetsConfig:
    name: str = "shapes10"
    benign_train: int = 5000
    adv_source: int = 2000
    downstream_eval: int = 1000
    seed: int = 11


@dataclass(frozen=True)
class BranchesConfig:
    encoder_arch: str = "smallres-8-16-32-f128"
    aux_count: int = 1
    victim_init: str = "pretrain"  # pretrain | random | <checkpoint path>
    aux_init: str = "pretrain"
    pretrain: ContrastiveConfig = field(default_factory=lambda: ContrastiveConfig(seed=100))
    bmp: ContrastiveConfig = field(default_factory=lambda: ContrastiveConfig(seed=200))
    pretrain_learning_rate: float = 1e-3

    def __post_init__(self):
        if self.aux_count < 1:
            raise ValueError("need at least one auxiliary encoder (B >= 3 branches total)")


@dataclass(frozen=True)
class DetectionConfig:
    threshold: float = 0.1
    use_max_prob: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str = "desk-default"
    output_dir: str = "runs/desk-default"
    seed: int = 7
    datasets: DatasetsConfig = field(default_factory=DatasetsConfig)
    branches: BranchesConfig = field(default_factory=BranchesConfig)
    attack: UapConfig = field(default_factory=lambda: UapConfig(
        budget=PerturbationBudget(DEFAULT_EPSILON), seed=33))
    advtune: AdvTuneConfig = field(default_factory=lambda: AdvTuneConfig(seed=44))
    head: HeadConfig = field(default_factory=lambda: HeadConfig(seed=55))
    fusion: str = "rfdm"  # rfdm | average | entropy | single:<branch>
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    # ablation toggles: drop the benign branch / skip adversarial tuning
    enable_bmp: bool = True
    enable_advtune: bool = True
    # white-box mode points the attack at every MPAE encoder jointly
    attack_scope: str = "victim"  # victim | all_mpae

    def __post_init__(self):
        if not (self.fusion in FUSION_MODES or self.fusion.startswith("single:")):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.attack_scope not in ("victim", "all_mpae"):
            raise ValueError(f"unknown attack scope {self.attack_scope!r}")

    # -- serialization -------------------------------------------------

    def to_flat_dict(self) -> dict:
        def flatten(prefix, obj, out):
            for f in fields(obj):
                v = getattr(obj, f.name)
                key = f"{prefix}{f.name}" if not prefix else f"{prefix}.{f.name}"
                if is_dataclass(v):
                    flatten(key, v, out)
                else:
                    out[key.replace("lambda_", "lambda")] = v
            return out

        return flatten("", self, {})

    def config_hash(self) -> str:
        payload = json.dumps(self.to_flat_dict(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def dump(self) -> str:
        def fmt(v):
            if isinstance(v, (tuple, list)):
                return ",".join(str(x) for x in v)
            return "" if v is None else str(v)

        lines = [f"{k} = {fmt(v)}" for k, v in sorted(self.to_flat_dict().items())]
        return "\n".join(lines) + "\n"


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config_text(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    flat: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        flat[key.strip()] = _parse_value(raw)
    flat.update(overrides or {})
    return config_from_flat(flat)


def load_config(path: str | Path, overrides: Optional[dict] = None) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(), overrides)


def _pop_group(flat: dict, prefix: str) -> dict:
    out = {}
    for key in list(flat):
        if key.startswith(prefix + "."):
            out[key[len(prefix) + 1 :]] = flat.pop(key)
    return out


def _build_contrastive(group: dict, base: ContrastiveConfig) -> ContrastiveConfig:
    return replace(base, **group)


def config_from_flat(flat: dict) -> ExperimentConfig:
    flat = dict(flat)
    base = ExperimentConfig()

    ds = _pop_group(flat, "datasets")
    datasets = replace(base.datasets, **ds)

    br = _pop_group(flat, "branches")
    pre = {k[len("pretrain.") :]: v for k, v in list(br.items()) if k.startswith("pretrain.")}
    bmpg = {k[len("bmp.") :]: v for k, v in list(br.items()) if k.startswith("bmp.")}
    br = {k: v for k, v in br.items() if "." not in k}
    branches = replace(
        base.branches,
        **br,
        pretrain=_build_contrastive(pre, base.branches.pretrain),
        bmp=_build_contrastive(bmpg, base.branches.bmp),
    )

    at = _pop_group(flat, "attack")
    epsilon = at.pop("epsilon", DEFAULT_EPSILON)
    norm_order = at.pop("norm_order", "inf")
    attack = UapConfig(budget=PerturbationBudget(epsilon, norm_order),
                       **{**{"seed": 33}, **at})

    tv = _pop_group(flat, "advtune")
    loss_group = {k[len("loss.") :]: v for k, v in list(tv.items()) if k.startswith("loss.")}
    tv = {k: v for k, v in tv.items() if "." not in k}
    if "lambda" in loss_group:
        loss_group["lambda_"] = loss_group.pop("lambda")
    loss = replace(HybridLossConfig(), **loss_group)
    advtune = AdvTuneConfig(loss=loss, **{**{"seed": 44}, **tv})

    hd = _pop_group(flat, "head")
    if "hidden_sizes" in hd and isinstance(hd["hidden_sizes"], str):
        hd["hidden_sizes"] = tuple(int(x) for x in hd["hidden_sizes"].split(","))
    head = replace(base.head, **hd)

    det = _pop_group(flat, "detection")
    detection = replace(base.detection, **det)

    return ExperimentConfig(
        datasets=datasets, branches=branches, attack=attack, advtune=advtune,
        head=head, detection=detection, **flat,
    )


def write_config(cfg: ExperimentConfig, path: str | Path):
    Path(path).write_text(cfg.dump())
