"""End-to-end experiment pipeline.

Stage order: dataset -> encoder inits (victim, auxiliaries, benign
branch) -> universal-perturbation generation against the victim ->
adversarial fine-tuning of the MPAE encoders -> frozen-encoder head
training for every branch (including the untuned baselines) ->
evaluation and metrics.

Every stage persists its artifacts under the run directory and is
skipped on re-entry when they already exist, so a failed run resumes
where it stopped.  The run directory is stamped with the config hash
and a run with a different hash refuses to reuse it.
"""

from __future__ import annotations

import csv
import io
import json
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .. import __version__
from ..advtune import adversarial_finetune
from ..attack import apply_perturbation, generate_uap, load_uap, save_uap
from ..backend import backend_name
from ..bmp import Batch, predict_proba, pretrain_bmp, train_head
from ..core import MetricsReport, attack_success_rate, benign_accuracy, robust_accuracy
from ..nn.models import build_encoder
from ..nn.serialize import atomic_write_bytes, atomic_write_text, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import DatasetBundle, load_dataset
from .ensembles import fuse_matrix

STANDARD_FUSIONS = ("rfdm", "average", "entropy")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@dataclass
class PipelineState:
    cfg: ExperimentConfig
    out: Path
    data: Optional[DatasetBundle] = None
    uap: Optional[object] = None
    encoders: dict = field(default_factory=dict)
    heads: dict = field(default_factory=dict)
    curves: list = field(default_factory=list)


def _ensure_run_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    h = cfg.config_hash()
    if manifest_path.exists():
        existing = json.loads(manifest_path.read_text())
        if existing.get("config_hash") != h:
            raise RuntimeError(
                f"output directory {out} holds config hash {existing.get('config_hash')}, "
                f"refusing to overwrite with {h}"
            )
    manifest = {
        "experiment_id": cfg.experiment_id,
        "config_hash": h,
        "seed": cfg.seed,
        "seeds": {
            "dataset": cfg.datasets.seed,
            "attack": cfg.attack.seed,
            "advtune": cfg.advtune.seed,
            "head": cfg.head.seed,
            "pretrain": cfg.branches.pretrain.seed,
            "bmp": cfg.branches.bmp.seed,
        },
        "versions": {
            "zepad": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "backend": backend_name(),
            "platform": platform.platform(),
        },
    }
    atomic_write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True))
    atomic_write_text(out / "config.txt", cfg.dump())
    return out


def _stage(name):
    def wrap(fn):
        def inner(state: PipelineState, *args, **kwargs):
            try:
                return fn(state, *args, **kwargs)
            except Exception as e:  # noqa: BLE001 - annotate and re-raise
                raise StageError(name, e) from e

        inner.__name__ = fn.__name__
        return inner

    return wrap


# -- stages ------------------------------------------------------------------


@_stage("data")
def stage_data(state: PipelineState):
    ds = state.cfg.datasets
    state.data = load_dataset(ds.name, ds.benign_train, ds.adv_source,
                              ds.downstream_eval, ds.seed)
    state.data.splits.assert_disjoint()
    atomic_write_text(state.out / "splits.json",
                      json.dumps(state.data.splits.to_json_dict(), indent=2))


def _encoder_seed(cfg: ExperimentConfig, name: str) -> int:
    offsets = {"victim": 0, "bmp": 1}
    if name.startswith("aux"):
        return cfg.seed * 1000 + 100 + int(name[3:])
    return cfg.seed * 1000 + offsets[name]


def _init_encoder(state: PipelineState, name: str, init: str, contrastive_cfg,
                  tag: str) -> None:
    """Create or load one encoder init; 'pretrain' runs contrastive training."""
    cfg = state.cfg
    path = state.out / "checkpoints" / f"{name}_init"
    if path.with_suffix(".npz").exists():
        enc, _ = load_checkpoint(path)
        state.encoders[name] = enc
        return
    if init not in ("pretrain", "random") and init:
        enc, _ = load_checkpoint(init)  # external checkpoint
        state.encoders[name] = enc
        save_checkpoint(path, enc, {"branch_role": tag, "config_hash": cfg.config_hash(),
                                    "seed": _encoder_seed(cfg, name), "source": init})
        return
    rng = np.random.default_rng(_encoder_seed(cfg, name))
    enc = build_encoder(cfg.branches.encoder_arch, rng=rng)
    if init == "pretrain":
        xt, _ = state.data.split("benign_train")
        result = pretrain_bmp([Batch(xt, provenance="benign")], contrastive_cfg, enc,
                              learning_rate=cfg.branches.pretrain_learning_rate)
        for rec in result.curves:
            state.curves.append((f"pretrain_{name}", rec["epoch"], "loss", rec["loss"]))
    save_checkpoint(path, enc, {"branch_role": tag, "config_hash": cfg.config_hash(),
                                "seed": _encoder_seed(cfg, name), "init": init})
    state.encoders[name] = enc


@_stage("pretrain-bmp")
def stage_bmp(state: PipelineState):
    _init_encoder(state, "bmp", "pretrain", state.cfg.branches.bmp, "bmp")


@_stage("encoder-inits")
def stage_inits(state: PipelineState):
    from dataclasses import replace

    cfg = state.cfg
    pre = cfg.branches.pretrain
    _init_encoder(state, "victim", cfg.branches.victim_init, pre, "mpae_victim")
    for i in range(cfg.branches.aux_count):
        aux_pre = replace(pre, seed=pre.seed + 17 * (i + 1))
        _init_encoder(state, f"aux{i}", cfg.branches.aux_init, aux_pre, "mpae_aux")


@_stage("gen-uap")
def stage_uap(state: PipelineState):
    cfg = state.cfg
    path = state.out / "attack" / "uap"
    if path.with_suffix(".npz").exists():
        state.uap, _ = load_uap(path)
        return
    xs, _ = state.data.split("adv_source")
    if cfg.attack_scope == "all_mpae":
        targets = [state.encoders["victim"]] + [
            state.encoders[f"aux{i}"] for i in range(cfg.branches.aux_count)
        ]
    else:
        targets = state.encoders["victim"]
    result = generate_uap(targets, xs, cfg.attack)
    for epoch, obj in enumerate(result.objective_per_epoch):
        state.curves.append(("uap", epoch, "objective", obj))
    save_uap(path, result,
             state.encoders["victim"] if cfg.attack_scope == "victim" else targets[0],
             cfg.attack, extra={"config_hash": cfg.config_hash(),
                                "attack_scope": cfg.attack_scope})
    state.uap = result.perturbation


@_stage("advtune")
def stage_advtune(state: PipelineState):
    from dataclasses import replace

    cfg = state.cfg
    names = ["victim"] + [f"aux{i}" for i in range(cfg.branches.aux_count)]
    k = state.data.labels.max() + 1
    for j, name in enumerate(names):
        path = state.out / "checkpoints" / f"{name}_tuned"
        tuned_key = f"{name}_tuned"
        if path.with_suffix(".npz").exists():
            enc, _ = load_checkpoint(path)
            state.encoders[tuned_key] = enc
            continue
        if not cfg.enable_advtune:
            state.encoders[tuned_key] = state.encoders[name]
            continue
        xt, yt = state.data.split("benign_train")
        # re-instantiate from the init checkpoint so resumed runs match
        enc, _ = load_checkpoint(state.out / "checkpoints" / f"{name}_init")
        tune_cfg = replace(cfg.advtune, seed=cfg.advtune.seed + j)
        result = adversarial_finetune(
            enc, xt, yt, int(k), state.uap, tune_cfg,
            out_dir=None,
        )
        for rec in result.curves:
            for metric in ("l_c", "l_f", "hybrid"):
                state.curves.append((f"advtune_{name}", rec["epoch"], metric, rec[metric]))
        # per-encoder curve file with the canonical column layout
        _write_csv(state.out / f"advtune_{name}.csv", ["epoch", "l_c", "l_f", "hybrid"],
                   [[r["epoch"], r["l_c"], r["l_f"], r["hybrid"]] for r in result.curves],
                   cfg.config_hash())
        save_checkpoint(path, enc, {
            "branch_role": "mpae_victim" if name == "victim" else "mpae_aux",
            "config_hash": cfg.config_hash(), "seed": tune_cfg.seed,
            "lambda": cfg.advtune.loss.lambda_, "epoch": cfg.advtune.epochs - 1,
        })
        state.encoders[tuned_key] = enc


def _branch_specs(cfg: ExperimentConfig) -> list[tuple[str, str, str]]:
    """(branch name, encoder key, role) for every evaluated branch variant."""
    specs = [("bmp", "bmp", "bmp"),
             ("mpae_victim", "victim_tuned", "mpae_victim"),
             ("victim_untuned", "victim", "mpae_victim")]
    for i in range(cfg.branches.aux_count):
        specs.append((f"mpae_aux{i}", f"aux{i}_tuned", "mpae_aux"))
        specs.append((f"aux{i}_untuned", f"aux{i}", "mpae_aux"))
    return specs


@_stage("train-heads")
def stage_heads(state: PipelineState):
    cfg = state.cfg
    xt, yt = state.data.split("benign_train")
    k = int(state.data.labels.max() + 1)
    for j, (branch, enc_key, role) in enumerate(_branch_specs(cfg)):
        path = state.out / "checkpoints" / f"head_{branch}"
        if path.with_suffix(".npz").exists():
            feat_dim = state.encoders[enc_key].feature_dim
            from ..nn.models import ClassifierHead

            head = ClassifierHead(feat_dim, k, hidden_sizes=cfg.head.hidden_sizes)
            head, _ = load_checkpoint(path, head)
            state.heads[branch] = head
            continue
        from dataclasses import replace

        hcfg = replace(cfg.head, seed=cfg.head.seed + j)
        result = train_head(state.encoders[enc_key], xt, yt, k, hcfg,
                            out_path=path,
                            manifest={"branch_role": role, "branch": branch,
                                      "config_hash": cfg.config_hash(), "seed": hcfg.seed})
        for rec in result.curves:
            state.curves.append((f"head_{branch}", rec["epoch"], "loss", rec["loss"]))
            state.curves.append((f"head_{branch}", rec["epoch"], "train_acc", rec["train_acc"]))
        state.heads[branch] = result.head


@_stage("eval")
def stage_eval(state: PipelineState) -> MetricsReport:
    cfg = state.cfg
    xe, ye = state.data.split("downstream_eval")
    xadv = apply_perturbation(xe, state.uap)
    probs_path = state.out / "eval" / "branch_probs.npz"
    specs = _branch_specs(cfg)
    if probs_path.exists():
        with np.load(probs_path) as z:
            probs = {k: z[k] for k in z.files}
    else:
        probs = {}
        for branch, enc_key, _role in specs:
            enc, head = state.encoders[enc_key], state.heads[branch]
            probs[f"{branch}__clean"] = predict_proba(enc, head, xe)
            probs[f"{branch}__adv"] = predict_proba(enc, head, xadv)
        buf = io.BytesIO()
        np.savez(buf, **probs)
        atomic_write_bytes(probs_path, buf.getvalue())

    report = compute_metrics(cfg, probs, ye)
    _write_outputs(state, report, probs, ye)
    return report


# -- metric assembly ---------------------------------------------------------


def _single_metrics(pc: np.ndarray, pa: np.ndarray, ye: np.ndarray) -> dict:
    cp = np.argmax(pc, axis=1)
    ap = np.argmax(pa, axis=1)
    return {
        "ba": benign_accuracy(cp, ye),
        "ra": robust_accuracy(ap, ye),
        "asr": attack_success_rate(cp, ap),
    }


def compute_metrics(cfg: ExperimentConfig, probs: dict, ye: np.ndarray) -> MetricsReport:
    """Assemble the metrics report from persisted per-branch probabilities."""
    names = ["mpae_victim"] + [f"mpae_aux{i}" for i in range(cfg.branches.aux_count)]
    active = (["bmp"] if cfg.enable_bmp else []) + names
    roles = ["bmp" if n == "bmp" else ("mpae_victim" if n == "mpae_victim" else "mpae_aux")
             for n in active]
    untuned = ["bmp", "victim_untuned"] + [f"aux{i}_untuned"
                                           for i in range(cfg.branches.aux_count)]

    def stack(branches, cond):
        return np.stack([probs[f"{b}__{cond}"] for b in branches])

    det = cfg.detection

    def fused_metrics(branches, branch_roles, mode):
        fc = fuse_matrix(stack(branches, "clean"), branch_roles, mode,
                         det.threshold, det.use_max_prob)
        fa = fuse_matrix(stack(branches, "adv"), branch_roles, mode,
                         det.threshold, det.use_max_prob)
        out = {
            "ba": benign_accuracy(fc["preds"], ye),
            "ra": robust_accuracy(fa["preds"], ye),
            "asr": attack_success_rate(fc["preds"], fa["preds"]),
        }
        return out, fc, fa

    headline, fc, fa = fused_metrics(active, roles, cfg.fusion)

    detection_acc = None
    if cfg.enable_bmp:
        correct = np.concatenate([~fc["dae_flag"], fa["dae_flag"]])
        detection_acc = 100.0 * float(np.mean(correct))

    extra = {
        "experiment_id": cfg.experiment_id,
        "config_hash": cfg.config_hash(),
        "fusion": cfg.fusion,
        "branches": {},
        "baseline_victim": _single_metrics(probs["victim_untuned__clean"],
                                           probs["victim_untuned__adv"], ye),
        "fusion_variants": {},
        "ablation": {},
        "detection": None,
    }
    for b in set(active) | set(untuned) | {"mpae_victim"}:
        extra["branches"][b] = _single_metrics(probs[f"{b}__clean"], probs[f"{b}__adv"], ye)

    full = ["bmp"] + names
    full_roles = ["bmp"] + ["mpae_victim"] + ["mpae_aux"] * cfg.branches.aux_count
    for mode in STANDARD_FUSIONS:
        m, _, _ = fused_metrics(full, full_roles, mode)
        extra["fusion_variants"][mode] = m

    no_bmp, _, _ = fused_metrics(names, full_roles[1:], "rfdm")
    untuned_roles = ["bmp", "mpae_victim"] + ["mpae_aux"] * cfg.branches.aux_count
    no_tune, _, _ = fused_metrics(untuned, untuned_roles, "rfdm")
    extra["ablation"] = {"no_bmp": no_bmp, "no_advtune": no_tune}

    if detection_acc is not None:
        extra["detection"] = {
            "acc": detection_acc,
            "threshold": det.threshold,
            "use_max_prob": det.use_max_prob,
            "tpr": 100.0 * float(np.mean(fa["dae_flag"])),
            "tnr": 100.0 * float(np.mean(~fc["dae_flag"])),
        }

    return MetricsReport(
        ba=headline["ba"], ra=headline["ra"], asr=headline["asr"],
        n_eval=int(ye.shape[0]), detection_acc=detection_acc, extra=extra,
    )


# -- output files ------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows: list, config_hash: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _write_outputs(state: PipelineState, report: MetricsReport, probs: dict,
                   ye: np.ndarray):
    cfg = state.cfg
    h = cfg.config_hash()
    out = state.out
    payload = report.to_json_dict()
    atomic_write_text(out / "metrics.json", json.dumps(payload, indent=2, sort_keys=True))
    _write_csv(out / "metrics.csv",
               ["experiment_id", "ba", "ra", "asr", "detection_acc", "n_eval"],
               [report.to_csv_row(cfg.experiment_id).split(",")], h)
    if state.curves:
        _write_csv(out / "curves.csv", ["stage", "epoch", "metric", "value"],
                   state.curves, h)

    # per-sample decision log over the active fused system
    names = ["mpae_victim"] + [f"mpae_aux{i}" for i in range(cfg.branches.aux_count)]
    active = (["bmp"] if cfg.enable_bmp else []) + names
    roles = ["bmp" if n == "bmp" else ("mpae_victim" if n == "mpae_victim" else "mpae_aux")
             for n in active]
    det = cfg.detection
    rows = []
    for cond in ("clean", "adv"):
        stackp = np.stack([probs[f"{b}__{cond}"] for b in active])
        f = fuse_matrix(stackp, roles, cfg.fusion, det.threshold, det.use_max_prob)
        for i in range(stackp.shape[1]):
            row = [i, cond]
            row += [f"{f['m'][j, i]:.6f}" for j in range(len(active))]
            row += [f"{f['c'][j, i]:.6f}" for j in range(len(active))]
            row += [f"{f['weights'][j, i]:.6f}" for j in range(len(active))]
            gap = f["gap"][i]
            row += [int(f["preds"][i]),
                    "" if np.isnan(gap) else f"{gap:.6f}",
                    int(f["dae_flag"][i])]
            rows.append(row)
    header = (["sample_id", "condition"]
              + [f"m_{b}" for b in active] + [f"c_{b}" for b in active]
              + [f"w_{b}" for b in active] + ["predicted_class", "gap", "dae_flag"])
    _write_csv(out / "eval" / "decisions.csv", header, rows, h)


# -- entry points -------------------------------------------------------------


PIPELINE_STAGES = ["data", "pretrain-bmp", "encoder-inits", "gen-uap", "advtune",
                   "train-heads", "eval"]


def run_pipeline(cfg: ExperimentConfig, until: str = "eval") -> Optional[MetricsReport]:
    """Run the pipeline (optionally stopping after the named stage)."""
    out = _ensure_run_dir(cfg)
    state = PipelineState(cfg=cfg, out=out)
    stage_data(state)
    if until == "data":
        return None
    stage_bmp(state)
    if until == "pretrain-bmp":
        return None
    stage_inits(state)
    if until == "encoder-inits":
        return None
    stage_uap(state)
    if until == "gen-uap":
        return None
    stage_advtune(state)
    if until == "advtune":
        return None
    stage_heads(state)
    if until == "train-heads":
        return None
    return stage_eval(state)
