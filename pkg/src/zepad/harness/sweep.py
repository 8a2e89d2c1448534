"""Ablation sweeps: one pipeline run per value along a config axis."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Sequence

from ..advtune import AdvTuneConfig, HybridLossConfig
from ..attack import UapConfig
from ..core import MetricsReport, PerturbationBudget
from .config import ExperimentConfig
from .pipeline import _write_csv, run_pipeline

SWEEP_AXES = ("lambda", "epsilon", "aux_count", "head_epochs")


def _apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "lambda":
        loss = replace(cfg.advtune.loss, lambda_=float(value))
        return replace(cfg, advtune=replace(cfg.advtune, loss=loss))
    if axis == "epsilon":
        budget = PerturbationBudget(float(value), cfg.attack.budget.norm_order)
        return replace(cfg, attack=replace(cfg.attack, budget=budget))
    if axis == "aux_count":
        return replace(cfg, branches=replace(cfg.branches, aux_count=int(value)))
    if axis == "head_epochs":
        return replace(cfg, head=replace(cfg.head, epochs=int(value)))
    raise ValueError(f"unknown sweep axis {axis!r} (choose from {SWEEP_AXES})")


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence) -> list[MetricsReport]:
    """Run the full pipeline once per value; seeds are shared across runs.

    Per-run failures do not stop the sweep; they are recorded in the
    collated CSV and re-raised together at the end.
    """
    if not values:
        raise ValueError("sweep needs at least one value")
    base_out = Path(cfg.output_dir)
    rows = []
    reports: list[MetricsReport] = []
    failures: list[tuple[object, Exception]] = []
    for value in values:
        run_cfg = None
        try:
            run_cfg = _apply_axis(cfg, axis, value)
            run_cfg = replace(
                run_cfg,
                experiment_id=f"{cfg.experiment_id}.{axis}={value}",
                output_dir=str(base_out / f"sweep_{axis}" / str(value)),
            )
            report = run_pipeline(run_cfg)
            reports.append(report)
            rows.append([axis, value, f"{report.ba:.6g}", f"{report.ra:.6g}",
                         f"{report.asr:.6g}",
                         "" if report.detection_acc is None else f"{report.detection_acc:.6g}",
                         report.n_eval, ""])
        except Exception as e:  # noqa: BLE001 - recorded and re-raised below
            failures.append((value, e))
            rows.append([axis, value, "", "", "", "", "", f"{type(e).__name__}: {e}"])
    _write_csv(base_out / f"sweep_{axis}.csv",
               ["axis", "value", "ba", "ra", "asr", "detection_acc", "n_eval", "error"],
               rows, cfg.config_hash())
    if failures:
        detail = "; ".join(f"{axis}={v}: {e}" for v, e in failures)
        raise RuntimeError(f"{len(failures)} sweep run(s) failed ({detail})")
    return reports
