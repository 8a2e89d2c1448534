"""Command-line interface.

Every subcommand takes ``--config <path>`` (key = value file mirroring
the experiment-config field names), plus ``--seed`` and ``--out``
overrides.  Commands that depend on earlier stages resume from the
artifacts already present in the output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..core import MetricsReport
from ..nn.serialize import atomic_write_text
from ..rfdm import confidence_batch
from .config import ExperimentConfig, load_config
from .pipeline import run_pipeline
from .stats import confidence_separation_report
from .sweep import SWEEP_AXES, sweep

STAGE_COMMANDS = {
    "pretrain-bmp": "pretrain-bmp",
    "gen-uap": "gen-uap",
    "advtune": "advtune",
    "train-heads": "train-heads",
    "eval": "eval",
}


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=str, default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--out", type=str, default=None, help="override the output directory")


def _branch_confidences(out_dir: Path, aux_count: int):
    probs_path = out_dir / "eval" / "branch_probs.npz"
    if not probs_path.exists():
        raise FileNotFoundError(f"{probs_path} not found; run `zepad eval` first")
    names = ["bmp", "mpae_victim"] + [f"mpae_aux{i}" for i in range(aux_count)]
    c_clean, c_adv = {}, {}
    with np.load(probs_path) as z:
        for name in names:
            c_clean[name] = confidence_batch(z[f"{name}__clean"].max(axis=1))
            c_adv[name] = confidence_batch(z[f"{name}__adv"].max(axis=1))
    return c_clean, c_adv


def cmd_stage(args, until: str) -> int:
    cfg = _load(args)
    report = run_pipeline(cfg, until=until)
    if isinstance(report, MetricsReport):
        print(report.to_json())
    else:
        print(f"completed through stage '{until}' -> {cfg.output_dir}")
    return 0


def cmd_detect(args) -> int:
    cfg = _load(args)
    report = run_pipeline(cfg, until="eval")
    det = report.extra.get("detection")
    if det is None:
        print("detection unavailable (benign branch disabled)", file=sys.stderr)
        return 1
    payload = json.dumps(det, indent=2, sort_keys=True)
    atomic_write_text(Path(cfg.output_dir) / "detection.json", payload)
    print(payload)
    return 0


def cmd_report(args) -> int:
    cfg = _load(args)
    run_pipeline(cfg, until="eval")
    c_clean, c_adv = _branch_confidences(Path(cfg.output_dir), cfg.branches.aux_count)
    rep = confidence_separation_report(c_clean, c_adv, seed=cfg.seed)
    payload = json.dumps(rep.to_json_dict(), indent=2, sort_keys=True)
    atomic_write_text(Path(cfg.output_dir) / "report.json", payload)
    print(f"clean separation (bmp > mpae): p = {rep.p_clean_bmp_gt_mpae:.4f} "
          f"{'PASS' if rep.clean_separated else 'FAIL'}")
    print(f"adv separation (mpae > bmp):   p = {rep.p_adv_mpae_gt_bmp:.4f} "
          f"{'PASS' if rep.adv_separated else 'FAIL'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = [v for v in args.values.split(",") if v]
    reports = sweep(cfg, args.axis, values)
    for value, report in zip(values, reports):
        print(f"{args.axis}={value}: ba={report.ba:.2f} ra={report.ra:.2f} asr={report.asr:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zepad",
        description="dual-branch adversarial defense lab for pre-trained encoders",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        p = sub.add_parser(name, help=f"run the pipeline through the {name} stage")
        _add_common(p)
    p = sub.add_parser("detect", help="balanced-mix adversarial-input detection report")
    _add_common(p)
    p = sub.add_parser("report", help="confidence-separation statistics report")
    _add_common(p)
    p = sub.add_parser("sweep", help="run the pipeline across a config axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in STAGE_COMMANDS:
        return cmd_stage(args, STAGE_COMMANDS[args.command])
    if args.command == "detect":
        return cmd_detect(args)
    if args.command == "report":
        return cmd_report(args)
    if args.command == "sweep":
        return cmd_sweep(args)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
