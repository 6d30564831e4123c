"""Command line entry point.

    sepda run --config PATH [--seeds 1,2,3] [--out DIR]
    sepda verify-tables
    sepda plot --results DIR
    sepda gen-data --config PATH --out PATH

Failures exit nonzero and print one JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepda", description="Semi-supervised adversarial domain adaptation")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate every row of an experiment config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seeds", type=_seeds, default=None)
    run.add_argument("--out", type=Path, default=None)

    sub.add_parser("verify-tables", help="check the Sum/Cost reconstruction of the reference table")

    plot = sub.add_parser("plot", help="write loss and sweep plots for a results directory")
    plot.add_argument("--results", required=True, type=Path)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset and save it as a manifest")
    gen.add_argument("--config", required=True, type=Path)
    gen.add_argument("--out", required=True, type=Path)
    return parser


def _cmd_run(args) -> int:
    from .experiments import ExperimentConfig, run_experiment

    cfg = ExperimentConfig.from_yaml(args.config)
    rows = run_experiment(cfg, out_dir=args.out, seeds=args.seeds)
    out = args.out if args.out is not None else Path(cfg.output_dir)
    for r in rows:
        print(f"{r.label}\tF1 {r.median['f1']:.2f} (IQR {r.iqr['f1']:.2f})")
    print(f"results written to {out}")
    return 0


def _cmd_verify(args) -> int:
    from .experiments import verify_reference_tables

    ok, text = verify_reference_tables()
    print(text)
    return 0 if ok else 1


def _cmd_plot(args) -> int:
    from .experiments import emit_plots

    for path in emit_plots(args.results):
        print(path)
    return 0


def _cmd_gen_data(args) -> int:
    from .datasets import ConfigError, SyntheticConfig, generate_synthetic, save_manifest

    try:
        doc = yaml.safe_load(args.config.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    # accept either an experiment config or a bare synthetic config
    if isinstance(doc, dict) and "dataset" in doc:
        doc = (doc["dataset"] or {}).get("synthetic")
        if doc is None:
            raise ConfigError("gen-data needs a synthetic dataset config")
    ds = generate_synthetic(SyntheticConfig.from_dict(doc or {}))
    save_manifest(ds, args.out)
    print(f"wrote {sum(len(p) for p in ds.pools.values())} examples to {args.out}")
    return 0


COMMANDS = {"run": _cmd_run, "verify-tables": _cmd_verify, "plot": _cmd_plot, "gen-data": _cmd_gen_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    import torch

    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # reported as a machine-readable record
        record = exc.record() if hasattr(exc, "record") else {"error": type(exc).__name__, "message": str(exc)}
        record["command"] = args.command
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
