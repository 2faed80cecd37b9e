"""Command-line entry point: run, sweep, gen-data, eval."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, config_from_dict, load_config
from .data import load_dataset
from .errors import ConfigError, DataFormatError, InvalidInputError
from .experiment import run_experiment, run_sweep, summarize_report, write_datasets


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.override:
        cfg = config_from_dict(apply_overrides(cfg.to_dict(), args.override))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="path to a JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. fl.rounds=5 (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hflsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    _add_common(run)

    sweep = sub.add_parser("sweep", help="run the config's sweep")
    _add_common(sweep)

    gen = sub.add_parser("gen-data", help="generate dataset snapshot files")
    _add_common(gen)

    ev = sub.add_parser("eval", help="summarize a report or validate a dataset snapshot")
    ev.add_argument("--report", default=None, help="report.jsonl to summarize")
    ev.add_argument("--data", default=None, help="dataset snapshot to validate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = _load(args)
            report = run_experiment(cfg)
            print(f"rounds={len(report.round_metrics)} mean_acc={report.final.mean_acc:.4f} "
                  f"mean_asr={report.final.mean_asr:.4f}")
            print(f"report: {report.report_path}")
            print(f"csv:    {report.csv_path}")
        elif args.command == "sweep":
            cfg = _load(args)
            reports, summary = run_sweep(cfg)
            for rep in reports:
                print(f"{rep.csv_path}: mean_acc={rep.final.mean_acc:.4f} mean_asr={rep.final.mean_asr:.4f}")
            print(f"summary: {summary}")
        elif args.command == "gen-data":
            cfg = _load(args)
            for path in write_datasets(cfg, cfg.out_dir):
                print(path)
        elif args.command == "eval":
            if bool(args.report) == bool(args.data):
                print("eval needs exactly one of --report or --data", file=sys.stderr)
                return 2
            if args.report:
                summary = summarize_report(args.report)
                print(f"rounds={summary['rounds']} mean_acc={summary['mean_acc']:.4f} "
                      f"mean_asr={summary['mean_asr']:.4f}")
            else:
                ds = load_dataset(args.data)
                counts = ",".join(str(c) for c in ds.class_counts())
                print(f"{Path(args.data).name}: {len(ds)} instances, modality={ds.modality}, "
                      f"C={ds.num_classes}, clean={ds.m}, triggered={ds.n}, label_counts=[{counts}]")
    except (ConfigError, DataFormatError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
