"""Experiment execution: dataset assembly, single runs, sweeps, reports.

A run is fully determined by its config: the master seed fans out into
named streams (demo examples, public data, private data, federation), so
re-running the echoed config reproduces every metric value and the metrics
CSV byte for byte. Wall-clock time is recorded in the report file but never
in the CSV.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .attacks import KEEP_TRUE_LABEL, MISLABEL_TO_TARGET, PatchTrigger, TokenAppendTrigger
from .config import ExperimentConfig, config_from_dict
from .data import Dataset, GRID, save_dataset
from .datagen import (
    DemonstrationSet,
    compose_demonstration_set,
    draw_private_datasets,
    generate_clean_dataset,
    generate_public_dataset,
)
from .errors import InvalidInputError
from .federation import EvalContext, run_federation, snapshot_metrics
from .metrics import MetricsReport
from .nn import ArchSpec
from .seeding import derive_seed


@dataclass(frozen=True)
class DataBundle:
    demo: DemonstrationSet
    public: Dataset
    privates: list[Dataset]
    test: Dataset


@dataclass(frozen=True)
class RunReport:
    """Everything a run produced: config echo, per-round series, final metrics."""

    config: dict
    round_metrics: list[MetricsReport]
    final: MetricsReport
    wall_clock_s: float
    version: str
    report_path: Path | None = None
    csv_path: Path | None = None


def _describe_trigger(trigger) -> str:
    if isinstance(trigger, PatchTrigger):
        return f"set the {trigger.anchor} {trigger.size}x{trigger.size} block to {trigger.value}"
    if isinstance(trigger, TokenAppendTrigger):
        return f"overwrite the final position with token {trigger.token_id}"
    return f"overwrite the trailing positions with tokens {list(trigger.token_ids)}"


def resolve_generator(cfg: ExperimentConfig):
    """Fill an unset prototype seed from the master seed."""
    gen = cfg.generator
    if gen.prototype_seed is None:
        gen = dataclasses.replace(gen, prototype_seed=derive_seed(cfg.master_seed, "data/prototypes"))
    return gen


def build_datasets(cfg: ExperimentConfig) -> DataBundle:
    """Assemble demo set, public dataset, private splits, and test set.

    The public set's poisoning follows the attack mode: none for vanilla,
    mislabeled triggers for fed_ebd, correctly labeled triggers for cbd.
    """
    gen = resolve_generator(cfg)
    demo_examples = generate_clean_dataset(
        gen, per_class=2, seed=derive_seed(cfg.master_seed, "data/demos"), origin="public"
    ).instances
    mode = cfg.fl.attack_mode
    ratio = 0.0 if mode == "vanilla" else cfg.poison.ratio
    demo = compose_demonstration_set(
        _describe_trigger(cfg.trigger),
        demo_examples,
        cfg.trigger,
        cfg.poison.target_class,
        ratio,
    )
    label_mode = KEEP_TRUE_LABEL if mode == "cbd" else MISLABEL_TO_TARGET
    public = generate_public_dataset(
        gen, demo, derive_seed(cfg.master_seed, "data/public"), label_mode=label_mode
    )
    privates, test = draw_private_datasets(
        gen,
        cfg.fl.n_clients,
        cfg.private_per_client,
        distribution=cfg.fl.distribution,
        seed=derive_seed(cfg.master_seed, "data/private"),
        dirichlet_alpha=cfg.fl.dirichlet_alpha,
        test_per_class=cfg.test_per_class,
    )
    return DataBundle(demo=demo, public=public, privates=privates, test=test)


def base_arch_for(cfg: ExperimentConfig) -> ArchSpec:
    gen = cfg.generator
    if gen.modality == GRID:
        return ArchSpec(modality=GRID, num_classes=gen.num_classes, grid_side=gen.grid_side)
    return ArchSpec(
        modality=gen.modality,
        num_classes=gen.num_classes,
        vocab_size=gen.vocab_size,
        max_seq_len=gen.max_seq_len,
    )


def _csv_lines(reports: list[MetricsReport], n_clients: int) -> list[str]:
    header = ["round", "mean_acc", "mean_asr"]
    header += [f"acc_client_{i}" for i in range(n_clients)]
    header += [f"asr_client_{i}" for i in range(n_clients)]
    lines = [",".join(header)]
    for rep in reports:
        row = [str(rep.round_index), repr(rep.mean_acc), repr(rep.mean_asr)]
        row += [repr(rep.per_client[i].acc) for i in range(n_clients)]
        row += [repr(rep.per_client[i].asr) for i in range(n_clients)]
        lines.append(",".join(row))
    return lines


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunReport:
    """Generate data, run the federation, evaluate every round, emit reports.

    Writes ``report.jsonl`` (config echo, one record per round, final record)
    and ``metrics.csv`` (fixed column order: round, mean_acc, mean_asr, then
    per-client acc columns, then per-client asr columns).
    """
    started = time.perf_counter()
    bundle = build_datasets(cfg)
    logs, clients = run_federation(
        cfg.fl,
        base_arch_for(cfg),
        bundle.public,
        bundle.privates,
        bundle.test,
        cfg.trigger,
        cfg.poison.target_class,
        derive_seed(cfg.master_seed, "federation"),
    )
    if logs:
        round_metrics = [log.metrics for log in logs]
        final = round_metrics[-1]
    else:
        ctx = EvalContext.build(bundle.test, cfg.trigger, cfg.poison.target_class)
        final = snapshot_metrics(clients, ctx, round_index=0)
        round_metrics = []
    wall = time.perf_counter() - started

    report = RunReport(
        config=cfg.to_dict(),
        round_metrics=round_metrics,
        final=final,
        wall_clock_s=wall,
        version=__version__,
    )
    target = Path(out_dir) if out_dir is not None else Path(cfg.out_dir)
    target.mkdir(parents=True, exist_ok=True)
    report_path = target / "report.jsonl"
    csv_path = target / "metrics.csv"
    with report_path.open("w", encoding="utf-8") as fh:
        fh.write(
            json.dumps({"kind": "run_header", "version": __version__, "config": report.config}, sort_keys=True)
            + "\n"
        )
        for log in logs:
            fh.write(json.dumps(log.to_dict(), sort_keys=True) + "\n")
        fh.write(
            json.dumps(
                {
                    "kind": "final",
                    "mean_acc": final.mean_acc,
                    "mean_asr": final.mean_asr,
                    "wall_clock_s": wall,
                },
                sort_keys=True,
            )
            + "\n"
        )
    csv_path.write_text("\n".join(_csv_lines(round_metrics, cfg.fl.n_clients)) + "\n", encoding="utf-8")
    return dataclasses.replace(report, report_path=report_path, csv_path=csv_path)


def _with_sweep_value(cfg: ExperimentConfig, value: float) -> ExperimentConfig:
    if cfg.sweep.parameter == "poison_ratio":
        poison = dataclasses.replace(cfg.poison, ratio=value)
        return dataclasses.replace(cfg, poison=poison, sweep=None)
    fl = dataclasses.replace(cfg.fl, utilization_ratio=value)
    return dataclasses.replace(cfg, fl=fl, sweep=None)


def run_sweep(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> tuple[list[RunReport], Path]:
    """One run per sweep value on shared base seeds, plus a summary CSV.

    Summary rows are sorted ascending by the swept value with the header
    ``value,mean_acc,mean_asr``.
    """
    if cfg.sweep is None:
        raise InvalidInputError("config has no sweep section")
    target = Path(out_dir) if out_dir is not None else Path(cfg.out_dir)
    target.mkdir(parents=True, exist_ok=True)
    reports = []
    rows = ["value,mean_acc,mean_asr"]
    for value in sorted(cfg.sweep.values):
        run_cfg = _with_sweep_value(cfg, value)
        report = run_experiment(run_cfg, target / f"{cfg.sweep.parameter}_{value:g}")
        reports.append(report)
        rows.append(f"{value:g},{report.final.mean_acc!r},{report.final.mean_asr!r}")
    summary = target / "summary.csv"
    summary.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return reports, summary


def write_datasets(cfg: ExperimentConfig, out_dir: str | Path) -> list[Path]:
    """Emit snapshot files for the public set, each private split, and the test set."""
    bundle = build_datasets(cfg)
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    paths = [target / "public.jsonl"]
    save_dataset(bundle.public, paths[0])
    for i, private in enumerate(bundle.privates):
        path = target / f"private_{i:03d}.jsonl"
        save_dataset(private, path)
        paths.append(path)
    test_path = target / "test.jsonl"
    save_dataset(bundle.test, test_path)
    paths.append(test_path)
    return paths


def replay_config(report_path: str | Path) -> ExperimentConfig:
    """Rebuild the config echoed into a report file."""
    with Path(report_path).open("r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
    if header.get("kind") != "run_header":
        raise InvalidInputError(f"{report_path}: missing run header")
    return config_from_dict(header["config"])


def summarize_report(report_path: str | Path) -> dict:
    """Final metrics from a report file, cross-checked against per-client rows."""
    rounds = []
    final = None
    with Path(report_path).open("r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("kind") == "round":
                rounds.append(rec)
            elif rec.get("kind") == "final":
                final = rec
    if final is None:
        raise InvalidInputError(f"{report_path}: no final record")
    if rounds:
        last = rounds[-1]["metrics"]
        per_client = last["per_client"].values()
        mean_acc = sum(c["acc"] for c in per_client) / len(per_client)
        mean_asr = sum(c["asr"] for c in per_client) / len(per_client)
        if abs(mean_acc - final["mean_acc"]) > 1e-12 or abs(mean_asr - final["mean_asr"]) > 1e-12:
            raise InvalidInputError(f"{report_path}: final record disagrees with per-client metrics")
    return {"rounds": len(rounds), "mean_acc": final["mean_acc"], "mean_asr": final["mean_asr"]}
