"""Run the poison-ratio and utilization-ratio sweeps and print summaries.

Usage:
    python scripts/run_ratio_sweeps.py [--seed 7] [--out out/sweeps]
"""

import argparse
import dataclasses
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from hflsim.attacks import PoisonConfig
from hflsim.config import ExperimentConfig, SweepSpec
from hflsim.datagen import GeneratorConfig
from hflsim.experiment import run_sweep
from hflsim.federation import FLConfig


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--rounds", type=int, default=20)
    parser.add_argument("--out", default="out/sweeps")
    args = parser.parse_args()

    base = ExperimentConfig(
        fl=FLConfig(setting="cross_silo", rounds=args.rounds, attack_mode="fed_ebd"),
        generator=GeneratorConfig(prototype_seed=None),
        poison=PoisonConfig(target_class=0, ratio=0.2),
        master_seed=args.seed,
    )
    sweeps = {
        "poison_ratio": SweepSpec("poison_ratio", (0.05, 0.10, 0.15, 0.20, 0.25)),
        "utilization_ratio": SweepSpec("utilization_ratio", (0.2, 0.4, 0.6, 0.8, 1.0)),
    }
    for name, spec in sweeps.items():
        cfg = dataclasses.replace(base, sweep=spec, out_dir=str(Path(args.out) / name))
        reports, summary = run_sweep(cfg)
        print(f"\n{name} sweep (summary: {summary})")
        print(f"{'value':>6} {'ACC':>7} {'ASR':>7}")
        for rep in reports:
            value = (
                rep.config["poison"]["ratio"]
                if name == "poison_ratio"
                else rep.config["fl"]["utilization_ratio"]
            )
            print(f"{value:6.2f} {rep.final.mean_acc:7.3f} {rep.final.mean_asr:7.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
