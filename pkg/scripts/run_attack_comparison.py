"""Compare the three attack modes across both federation settings.

Runs vanilla / cbd / fed_ebd in cross-silo and cross-device desk
configurations on a shared master seed and prints an ACC/ASR table
(per-round CSVs land under --out).

Usage:
    python scripts/run_attack_comparison.py [--seed 7] [--rounds 20] [--out out/comparison]
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from hflsim.attacks import PoisonConfig
from hflsim.config import ExperimentConfig
from hflsim.datagen import GeneratorConfig
from hflsim.experiment import run_experiment
from hflsim.federation import FLConfig


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--rounds", type=int, default=20)
    parser.add_argument("--out", default="out/comparison")
    parser.add_argument("--distribution", choices=("iid", "dirichlet"), default="iid")
    args = parser.parse_args()

    rows = []
    for setting in ("cross_silo", "cross_device"):
        for mode in ("vanilla", "cbd", "fed_ebd"):
            cfg = ExperimentConfig(
                fl=FLConfig(
                    setting=setting,
                    rounds=args.rounds,
                    attack_mode=mode,
                    distribution=args.distribution,
                ),
                generator=GeneratorConfig(prototype_seed=None),
                poison=PoisonConfig(target_class=0, ratio=0.2),
                master_seed=args.seed,
                out_dir=str(Path(args.out) / f"{setting}_{mode}"),
            )
            started = time.perf_counter()
            rep = run_experiment(cfg)
            elapsed = time.perf_counter() - started
            rows.append((setting, mode, rep.final.mean_acc, rep.final.mean_asr, elapsed))
            print(f"done: {setting}/{mode} ({elapsed:.0f}s)")

    print(f"\n{'setting':<13} {'mode':<8} {'ACC':>7} {'ASR':>7} {'time':>6}")
    for setting, mode, acc, asr, elapsed in rows:
        print(f"{setting:<13} {mode:<8} {acc:7.3f} {asr:7.3f} {elapsed:5.0f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
