#!/usr/bin/env python3
"""Run the two-task reference experiment and print the comparison per task.

    python scripts/run_reference.py [--config configs/reference.cfg] [--output-dir DIR] [--threads N]
"""

import argparse
import sys
from pathlib import Path

from fedmeta.config import load_config
from fedmeta.experiment import format_table, run_experiment
from fedmeta.stats import bootstrap_se_p_value

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "reference.cfg"))
    ap.add_argument("--output-dir")
    ap.add_argument("--threads", type=int)
    args = ap.parse_args()

    cfg = load_config(args.config).override(output_dir=args.output_dir, threads=args.threads)
    result = run_experiment(cfg)
    print(format_table(result.reports))
    print()
    all_close = True
    for task, cmp in result.comparisons.items():
        gap = abs(cmp.auroc_a - cmp.auroc_b)
        close = gap <= 0.05 and cmp.p_value > 0.05
        all_close &= close
        print(f"{task:<8} FL {cmp.auroc_a:.4f}  baseline {cmp.auroc_b:.4f}  |diff| {gap:.4f}  "
              f"t {cmp.t_statistic:8.2f}  p {cmp.p_value:.4g}  (sd(d) as SE: p {bootstrap_se_p_value(cmp):.4g})")
    print(f"\n{result.elapsed:.1f}s; artifacts in {result.output_dir}")
    print("FL matches baselines on every task" if all_close else "FL differs from a baseline on some task")
    return 0 if all_close else 1


if __name__ == "__main__":
    sys.exit(main())
