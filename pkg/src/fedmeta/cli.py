"""Command-line entry point: ``fedmeta run|validate|gen-data|report``.

Exit codes: 0 success, 2 config error, 3 data error, 4 protocol error,
5 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .datasets import TASK_KINDS, gen_synthetic_task, write_idx_like
from .errors import ConfigError, DataError, FedMetaError, exit_code_for
from .experiment import format_table, run_experiment
from .metrics import read_metrics_csv

CATEGORIES = {2: "config", 3: "data", 4: "protocol", 5: "internal"}

GEN_DEFAULTS = {"n": 2000, "hw": 16, "positive_rate": 0.3, "noise_sigma": 0.3,
                "amplitude": 0.5, "seed": 0}


def _overrides(args) -> dict:
    return {
        "seed": args.seed,
        "output_dir": args.output_dir,
        "threads": args.threads,
        "transport": args.transport,
    }


def cmd_run(args) -> int:
    cfg = load_config(args.config).override(**_overrides(args))
    result = run_experiment(cfg)
    print(format_table(result.reports))
    print(f"\nartifacts written to {result.output_dir} ({result.elapsed:.1f}s)")
    return 0


def cmd_validate(args) -> int:
    cfg = load_config(args.config).override(**_overrides(args))
    print(f"{args.config}: ok ({len(cfg.tasks)} tasks: {', '.join(t.name for t in cfg.tasks)})")
    return 0


def parse_task_spec(spec: str) -> tuple[str, dict]:
    """``blob:n=500,hw=16,noise_sigma=0.2`` -> ("blob", {...})."""
    kind, _, rest = spec.partition(":")
    if kind not in TASK_KINDS:
        raise ConfigError(f"task spec {spec!r}: kind must be one of {TASK_KINDS}")
    opts = dict(GEN_DEFAULTS)
    for item in filter(None, rest.split(",")):
        key, sep, value = item.partition("=")
        if not sep or key not in GEN_DEFAULTS:
            raise ConfigError(f"task spec {spec!r}: bad option {item!r}")
        try:
            opts[key] = type(GEN_DEFAULTS[key])(value)
        except ValueError:
            raise ConfigError(f"task spec {spec!r}: {key}={value!r} is not a number") from None
    return kind, opts


def cmd_gen_data(args) -> int:
    kind, opts = parse_task_spec(args.task_spec)
    if args.seed is not None:
        opts["seed"] = args.seed
    try:
        data = gen_synthetic_task(kind, opts["n"], opts["hw"], opts["positive_rate"],
                                  opts["noise_sigma"], opts["seed"], amplitude=opts["amplitude"])
    except FedMetaError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_idx_like(data, out.with_suffix(".imgs"), out.with_suffix(".lbls"))
    print(f"wrote {len(data)} samples ({int(data.labels.sum())} positive) to "
          f"{out.with_suffix('.imgs')} and {out.with_suffix('.lbls')}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        reports = read_metrics_csv(run_dir / "metrics.csv")
    except OSError as exc:
        raise DataError(f"cannot read metrics: {exc}") from exc
    print(format_table(reports))
    cmp_path = run_dir / "comparison.json"
    if cmp_path.exists():
        print()
        for task, c in json.loads(cmp_path.read_text()).items():
            verdict = "significant" if c["significant"] else "not significant"
            print(f"{task}: AUROC FL {c['auroc_fl']:.4f} vs baseline {c['auroc_baseline']:.4f}, "
                  f"p = {c['p_value']:.4g} ({verdict})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--output-dir", help="override the config output_dir")
    common.add_argument("--threads", type=int, help="worker threads for baselines and nodes")
    common.add_argument("--transport", choices=("in-process", "stream"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fedmeta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run an experiment config")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("validate", parents=[common], help="schema-check a config")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("gen-data", parents=[common],
                       help="write a synthetic task as <out>.imgs / <out>.lbls")
    p.add_argument("task_spec", help="e.g. blob:n=2000,hw=16,positive_rate=0.3,noise_sigma=0.3")
    p.add_argument("out", help="output path stem")
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("report", parents=[common], help="print the summary of a finished run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error[config]: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except Exception as exc:  # every failure maps to a category-coded exit status
        code = exit_code_for(exc)
        print(f"error[{CATEGORIES[code]}]: {exc}", file=sys.stderr)
        if code == 5:
            logging.getLogger(__name__).debug("internal error", exc_info=True)
        return code

