"""Experiment runner front end: run, compare, and sweep subcommands.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, load_config, write_config
from .engine import run_experiment
from .errors import ConfigurationError
from .reporting import (
    accuracy_curve,
    compare_runs,
    fmt,
    load_rounds_csv,
    recovery_ari,
    write_run_outputs,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# Sweepable keys: (section attribute on ExperimentConfig, field name).
SWEEPABLE = {
    "max_tree_depth": ("clustering", "max_tree_depth", int),
    "epsilon": ("clustering", "epsilon", float),
    "clustering_start_frac": ("clustering", "clustering_start_frac", float),
    "window_start_frac": ("clustering", "window_start_frac", float),
    "arity": ("clustering", "arity", int),
    "sigma": ("ldp", "noise_scale", float),
    "corrupted_fraction": ("faults", "corrupted_fraction", float),
    "affinity_loss_rate": ("faults", "affinity_loss_rate", float),
}


def _apply_sweep_value(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    section_name, field_name, _ = SWEEPABLE[param]
    section = getattr(cfg, section_name)
    section = replace(section, **{field_name: value})
    if param == "sigma":
        section = replace(section, enabled=value > 0)
    return replace(cfg, **{section_name: section})


def cmd_run(config_path: str, out: str | None, seed: int | None) -> int:
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = cfg.with_seed(seed)
        if out is not None:
            cfg = replace(cfg, output_dir=out)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(cfg.output_dir)
    try:
        result = run_experiment(cfg)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_config(cfg, out_dir / "config.ini")
        write_run_outputs(result, out_dir)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure: report, do not traceback
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"run complete: {out_dir}")
    return EXIT_OK


def cmd_compare(dir_a: str, dir_b: str, target: float) -> int:
    try:
        report = compare_runs(dir_a, dir_b, target)
    except FileNotFoundError as exc:
        print(f"compare failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    sys.stdout.write(report.render())
    if report.time_a is None or report.time_b is None:
        print("note: target not reached by at least one run", file=sys.stdout)
    return EXIT_OK


def cmd_sweep(config_path: str, param: str, values: str, out: str | None) -> int:
    if param not in SWEEPABLE:
        print(
            f"config error: unknown sweep parameter {param!r}; "
            f"choose from {sorted(SWEEPABLE)}",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    raw = [v.strip() for v in values.split(",") if v.strip() != ""]
    if not raw:
        print("config error: empty sweep value list", file=sys.stderr)
        return EXIT_CONFIG
    caster = SWEEPABLE[param][2]
    try:
        parsed = [caster(v) for v in raw]
    except ValueError as exc:
        print(f"config error: bad sweep value: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        base = load_config(config_path)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sweep_root = Path(out) if out is not None else Path(base.output_dir) / f"sweep_{param}"
    sweep_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in parsed:
        cfg = _apply_sweep_value(base, param, value)
        run_dir = sweep_root / f"{param}={value}"
        cfg = replace(cfg, output_dir=str(run_dir))
        try:
            result = run_experiment(cfg)
            run_dir.mkdir(parents=True, exist_ok=True)
            write_config(cfg, run_dir / "config.ini")
            write_run_outputs(result, run_dir)
        except ConfigurationError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except Exception as exc:
            print(f"sweep run {param}={value} failed: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        curve = accuracy_curve(load_rounds_csv(run_dir / "rounds.csv"))
        best = max((a for _, a in curve), default=float("nan"))
        ari = recovery_ari(result)
        rows.append(
            {
                "value": value,
                "final_accuracy": fmt(result.mean_final_accuracy()),
                "best_accuracy": fmt(best),
                "partitions": sum(1 for e in result.events if e.kind == "partition"),
                "recovery_ari": fmt(ari) if ari is not None else "",
                "blacklisted": len(result.blacklist.members),
            }
        )
    with open(sweep_root / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=[
                "value", "final_accuracy", "best_accuracy",
                "partitions", "recovery_ari", "blacklisted",
            ],
            lineterminator="\n",
        )
        writer.writeheader()
        writer.writerows(rows)
    print(f"sweep complete: {sweep_root}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cohortsim",
        description="Clustered federated-learning simulation runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory override")
    p_run.add_argument("--seed", type=int, default=None, help="master seed override")

    p_cmp = sub.add_parser("compare", help="compare two finished runs")
    p_cmp.add_argument("run_a")
    p_cmp.add_argument("run_b")
    p_cmp.add_argument("--target", type=float, required=True)

    p_sweep = sub.add_parser("sweep", help="run one experiment per parameter value")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.out, args.seed)
    if args.command == "compare":
        return cmd_compare(args.run_a, args.run_b, args.target)
    return cmd_sweep(args.config, args.param, args.values, args.out)


if __name__ == "__main__":
    sys.exit(main())
