#!/usr/bin/env python3
"""
Routing Simulator CLI

    sim run             policies vs baselines over repeated streams
    sim sweep-lambda    accuracy/energy trade-off over a lambda grid
    sim ablate-features final regret per context feature configuration
    sim add-model       register a model mid-run and track adoption
    sim overhead        per-stage pre-inference wall clock

Every subcommand takes --config (JSON ExperimentConfig), --seed and --out.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd
from pydantic import ValidationError

from ml_engine.errors import RouterError
from ml_engine.experiments import (
    ExperimentConfig,
    measure_overhead,
    measure_scaling,
    run_comparison,
    run_comparison_reps,
    run_feature_ablation,
    run_lambda_sweep,
    run_model_addition,
)

logger = logging.getLogger("ml_engine.sim")


def _banner(title: str):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    updates = {"seed": args.seed}
    if getattr(args, "reps", None):
        updates["reps"] = args.reps
        updates["sweep_reps"] = args.reps
    if getattr(args, "horizon", None):
        updates["horizon"] = args.horizon
    if getattr(args, "jobs", None):
        updates["n_jobs"] = args.jobs
    return config.model_copy(update=updates)


def cmd_run(config: ExperimentConfig, out: Path):
    table, summary = run_comparison_reps(config)
    table.to_csv(out / "comparison_runs.csv", index=False)
    summary.to_csv(out / "comparison_summary.csv", index=False)
    for result in run_comparison(config):
        result.save(out)
    _banner(f"POLICIES VS BASELINES (lambda={config.lam}, T={config.horizon}, reps={config.reps})")
    cols = ["name", "mean_accuracy_mean", "total_energy_wh_mean", "cumulative_regret_mean",
            "cumulative_regret_ci95"]
    print(summary[cols].to_string(index=False))


def cmd_sweep(config: ExperimentConfig, out: Path):
    table, summary, front = run_lambda_sweep(config)
    table.to_csv(out / "lambda_sweep_runs.csv", index=False)
    summary.to_csv(out / "lambda_sweep_summary.csv", index=False)
    front.to_csv(out / "static_pareto_front.csv", index=False)
    _banner("LAMBDA SWEEP")
    cols = ["lambda", "policy", "mean_accuracy_mean", "total_energy_wh_mean",
            "cumulative_regret_mean", "cumulative_regret_ci95"]
    print(summary[cols].to_string(index=False))


def cmd_ablate(config: ExperimentConfig, out: Path):
    table, summary = run_feature_ablation(config)
    table.to_csv(out / "ablation_runs.csv", index=False)
    summary.to_csv(out / "ablation_summary.csv", index=False)
    _banner("FEATURE ABLATION (final cumulative regret)")
    print(summary.to_string(index=False))


def cmd_add_model(config: ExperimentConfig, out: Path):
    result, adoption = run_model_addition(config)
    result.save(out, prefix="model_addition")
    adoption.to_frame("selection_share").rename_axis("step").to_csv(out / "adoption.csv")
    _banner(f"MODEL ADDITION ({config.new_model_id} at step {config.add_at})")
    after = adoption.iloc[config.add_at:]
    print(f"  Mean share after addition: {after.mean():.3f}")
    print(f"  Final windowed share:      {adoption.iloc[-1]:.3f}")


def cmd_overhead(config: ExperimentConfig, out: Path):
    stages, relative = measure_overhead(config.overhead_queries, seed=config.seed)
    scaling = measure_scaling(seed=config.seed)
    stages.to_csv(out / "overhead_stages.csv", index=False)
    relative.to_csv(out / "overhead_relative.csv", index=False)
    scaling.to_csv(out / "overhead_scaling.csv", index=False)
    _banner("PRE-INFERENCE OVERHEAD (ms)")
    print(stages.to_string(index=False))
    print()
    print(relative.to_string(index=False))


COMMANDS = {
    "run": cmd_run,
    "sweep-lambda": cmd_sweep,
    "ablate-features": cmd_ablate,
    "add-model": cmd_add_model,
    "overhead": cmd_overhead,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sim", description="Context-aware routing simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with experiment settings")
        p.add_argument("--seed", type=int, default=0, help="Base random seed")
        p.add_argument("--out", default="results", help="Output directory")
        p.add_argument("--horizon", type=int, help="Override stream length")
        p.add_argument("--jobs", type=int, help="Parallel repetitions (joblib n_jobs)")
        if name in ("run", "sweep-lambda", "ablate-features"):
            p.add_argument("--reps", type=int, help="Override repetitions")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        logger.error(f"Could not load config: {e}")
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as f:
        json.dump(config.model_dump(), f, indent=2)
    try:
        COMMANDS[args.command](config, out)
    except RouterError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return 1
    print(f"\n✅ Results written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
