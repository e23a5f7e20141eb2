"""Command-line interface.

Subcommands: train (one run), sweep (preference grid), pareto (aggregate
finished runs into a front + hypervolume), eval (evaluate a saved policy
snapshot). Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .envs import evaluate_policy, make_env
from .metrics import ParetoSet
from .policies import load_snapshot
from .runner import ConfigError, NumericalAbort, run_sweep, run_training


def _load_config(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    if args.mode is not None:
        config["mode"] = args.mode
    record = run_training(config, seed=args.seed, out_dir=args.out)
    print(json.dumps({"run_id": record.run_id, "status": record.status,
                      "final_return": record.final_return,
                      "deterministic_return": record.deterministic_return,
                      "wall_clock": round(record.wall_clock, 3),
                      "out": args.out}))
    return 0


def _cmd_sweep(args) -> int:
    config = _load_config(args.config)
    pareto, summaries = run_sweep(config, args.out, parallel=args.parallel)
    failed = sum(1 for s in summaries if s.get("status") != "ok")
    print(json.dumps({"runs": len(summaries), "failed": failed,
                      "front_size": len(pareto.front()),
                      "hypervolume": pareto.hypervolume() if pareto.reference else None,
                      "out": args.out}))
    return 0


def _parse_reference(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"reference must be comma-separated numbers, got {text!r}") from exc


def _cmd_pareto(args) -> int:
    reference = _parse_reference(args.reference)
    pareto = ParetoSet(reference=reference)
    found = 0
    for root, _, files in sorted(os.walk(args.runs)):
        if "summary.json" not in files:
            continue
        with open(os.path.join(root, "summary.json")) as f:
            summary = json.load(f)
        ret = summary.get("deterministic_return")
        if summary.get("run_id") and ret is not None:
            pareto.add(summary["run_id"], ret)
            found += 1
    if found == 0:
        raise ConfigError(f"no finished run summaries found under {args.runs}")
    pareto.write_csv(os.path.join(args.runs, "pareto.csv"))
    summary = pareto.write_summary(os.path.join(args.runs, "summary.json"),
                                   extra={"runs": found})
    print(json.dumps(summary))
    return 0


def _cmd_eval(args) -> int:
    policy, meta = load_snapshot(args.snapshot)
    env_config = None
    if args.env is not None:
        env_config = _load_config(args.env)
    elif isinstance(meta.get("env"), dict):
        env_config = meta["env"]
    if env_config is None:
        raise ConfigError("snapshot has no embedded env config; pass --env PATH")
    env = make_env(env_config)
    rng = np.random.default_rng(args.seed)
    und, disc = evaluate_policy(env, policy, args.episodes, rng=rng,
                                deterministic=args.deterministic)
    print(json.dumps({"episodes": args.episodes, "return": und.tolist(),
                      "disc_return": disc.tolist()}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mompo",
        description="Multi-objective policy optimization: training, sweeps, Pareto analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=["mo_mpo", "scalarized", "mo_vmpo"], default=None,
                   help="override the config's algorithm mode")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="run a preference sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--parallel", type=int, default=1, help="worker processes")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("pareto", help="aggregate run summaries into a Pareto front")
    p.add_argument("--runs", required=True, help="directory containing run outputs")
    p.add_argument("--reference", required=True, help='reference point, e.g. "0,-200"')
    p.set_defaults(func=_cmd_pareto)

    p = sub.add_parser("eval", help="evaluate a saved policy snapshot")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--env", default=None, help="env config JSON (defaults to snapshot metadata)")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
