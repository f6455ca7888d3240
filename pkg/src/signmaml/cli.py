"""Command-line entry point.

Subcommands: train, eval, grid-search, sweep, verify. Every experiment is
a JSON config file plus optional ``--set key=value`` overrides mirroring
the ExperimentConfig fields.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import kernels
from .harness import ExperimentConfig, evaluate, grid_search_beta, sweep, train
from .oracle import checks_from_report, run_verification, write_report
from .taskio import load_params


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        overrides[key] = value
    if args.out:
        overrides["out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(overrides)


def _add_config_args(parser):
    parser.add_argument("--config", help="JSON config file (defaults apply otherwise)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    parser.add_argument("--out", help="output directory override")
    parser.add_argument("--seed", type=int, help="seed override")


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    result = train(cfg)
    print(f"[{kernels.BACKEND}] trained {cfg.method} for {cfg.meta_iters} meta-iterations")
    if result.records:
        print(f"final train query loss: {result.records[-1].query_loss:.6f}")
    if result.evaluation is not None:
        ev = result.evaluation
        print(f"test {ev.metric}: {ev.mean:.4f} +/- {ev.ci95:.4f} over {len(ev.scores)} tasks")
    print(f"outputs in {cfg.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    params = load_params(args.checkpoint)
    ev = evaluate(params, cfg)
    print(f"test {ev.metric}: {ev.mean:.4f} +/- {ev.ci95:.4f} over {len(ev.scores)} tasks")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "eval_tasks.csv")
        with open(path, "w") as fh:
            fh.write("task_index,score\n")
            for i, s in enumerate(ev.scores):
                fh.write(f"{i},{s!r}\n")
        print(f"per-task scores in {path}")
    return 0


def _cmd_grid_search(args) -> int:
    cfg = _load_config(args)
    candidates = [float(b) for b in args.betas.split(",")]
    result = grid_search_beta(cfg, candidates)
    for beta, score in result.rows:
        print(f"beta={beta:g} score={score:.4f}")
    print(f"chosen beta: {result.best_beta:g} (extensions: {result.extensions})")
    if result.warning:
        print("warning: extension cap reached, returning best seen so far")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "grid_search.json"), "w") as fh:
            json.dump(
                {
                    "best_beta": result.best_beta,
                    "rows": result.rows,
                    "extensions": result.extensions,
                    "warning": result.warning,
                },
                fh,
                indent=2,
            )
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values = [v for v in args.values.split(",") if v]
    values = [int(v) for v in values]
    rows = sweep(cfg, args.axis, values)
    for row in rows:
        if "error" in row:
            print(f"{args.axis}={row['value']} {row['method']}: FAILED ({row['error']})")
        else:
            print(
                f"{args.axis}={row['value']} {row['method']}: "
                f"score={row['accuracy']} time={row['time_mean_s']}s"
            )
    print(f"sweep table in {os.path.join(cfg.out_dir, 'sweep.csv')}")
    return 0


def _cmd_verify(args) -> int:
    counts = {}
    if args.quick:
        counts = dict(collapse_tasks=100, equiv_instances=50, fd_instances=10, quad_instances=10)
    results = run_verification(seed=args.seed or 0, **counts)
    path = args.out or "verify_report.txt"
    write_report(results, path)
    failed = 0
    for name, measured, threshold, passed in checks_from_report(results):
        status = "PASS" if passed else "FAIL"
        print(f"{status} {name}: {measured:.3e} (threshold {threshold:.0e})")
        failed += 0 if passed else 1
    print(f"report written to {path}")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="signmaml",
        description="Meta-learning experiments: MAML, FO-MAML and Sign-MAML on synthetic few-shot tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train and evaluate per a config")
    _add_config_args(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint.bin from a training run")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("grid-search", help="lower-level learning-rate search with boundary extension")
    _add_config_args(p)
    p.add_argument("--betas", required=True, help="comma-separated ascending candidate rates")
    p.set_defaults(fn=_cmd_grid_search)

    p = sub.add_parser("sweep", help="train+evaluate over an axis of way/shot/steps values")
    _add_config_args(p)
    p.add_argument("--axis", required=True, choices=("way", "shot", "steps"))
    p.add_argument("--values", required=True, help="comma-separated integer values")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("verify", help="run the oracle suite and write its report")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report path (default verify_report.txt)")
    p.add_argument("--quick", action="store_true", help="reduced instance counts")
    p.set_defaults(fn=_cmd_verify)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
