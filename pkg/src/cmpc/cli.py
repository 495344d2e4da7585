"""Command-line front end: run, check and summarize simulations.

Exit codes: 0 on success, 1 on validation failure, 2 on runtime abort.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .simulate import (
    Scenario,
    SimulationAborted,
    export,
    load_run_log,
    metrics,
    run_closed_loop,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _load_scenario(path: str) -> Scenario | None:
    try:
        return Scenario.from_json_file(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: cannot load scenario {path}: {exc}", file=sys.stderr)
        return None


def _cmd_run(args: argparse.Namespace) -> int:
    scenario = _load_scenario(args.scenario)
    if scenario is None:
        return EXIT_VALIDATION
    problems = scenario.validate()
    if problems:
        for p in problems:
            print(f"invalid scenario: {p}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        log = run_closed_loop(scenario)
    except SimulationAborted as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        if exc.partial_log is not None:
            written = export(exc.partial_log, args.out, fmt="json")
            print(f"partial log written to {written[0]}", file=sys.stderr)
        return EXIT_RUNTIME
    written = export(log, args.out, fmt=args.format)
    if args.plots:
        from .plots import plot_run

        written += plot_run(log, args.out)
    for path in written:
        print(path)
    return EXIT_OK


def _cmd_check(args: argparse.Namespace) -> int:
    scenario = _load_scenario(args.scenario)
    if scenario is None:
        return EXIT_VALIDATION
    problems = scenario.validate()
    if problems:
        for p in problems:
            print(f"invalid: {p}")
        return EXIT_VALIDATION
    print("scenario valid")
    engine = scenario.build_engine()
    nominal = engine.zero_input_rollout(scenario.start_states())
    margins = engine.feasibility_margins(nominal)
    holding = sum(1 for m in margins if m.holds)
    print(f"feasibility margins along the zero-input rollout: "
          f"{holding}/{len(margins)} rows satisfy u_min >= f_max")
    worst = sorted(margins, key=lambda m: m.u_min - m.f_max)[:5]
    for m in worst:
        print(f"  agent {m.agent} {m.kind} {m.target} step {m.step}: "
              f"u_min={m.u_min:.4g} u_max={m.u_max:.4g} f_max={m.f_max:.4g} "
              f"{'OK' if m.holds else 'GAP'}")
    return EXIT_OK


def _cmd_metrics(args: argparse.Namespace) -> int:
    try:
        log = load_run_log(args.log)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: cannot load run log {args.log}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        report = metrics(log, epsilon=args.epsilon)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(json.dumps(report, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmpc",
        description="Safe output-consensus MPC simulator for multi-agent systems.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scenario and export the log")
    run.add_argument("--scenario", required=True, help="scenario JSON file")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--plots", action="store_true", help="also write SVG figures")
    run.set_defaults(func=_cmd_run)

    check = sub.add_parser("check", help="validate a scenario and print margins")
    check.add_argument("--scenario", required=True, help="scenario JSON file")
    check.set_defaults(func=_cmd_check)

    met = sub.add_parser("metrics", help="summarize an exported JSON run log")
    met.add_argument("--log", required=True, help="run_log.json produced by run")
    met.add_argument("--epsilon", type=float, required=True,
                     help="consensus threshold on output differences")
    met.set_defaults(func=_cmd_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
