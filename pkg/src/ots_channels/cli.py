"""Command line front end.

Exit codes: 0 all assertions pass, 1 assertion or invariant failure, 2 usage
error (argparse default).
"""

from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

from .analysis import (
    COOPERATE,
    DEFECT,
    ExitPayoffs,
    capacity,
    is_prisoners_dilemma,
    nash_equilibria,
    payoff_matrix,
)
from .harness import Scenario, ScenarioError, run
from .txgraph import exit_path_weight_report


def _cmd_run(args) -> int:
    try:
        scenario = Scenario.load(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        scenario.seed = args.seed
    if args.privacy_level is not None:
        scenario.channel["privacy_level"] = args.privacy_level
        if args.privacy_level >= 2:
            scenario.channel["towers"] = True
    report = run(scenario)
    if args.log:
        Path(args.log).write_text(
            "\n".join(json.dumps(e, separators=(",", ":"), sort_keys=True)
                      for e in report.events) + "\n"
        )
    if args.json:
        print(report.to_json(include_events=False))
    else:
        print(f"scenario {report.name} (seed {report.seed}): "
              f"{report.ticks_run} ticks, height {len(report.txids)} txs")
        for name, amount in sorted(report.final_balances.items()):
            print(f"  {name:>6}: {amount}")
        for result in report.assertion_results:
            mark = "ok" if result["passed"] else "FAIL"
            print(f"  [{mark}] {result['kind']} {result.get('actor', '')} "
                  f"-> {result['actual']}")
        for violation in report.violations:
            print(f"  [VIOLATION] {violation}")
    return 0 if report.ok else 1


def _cmd_payoff(args) -> int:
    costs = ExitPayoffs(Fraction(args.p), Fraction(args.u), Fraction(args.c))
    matrix = payoff_matrix(costs)
    dilemma = is_prisoners_dilemma(costs)
    if args.json:
        print(json.dumps({
            "p": str(costs.p), "u": str(costs.u), "c": str(costs.c),
            "matrix": {f"{a}/{b}": [str(x), str(y)]
                       for (a, b), (x, y) in matrix.items()},
            "prisoners_dilemma": dilemma,
            "equilibria": [list(e) for e in nash_equilibria(matrix)],
        }, sort_keys=True))
        return 0
    print(f"exit game for p={args.p} u={args.u} c={args.c}")
    header = f"{'':>12} | {'bob ' + COOPERATE:>24} | {'bob ' + DEFECT:>24}"
    print(header)
    print("-" * len(header))
    for a in (COOPERATE, DEFECT):
        cells = []
        for b in (COOPERATE, DEFECT):
            x, y = matrix[(a, b)]
            cells.append(f"({x}, {y})")
        print(f"{('alice ' + a):>12} | {cells[0]:>24} | {cells[1]:>24}")
    print(f"prisoner's dilemma: {dilemma}")
    print(f"pure equilibria: {nash_equilibria(matrix)}")
    return 0


def _cmd_capacity(args) -> int:
    result = capacity(args.bits, args.rate)
    if args.json:
        print(json.dumps({
            "value_bits": args.bits, "rate": args.rate,
            "max_updates": result.max_updates,
            "days": result.days, "years": result.years,
        }, sort_keys=True))
        return 0
    print(f"{args.bits}-bit sequence space at {args.rate} updates/s:")
    print(f"  max updates: {result.max_updates}")
    print(f"  days:        {result.days:.1f}")
    print(f"  years:       {result.years:.1f}")
    return 0


def _cmd_weights(args) -> int:
    report = exit_path_weight_report()
    if args.json:
        print(json.dumps({"per_tx": report.per_tx, "total": report.total},
                         sort_keys=True))
        return 0
    print("unilateral exit path, virtual weight units:")
    for name, weight in report.per_tx.items():
        print(f"  {name:<16} {weight:>5} wu")
        for part, value in report.components[name]:
            print(f"      {part:<36} {value:>5} wu")
    print(f"  {'total':<16} {report.total:>5} wu")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ots-channels",
        description="payment channel protocol engine and adversarial simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario file")
    p_run.add_argument("scenario", help="path or bundled scenario name")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--privacy-level", type=int, choices=(1, 2, 3), default=None)
    p_run.add_argument("--log", help="write the event log to this path")
    p_run.add_argument("--json", action="store_true")
    p_run.set_defaults(func=_cmd_run)

    p_payoff = sub.add_parser("payoff", help="exit-game payoff matrix")
    p_payoff.add_argument("--p", type=int, required=True,
                          help="opportunity cost of the exit delay")
    p_payoff.add_argument("--u", type=int, required=True,
                          help="unilateral exit path fees")
    p_payoff.add_argument("--c", type=int, required=True,
                          help="cooperative close fee")
    p_payoff.add_argument("--json", action="store_true")
    p_payoff.set_defaults(func=_cmd_payoff)

    p_capacity = sub.add_parser("capacity", help="sequence space lifetime")
    p_capacity.add_argument("--bits", type=int, default=32)
    p_capacity.add_argument("--rate", type=float, default=10.0)
    p_capacity.add_argument("--json", action="store_true")
    p_capacity.set_defaults(func=_cmd_capacity)

    p_weights = sub.add_parser("weights", help="exit path weight estimate")
    p_weights.add_argument("--json", action="store_true")
    p_weights.set_defaults(func=_cmd_weights)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
