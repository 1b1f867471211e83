"""Command line: ``infinity run`` and ``infinity check``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from infinity.dataplane.report import SimReport
from infinity.scenarios.equivalence import check_equivalence
from infinity.scenarios.metrics import export_metrics
from infinity.scenarios.runner import MODES, Scenario, ScenarioError, run_scenario


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="infinity", description="Virtual switch fabric simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one scenario and export its report")
    r.add_argument("--topology", required=True)
    r.add_argument("--app", required=True)
    r.add_argument("--workload", required=True)
    r.add_argument("--policy")
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--horizon-us", type=int, required=True)
    r.add_argument("--mode", choices=MODES, default="normal")
    r.add_argument("--primitives", default=None, help="all, none, or a comma list")
    r.add_argument("--out", required=True)
    r.add_argument("--no-trace", action="store_true", help="skip writing trace.log")

    c = sub.add_parser("check", help="compare a run against an oracle run")
    c.add_argument("--report", required=True, help="output directory of the run")
    c.add_argument("--oracle", required=True, help="output directory of the oracle run")
    return parser


def _run(args) -> int:
    scenario = Scenario(
        app=args.app,
        topology=args.topology,
        workload=args.workload,
        policy=args.policy,
        seed=args.seed,
        horizon_us=args.horizon_us,
        mode=args.mode,
        primitives=args.primitives,
        trace=not args.no_trace,
    )
    report = run_scenario(scenario)
    files = export_metrics(report, args.out)
    if not args.no_trace:
        Path(args.out, "trace.log").write_text("".join(line + "\n" for line in report.trace))
    print(json.dumps(report.summary, sort_keys=True))
    print(f"wrote {', '.join(str(p) for p in files.values())}")
    return 0


def _load(path: str) -> SimReport:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    return SimReport.from_json(p.read_text())


def _check(args) -> int:
    result = check_equivalence(_load(args.report), _load(args.oracle))
    print(json.dumps(result.to_dict(), sort_keys=True, indent=2))
    return 0 if result.passed else 1


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            return _run(args)
        return _check(args)
    except (ScenarioError, OSError, ValueError, KeyError) as exc:
        print(f"infinity: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
