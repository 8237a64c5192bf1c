"""Command-line front end: run scenarios, compare reports, re-render them.

Exit codes: 0 success, 1 runtime failure, 2 configuration or parse error,
3 final routing decisions diverge under ``compare``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from agentfabric.errors import ConfigError, FabricError
from agentfabric.scenario import (
    REPORT_FIELDS,
    ScenarioConfig,
    ScenarioReport,
    bundled_scenario_path,
    parse_features,
    run_scenario,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _resolve_scenario(path_str: str) -> Path:
    path = Path(path_str)
    if path.is_file():
        return path
    bundled = bundled_scenario_path(path_str)
    if bundled.is_file():
        return bundled
    raise ConfigError(f"scenario not found: {path_str}")


def _load_report(path_str: str) -> ScenarioReport:
    try:
        text = Path(path_str).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read report {path_str}: {exc}") from exc
    return ScenarioReport.from_json(text)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = ScenarioConfig.from_file(_resolve_scenario(args.scenario))
        if args.features is not None:
            config = dataclasses.replace(config, features=parse_features(args.features))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run_scenario(config, seed=args.seed)
        rendered = report.render(args.format)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FabricError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.out:
        Path(args.out).write_text(rendered)
    else:
        sys.stdout.write(rendered)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    try:
        a = _load_report(args.report_a)
        b = _load_report(args.report_b)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = []
    for name in REPORT_FIELDS:
        if name == "final_routing_decision":
            continue
        va, vb = getattr(a, name), getattr(b, name)
        delta = vb - va
        pct = f"{delta / va * 100.0:+.1f}%" if va else "n/a"
        rows.append((name, va, vb, delta, pct))
    width = max(len(r[0]) for r in rows)
    print(f"{'metric'.ljust(width)}  {'a':>12}  {'b':>12}  {'delta':>12}  {'pct':>8}")
    for name, va, vb, delta, pct in rows:
        print(f"{name.ljust(width)}  {va:>12}  {vb:>12}  {delta:>12}  {pct:>8}")
    if a.final_routing_decision == b.final_routing_decision:
        print("final_routing_decision: identical")
        return EXIT_OK
    print("final_routing_decision: DIVERGED")
    print("  a:", json.dumps(a.final_routing_decision, sort_keys=True))
    print("  b:", json.dumps(b.final_routing_decision, sort_keys=True))
    return EXIT_DIVERGED


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        report = _load_report(args.report)
        rendered = report.render(args.format)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sys.stdout.write(rendered)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agentfabric",
        description="Simulated agent-centric data fabric over a scripted "
        "multi-agent logistics scenario.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario and write its report")
    run_p.add_argument("--scenario", required=True,
                       help="scenario JSON path (or the name of a bundled one)")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the scenario's seed")
    run_p.add_argument("--features", default=None,
                       help="all | none | comma-separated flags")
    run_p.add_argument("--out", default=None, help="write the report here")
    run_p.add_argument("--format", choices=("json", "table", "csv"),
                       default="json")
    run_p.set_defaults(fn=cmd_run)

    cmp_p = sub.add_parser("compare", help="diff two report files")
    cmp_p.add_argument("report_a")
    cmp_p.add_argument("report_b")
    cmp_p.set_defaults(fn=cmd_compare)

    replay_p = sub.add_parser("replay", help="re-render a saved report")
    replay_p.add_argument("report")
    replay_p.add_argument("--format", choices=("json", "table", "csv"),
                          default="table")
    replay_p.set_defaults(fn=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
