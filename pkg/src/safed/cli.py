"""Command line: ``safed run|check|sweep|list``."""

from __future__ import annotations

import argparse
import sys
import tempfile
from pathlib import Path

import yaml

from . import harness


def _parse_grid(items: list) -> dict:
    grid = {}
    for item in items or []:
        if "=" not in item:
            raise SystemExit(f"--grid expects key=v1,v2..., got {item!r}")
        k, vals = item.split("=", 1)
        grid[k.strip()] = [yaml.safe_load(v) for v in vals.split(",") if v.strip()]
    return grid


def _print_checks(summary: dict) -> None:
    for c in summary.get("assertions", []):
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['metric']}  value={c.get('value')}")


def cmd_run(args, show_out: bool = True) -> int:
    out = Path(args.out) if args.out else None
    code, summary = harness.run_scenario(args.scenario, out, args.seed, args.jobs)
    if code == 2:
        print(summary["error"], file=sys.stderr)
        return 2
    _print_checks(summary)
    if show_out:
        print(f"artifacts: {out or harness.default_out(summary['scenario'])}")
    return code


def cmd_check(args) -> int:
    if args.out:
        return cmd_run(args)
    with tempfile.TemporaryDirectory() as tmp:
        args.out = tmp
        return cmd_run(args, show_out=False)


def cmd_sweep(args) -> int:
    out = Path(args.out) if args.out else None
    code, summary = harness.sweep(args.template, _parse_grid(args.grid), out, args.seed, args.jobs)
    if code == 2:
        print(summary["error"], file=sys.stderr)
        return 2
    print(f"{summary['points']} point(s), {summary['failed']} failed")
    return 0


def cmd_list(args) -> int:
    for name in harness.bundled_scenarios():
        print(name)
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="safed", description="SAFEd swarm attestation simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    for name, fn, hlp in (("run", cmd_run, "run a scenario and write artifacts"),
                          ("check", cmd_check, "run a scenario and exit non-zero on a failed assertion")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("scenario", help="scenario file or bundled scenario name")
        p.add_argument("--seed", type=int, help="override network.seed")
        p.add_argument("--out", help="output directory (default $SAFED_OUT/<name>)")
        p.add_argument("--jobs", type=int, help="parallel grid points")
        p.set_defaults(fn=fn)

    p = sub.add_parser("sweep", help="run a parameter grid over a scenario template")
    p.add_argument("template")
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="repeatable")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("list", help="list bundled scenarios")
    p.set_defaults(fn=cmd_list)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
