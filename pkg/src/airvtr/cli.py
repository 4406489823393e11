"""Command-line interface.

    airvtr run SCENARIO [--out DIR] [--format csv|jsonl]
    airvtr sweep SCENARIO --param NAME --values V1,V2,... [--out DIR]
    airvtr dump-graph GRAPH_FILE

Exit codes: 0 success, 2 safety abort, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .graph import GraphError, dump_text, load_graph
from .runner import EXIT_CONFIG, EXIT_OK, EXIT_SAFETY, run_scenario, sweep
from .scenario import SWEEP_PARAMETERS, ConfigError, load_scenario


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="airvtr", description="Aerial visual teach-and-return simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="fly one scenario and write metrics")
    r.add_argument("scenario", type=Path)
    r.add_argument("--out", type=Path, help="output directory (default: scenario output.directory)")
    r.add_argument("--format", choices=("csv", "jsonl"), help="raw metrics format")

    s = sub.add_parser("sweep", help="run a scenario once per parameter value")
    s.add_argument("scenario", type=Path)
    s.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMETERS))
    s.add_argument("--values", required=True, help="comma-separated numbers")
    s.add_argument("--out", type=Path)
    s.add_argument("--format", choices=("csv", "jsonl"))

    d = sub.add_parser("dump-graph", help="print a saved pose graph as text")
    d.add_argument("graph", type=Path)
    return p


def _load(args):
    sc = load_scenario(args.scenario)
    if getattr(args, "format", None):
        sc = replace(sc, output=replace(sc.output, format=args.format))
    out = args.out if args.out is not None else Path(sc.output.directory)
    return sc, out


def _parse_values(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values list {text!r}") from exc
    if not vals:
        raise ConfigError("--values is empty")
    return vals


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "dump-graph":
            try:
                g = load_graph(args.graph)
            except (OSError, GraphError) as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            sys.stdout.write(dump_text(g))
            return EXIT_OK

        sc, out = _load(args)
        if args.command == "run":
            res = run_scenario(sc, out)
            print(json.dumps(res.summary, indent=2, sort_keys=True))
            return res.exit_code

        values = _parse_values(args.values)
        results = sweep(sc, args.param, values, out)
        print((out / "sweep_summary.txt").read_text(), end="")
        return EXIT_SAFETY if any(r.exit_code == EXIT_SAFETY for r in results) else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
