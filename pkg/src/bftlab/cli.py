"""Command line: query the design space, derive protocols, run experiments."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import MISSING, fields
from pathlib import Path

from . import design_space as ds
from .auth import CryptoCosts
from .engine import EngineConfig
from .harness import (ConfigError, ExperimentConfig, InvariantViolation, emit_report,
                      parse_config, run_experiment, sweep_points)
from .protocols import ProtocolError

OK, INVALID, VIOLATION, FAULT = 0, 1, 2, 3


def _defaults(cls) -> list[str]:
    out = []
    for f in fields(cls):
        default = f.default_factory() if f.default is MISSING else f.default
        out.append(f"  {f.name:<20} {default!r}")
    return out


def config_help() -> str:
    lines = ["config keys (JSON object, defaults shown):"]
    lines += _defaults(ExperimentConfig)
    lines += ["", "engine keys (under \"engine\"):"]
    lines += _defaults(EngineConfig)
    lines += ["", "crypto cost keys in us (under \"crypto\"):"]
    lines += _defaults(CryptoCosts)
    lines += ["", "fault directive keys: node, crash_at, silent_to_clients,",
              "  equivocate_as_leader, drop_incoming",
              "sweep: {\"f\": [1, 5]} or {\"engine.batch_size\": [200, 400]}"]
    return "\n".join(lines)


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "-"):
        return None
    return text


def _filters(items: list[str]) -> dict:
    q = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"filter {item!r} must look like key=value")
        key, value = item.split("=", 1)
        q[key.strip()] = _parse_value(value.strip())
    return q


def describe(d: ds.ProtocolDescriptor, status: str) -> str:
    row = d.row()
    name = d.name or "-"
    phases = row["phases"] or "-"
    slow = row["slow_phases"] or "-"
    return (f"{name:<12} {status:<10} {row['replicas']:<5} {row['topology']:<7} "
            f"{row['auth']:<14} {row['strategy']:<11} phases={phases} slow={slow} "
            f"vc={row['view_change']}")


def cmd_query(args) -> int:
    results = ds.query(_filters(args.filters))
    if args.named:
        results = [(d, s) for d, s in results if d.name]
    for d, status in results[: args.limit] if args.limit else results:
        print(describe(d, status))
    print(f"# {len(results)} point(s)")
    return OK


def cmd_derive(args) -> int:
    choices = [c for part in args.choices for c in part.split(",") if c]
    d = ds.get_template(args.start)
    print(describe(d, "start"))
    for i, c in enumerate(choices):
        d = ds.apply_choice(d, c, step=i)
        print(f"-> {ds.get_choice(c).id}")
        print(describe(d, "derived"))
    if args.full:
        print(ds.dumps(d), end="")
    return OK


def cmd_validate(args) -> int:
    d = ds.loads(Path(args.file).read_text())
    status, detail = ds.validate_point(d)
    print(f"{status}" + (f": {detail}" if detail else ""))
    return INVALID if status == "invalid" else OK


def _load_config(path: str, args) -> ExperimentConfig:
    text = sys.stdin.read() if path == "-" else Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not a JSON document: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.repeats is not None:
        doc["repeats"] = args.repeats
    if args.trace is not None:
        doc["trace"] = args.trace
    return parse_config(doc)


def cmd_run(args) -> int:
    cfg = _load_config(args.config, args)
    points = sweep_points(cfg)
    reports = [run_experiment(p) for p in points]
    out = reports[0] if len(reports) == 1 else reports
    text = emit_report(out, args.format)
    if args.output:
        Path(args.output).write_text(text + "\n")
    else:
        print(text)
    return OK


def cmd_report(args) -> int:
    merged = []
    for path in args.raw:
        doc = json.loads(Path(path).read_text())
        merged.extend(doc if isinstance(doc, list) else [doc])
    print(emit_report(merged[0] if len(merged) == 1 else merged, args.format))
    return OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bftlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("query", help="list design points matching dimension filters",
                       description="Filters are key=value pairs over: "
                                   + ", ".join(ds.QUERY_AXES) + ".")
    q.add_argument("filters", nargs="*", help="e.g. strategy=pessimistic topology=star")
    q.add_argument("--named", action="store_true", help="only named protocols")
    q.add_argument("--limit", type=int, default=0, help="print at most this many points")
    q.set_defaults(fn=cmd_query)

    d = sub.add_parser("derive", help="apply design choices to a named protocol")
    d.add_argument("start", help="starting protocol, e.g. PBFT")
    d.add_argument("choices", nargs="+", help="choice ids or names, e.g. DC1 DC3")
    d.add_argument("--full", action="store_true", help="print the resulting descriptor")
    d.set_defaults(fn=cmd_derive)

    v = sub.add_parser("validate", help="check a descriptor file (key = value lines)")
    v.add_argument("file")
    v.set_defaults(fn=cmd_validate)

    r = sub.add_parser("run", help="run an experiment config",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog=config_help())
    r.add_argument("config", help="JSON config file, or - for stdin")
    r.add_argument("--seed", type=int)
    r.add_argument("--repeats", type=int)
    r.add_argument("--trace", help="write the event trace to this file")
    r.add_argument("--format", choices=("structured", "human"), default="structured")
    r.add_argument("--output", "-o", help="write the report here instead of stdout")
    r.set_defaults(fn=cmd_run)

    rp = sub.add_parser("report", help="render saved structured reports")
    rp.add_argument("raw", nargs="+")
    rp.add_argument("--format", choices=("structured", "human"), default="human")
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        if e.trace_path:
            print(f"trace: {e.trace_path}", file=sys.stderr)
        return VIOLATION
    except (ConfigError, ProtocolError, ds.DesignSpaceError, KeyError, OSError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return INVALID
    except Exception as e:  # anything else is a bug or a simulator fault
        print(f"internal fault: {type(e).__name__}: {e}", file=sys.stderr)
        return FAULT


if __name__ == "__main__":
    sys.exit(main())
