"""Command line entry point: ``lerc20 run`` and ``lerc20 gas-report``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Dict, Optional, Sequence

from .gas import FOUR_HOURS_S, overhead_report, params_with_overrides
from .scenario import ScenarioDomainError, SchemaError, load_scenario, run_scenario

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_DOMAIN = 3


def write_atomically(out_dir: Path, files: Dict[str, str]) -> None:
    """Write every file to a temp name first, then rename into place."""
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.", suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            staged.append((tmp, out_dir / name))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, dest in staged:
        os.replace(tmp, dest)


def cmd_run(args) -> int:
    try:
        data = load_scenario(args.scenario)
        result = run_scenario(data)
    except OSError as exc:
        print(f"error: cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ScenarioDomainError as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    write_atomically(Path(args.out), result.outputs)
    return EXIT_OK


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise ValueError("config must be a JSON object")
    allowed = {"gas_limit", "block_time_s", "session_seconds", "resolution_s", "gas_table"}
    unknown = set(config) - allowed
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return config


def cmd_gas_report(args) -> int:
    try:
        config = _load_config(args.config)

        def pick(name):
            flag = getattr(args, name)
            return flag if flag is not None else config.get(name)

        params = params_with_overrides(
            block_gas_limit=pick("gas_limit"),
            block_time_s=pick("block_time_s"),
            gas_table=config.get("gas_table"),
        )
        session_seconds = pick("session_seconds")
        report = overhead_report(
            params,
            session_seconds=FOUR_HOURS_S if session_seconds is None else session_seconds,
            resolution_s=pick("resolution_s"),
        )
    except (OSError, ValueError, KeyError) as exc:
        print(f"invalid gas-report parameters: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    out = Path(args.out)
    text = report.to_json() if out.suffix == ".json" else report.to_csv()
    write_atomically(out.parent if str(out.parent) else Path("."), {out.name: text})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lerc20", description="Lockable ERC20 energy-market simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a market session scenario")
    run.add_argument("scenario")
    run.add_argument("--out", required=True, help="output directory")
    run.set_defaults(func=cmd_run)

    gas = sub.add_parser("gas-report", help="write the order throughput report")
    gas.add_argument("--out", required=True, help="output file (.json for JSON, CSV otherwise)")
    gas.add_argument("--gas-limit", type=int)
    gas.add_argument("--block-time-s", type=int)
    gas.add_argument("--session-seconds", type=int)
    gas.add_argument("--resolution-s", type=int)
    gas.add_argument("--config", help="JSON file with defaults; flags win")
    gas.set_defaults(func=cmd_gas_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
