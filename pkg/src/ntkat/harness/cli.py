"""Command-line entry point: ``ntkat <subcommand> --config C [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 bad invocation or config (missing file, invalid
JSON, schema violation, subcommand/config mismatch), 1 runtime failure.
Errors are reported as one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from .config import EXPERIMENTS, load_config
from .experiments import RUNNERS

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntkat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
        p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


class _Usage(Exception):
    pass


def _error(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def _thread_limit():
    n = os.environ.get("ADVNTK_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        limit = int(n)
        if limit < 1:
            raise ValueError
    except ValueError:
        raise _Usage(f"ADVNTK_THREADS must be a positive integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        return _error("usage", "--seed must be an unsigned 64-bit integer", 2)
    try:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = load_config(path, seed=args.seed, output_dir=args.out)
        if cfg.experiment != args.command:
            raise _Usage(f"config is for {cfg.experiment!r}, not {args.command!r}")
        limits = _thread_limit()
    except FileNotFoundError as exc:
        return _error("config_not_found", str(exc), 2)
    except json.JSONDecodeError as exc:
        return _error("config_parse", str(exc), 2)
    except ValidationError as exc:
        return _error("config_invalid", str(exc), 2)
    except (_Usage, ValueError) as exc:
        return _error("usage", str(exc), 2)

    out = Path(cfg.output_dir)
    try:
        with limits:
            summary = RUNNERS[cfg.experiment](cfg, cfg.seed, out)
    except Exception as exc:  # reported, not swallowed: non-zero exit with the reason
        logging.getLogger(__name__).debug("failure", exc_info=True)
        return _error(type(exc).__name__, str(exc), 1)
    print(json.dumps({"status": "ok", "experiment": cfg.experiment, "output_dir": str(out),
                      "config_hash": summary["config_hash"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
