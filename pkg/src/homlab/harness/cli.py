"""Command-line entry point: ``homlab <experiment> [--config FILE] [--seed N] ...``.

``--config`` accepts a TOML file or a JSON manifest written by an earlier
run; flags given on the command line override the file.  Running a manifest
again reproduces its CSV outputs byte for byte (``--verify`` checks that).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import EXPERIMENTS, ExperimentConfig, load_config
from .output import verify_outputs, write_result
from .runner import run

log = logging.getLogger("homlab")


def _u64(s: str) -> int:
    v = int(s, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _option(s: str) -> tuple[str, object]:
    if "=" not in s:
        raise argparse.ArgumentTypeError("expected key=value")
    k, v = s.split("=", 1)
    try:
        return k, json.loads(v)
    except json.JSONDecodeError:
        return k, v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config or JSON manifest")
    common.add_argument("--seed", type=_u64)
    common.add_argument("--paths", type=_positive)
    common.add_argument("--out", type=Path)
    common.add_argument("--threads", type=_positive)
    common.add_argument("--set", dest="options", type=_option, action="append", default=[],
                        metavar="KEY=VALUE", help="experiment option (value parsed as JSON when possible)")
    common.add_argument("--verify", action="store_true",
                        help="compare the written CSVs with the hashes in the --config manifest")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="homlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common])
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config is not None else ExperimentConfig()
    cfg.experiment = args.experiment
    for flag in ("seed", "paths", "threads"):
        v = getattr(args, flag)
        if v is not None:
            setattr(cfg, flag, v)
    if args.out is not None:
        cfg.out = str(args.out)
    if args.options:
        cfg.options = {**cfg.options, **dict(args.options)}
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = resolve_config(args)
    result = run(cfg)
    manifest = write_result(cfg.out, cfg.experiment, cfg.to_dict(), result)
    log.info("wrote %s", manifest)
    print(json.dumps({"manifest": str(manifest), **result.summary}, indent=2, sort_keys=True, default=str))
    if args.verify:
        if args.config is None or args.config.suffix != ".json":
            print("--verify needs --config pointing at a manifest", file=sys.stderr)
            return 2
        ok = verify_outputs(args.config, cfg.out)
        bad = [f for f, good in ok.items() if not good]
        if bad:
            print(f"mismatch: {bad}", file=sys.stderr)
            return 1
        print(f"verified {len(ok)} file(s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
