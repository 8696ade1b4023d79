"""Command-line entry point.

    ipgrepair <stage> [--config FILE] [--<dotted.key> VALUE ...]

Stages: train, attack, extract-ipg, characterize, train-gnn, attribute,
gen-actions, eval-actions, report, and ``run`` for all of them in order.
Exit codes: 0 ok, 2 configuration error, 3 data-format error, 4 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import DEFAULTS, PipelineConfig
from .errors import IpgError
from .pipeline import STAGES, run_pipeline, run_stage

log = logging.getLogger("ipgrepair")


def _overrides(extra: list) -> dict:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise SystemExit(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise SystemExit(f"missing value for {tok}")
            value = extra[i + 1]
            i += 2
        if key not in DEFAULTS:
            raise SystemExit(f"unknown option --{key}")
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ipgrepair",
        description="Inference-provenance characterization and activation-level repair.",
        epilog="Any config key can be overridden as --<key> VALUE, e.g. --dataset.separation 0.9",
    )
    parser.add_argument("stage", choices=list(STAGES) + ["run", "show-config"])
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config, _overrides(extra))
        if args.stage == "show-config":
            for k in sorted(cfg.flat):
                print(f"{k} = {cfg.flat[k]}")
            return 0
        result = run_pipeline(cfg) if args.stage == "run" else run_stage(args.stage, cfg)
    except IpgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
