"""Command-line entry point.

Subcommands: train-target, distill, generate, bench, simulate.  All runs
are driven by one JSON config (defaults apply when omitted) plus
dotted-path overrides, e.g. ``--set training.target_steps=500``.  The
SPECDEC_LOG environment variable sets the log level.  Exit codes: 0 on
success, 2 for configuration errors, 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import lab
from .config import load_config
from .errors import ConfigError, SpecDecError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="path to the JSON run config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override (repeatable)")
    parser.add_argument("--seed", type=int, help="override every seed namespace at once")
    parser.add_argument("--out", help="override the output directory")


def _drafter_selector(parser: argparse.ArgumentParser):
    parser.add_argument("--variant", choices=("moa", "eagle", "independent"), required=True)
    parser.add_argument("--n", type=int, default=0, help="target layer offset")
    parser.add_argument("--no-lsa", action="store_true", help="ablation: skip layer self-attention")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specdec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-target", help="train the toy target model")
    _common(p)

    p = sub.add_parser("distill", help="distill one drafter variant")
    _common(p)
    _drafter_selector(p)

    p = sub.add_parser("generate", help="run one speculative episode")
    _common(p)
    _drafter_selector(p)
    p.add_argument("--prompt-tokens", required=True, help="comma-separated token ids")
    p.add_argument("--mode", choices=("chain", "tree"), default="tree")

    p = sub.add_parser("bench", help="single-device metrics for every configured drafter")
    _common(p)

    p = sub.add_parser("simulate", help="client-server sessions under a network profile")
    _common(p)
    p.add_argument("--profile", help="network profile name (built-ins: 4g, 5g, ideal)")
    p.add_argument("--disconnect-after", type=int, help="cut the link after this many tokens")

    return parser


def _entry_from_args(args) -> dict:
    entry = {"variant": args.variant, "n": args.n}
    if args.no_lsa:
        entry["use_lsa"] = False
    return entry


def _load(args) -> dict:
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"out_dir={args.out}")
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        for name in cfg["seeds"]:
            cfg["seeds"][name] = args.seed
    return cfg


def main(argv=None) -> int:
    level = os.environ.get("SPECDEC_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "train-target":
            path = lab.cmd_train_target(cfg)
            print(path)
        elif args.command == "distill":
            path = lab.cmd_distill(cfg, _entry_from_args(args))
            print(path)
        elif args.command == "generate":
            prompt = [int(t) for t in args.prompt_tokens.split(",") if t.strip()]
            if not prompt:
                raise ConfigError("--prompt-tokens must list at least one token id")
            result = lab.cmd_generate(cfg, _entry_from_args(args), prompt, args.mode)
            print(json.dumps(result, indent=2))
        elif args.command == "bench":
            report = lab.cmd_bench(cfg)
            print(json.dumps(report, indent=2))
        elif args.command == "simulate":
            report = lab.cmd_simulate(cfg, args.profile, args.disconnect_after)
            print(json.dumps(report, indent=2))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SpecDecError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
