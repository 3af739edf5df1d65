"""Command-line entry point: ``vpe <subcommand> [--config PATH] [--out DIR] [--seed N] [--preset NAME]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import ConfigError, resolve, validate


def _parse_dims(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--dims expects comma-separated integers, got {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="vpe", description="Latent-embedded policies on a pendulum family.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in pipeline.STAGES + ("all", "show-config"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON file overriding preset values")
        s.add_argument("--out", default="run", help="run directory (default: ./run)")
        s.add_argument("--seed", type=int, help="root seed (unsigned 64-bit)")
        s.add_argument("--preset", default="desk", choices=["desk", "paper"])
        s.add_argument("--force", action="store_true", help="rerun even if the manifest is up to date")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("adapt", "all"):
            s.add_argument("--method", choices=["sgd", "bo", "both"])
            s.add_argument("--dims", type=_parse_dims, help="explicit latent dims, e.g. 0,3")
            s.add_argument("--top-k", type=int)
            s.add_argument("--bo-init", type=int, help="quasi-random BO starting points")
            s.add_argument("--bo-iterations", type=int)
            s.add_argument("--sgd-transitions", type=int)
    return p


def _apply_flags(cfg, args):
    a = cfg["adapt"]
    if getattr(args, "method", None):
        a["method"] = args.method
    if getattr(args, "dims", None) is not None:
        a["dims"] = args.dims
    if getattr(args, "top_k", None) is not None:
        a["top_k"] = args.top_k
    if getattr(args, "bo_init", None) is not None:
        a["bo"]["init_samples"] = args.bo_init
    if getattr(args, "bo_iterations", None) is not None:
        a["bo"]["iterations"] = args.bo_iterations
    if getattr(args, "sgd_transitions", None) is not None:
        a["sgd"]["transitions"] = args.sgd_transitions
    return validate(cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = _apply_flags(resolve(args.preset, args.config, args.seed), args)
        if args.command == "show-config":
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        with threadpool_limits(pipeline.thread_limit()):
            if args.command == "all":
                pipeline.run_all(cfg, args.out, args.force)
            else:
                pipeline.run_stage(args.command, cfg, args.out, args.force)
    except (ConfigError, pipeline.StageError, FileNotFoundError) as exc:
        print(f"vpe: error: {exc}", file=sys.stderr)
        return 2
    if args.command in ("report", "all"):
        print((pipeline.Path(args.out) / "summary.txt").read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
