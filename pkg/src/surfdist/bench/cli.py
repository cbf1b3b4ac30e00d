"""``surfdist-bench``: generate, train, estimate, visualize, ablate.

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from surfdist.bench.config import load_config
from surfdist.bench.runs import Run, cmd_ablate, cmd_estimate, cmd_generate, cmd_train, cmd_visualize
from surfdist.errors import InvalidConfig, SurfdistError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
COMMANDS = {"generate": cmd_generate, "train": cmd_train, "estimate": cmd_estimate,
            "visualize": cmd_visualize, "ablate": cmd_ablate}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="surfdist-bench", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", required=True, help="existing output directory")
    p.add_argument("--threads", type=int, help="worker processes for per-scene estimation")
    p.add_argument("--oracle", action="store_true", help="ground-truth queries instead of trained models")
    p.add_argument("--depth", action="store_true", help="depth adjustment after refinement")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def overrides_from_args(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidConfig(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if args.threads is not None:
        out["threads"] = str(args.threads)
    if args.oracle:
        out["oracle"] = "true"
    if args.depth:
        out["estimate.depth"] = "true"
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, overrides_from_args(args))
    except InvalidConfig as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run = Run(cfg, args.out)
        run.write_config()
        COMMANDS[args.command](run)
    except InvalidConfig as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SurfdistError, OSError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
