"""Command-line entry point: ``mcr <verb> [--config FILE] [--seed N] [--out DIR] [--profile P]``.

Exit codes: 0 on success, 2 on a configuration error, 1 on a runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch
import yaml

from mcr.errors import ConfigError
from mcr.experiments import COMMANDS, PROFILES, RUNNERS, resolve

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("mcr")

HELP = {
    "gen-synth": "generate expert demonstrations on the synthetic benchmark",
    "pretrain": "pre-train an encoder with the selected objectives",
    "eval-centricity": "score Grad-CAM maps against ground-truth masks",
    "eval-bc": "frozen-encoder behaviour cloning success rates",
    "ablate": "pretrain -> centricity -> BC over one ablation axis",
    "report": "centricity vs success correlation and scatter plot",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", type=Path, help="YAML (or JSON) config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=Path("runs") / name)
        p.add_argument("--profile", choices=PROFILES, default="desk")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {str(path)!r} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {str(path)!r} must contain a mapping")
    return data


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, load_config(args.config), args.profile)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(1)  # single worker keeps runs bit-reproducible
    try:
        manifest = RUNNERS[args.command](cfg, args.out, seed=args.seed, profile=args.profile)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(manifest.out_dir / "manifest.json")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
