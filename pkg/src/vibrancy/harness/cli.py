"""``vf`` command: run one pipeline stage (or all of them) from a JSON config."""
from __future__ import annotations

import argparse
import logging
import sys

from ..checkpoint import NumericalError
from .config import ConfigError, load_config
from .pipeline import STAGES, MissingDependency, run_all, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vf", description="Vibrancy embedding and traffic prediction pipeline.")
    ap.add_argument("verb", choices=[*STAGES, "all"], help="stage to run, or 'all' for the whole pipeline")
    ap.add_argument("--config", help="JSON config file (defaults apply to missing fields)")
    ap.add_argument("--seed", type=int, help="master seed; overrides the config")
    ap.add_argument("--out", help="output root; overrides the config and VF_OUT")
    ap.add_argument("--force", action="store_true", help="rerun even if outputs are up to date")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        if args.verb == "all":
            status = run_all(cfg, force=args.force)
        else:
            status = {args.verb: run_stage(args.verb, cfg, force=args.force)}
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingDependency as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for stage, state in status.items():
        print(f"{stage}: {state}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
