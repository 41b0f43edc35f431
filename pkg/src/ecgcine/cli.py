"""Command-line entry point: ``ecgcine <stage> [--profile P] [--config F] [--set k=v ...]``.

Exit codes: 0 success, 2 config error, 3 missing dependency, 4 runtime or training error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PROFILES, load_config
from .errors import ConfigError, DependencyError
from .pipeline import OUT_ENV, PIPELINE, STAGES, output_root, run_pipeline, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("ecgcine")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecgcine", description="ECG-conditioned cine generation pipeline on phantom data.")
    parser.add_argument("stage", choices=STAGES + ("all", "show-config"),
                        help="stage to run; 'all' runs data through eval; 'show-config' prints the resolved config")
    parser.add_argument("--profile", choices=PROFILES, default=None,
                        help="built-in profile (default: the config file's, else toy)")
    parser.add_argument("--config", type=Path, default=None, help="JSON config file layered over the profile")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="FIELD=VALUE",
                        help="dotted-path override, e.g. --set amdf.alpha=0.5 (repeatable)")
    parser.add_argument("--run", default=None, help="run name under the output root (default: the profile name)")
    parser.add_argument("--out", default=None, help=f"output root (default: ${OUT_ENV} or ./runs)")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", datefmt="%H:%M:%S")
    try:
        cfg = load_config(args.config, args.profile, args.overrides)
        if args.stage == "show-config":
            print(json.dumps(cfg.to_dict(), indent=1))
            return EXIT_OK
        run_dir = output_root(args.out) / (args.run or cfg.profile)
        if args.stage == "all":
            result = run_pipeline(cfg, run_dir, PIPELINE)
        else:
            result = run_stage(args.stage, cfg, run_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # training or I/O failure
        log.debug("stage failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.stage != "ablate":
        print(json.dumps(result, indent=1, default=str))
    else:
        print(json.dumps(result["table"], indent=1))
    print(f"artifacts: {run_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
