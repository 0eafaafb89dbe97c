"""
Command-line entry point

    gradshield <kind> --config PATH [--seed N] [--out DIR] [--force]
    gradshield verify [--out DIR]

The run directory is printed on stdout; logs go to stderr.
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

from gradshield import __version__
from gradshield.core.config import settings
from gradshield.core.exceptions import GradShieldError
from gradshield.core.logging_config import logger, setup_logging
from gradshield.services.config_service import config_service
from gradshield.services.experiment_service import experiment_service
from gradshield.services.verification_service import verification_service

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; 2 is reserved for invalid configs here"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradshield", description="Selective gradient encryption privacy lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="Override GRADSHIELD_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for kind in experiment_service.pipelines:
        sub = commands.add_parser(kind, help=f"Run the {kind} experiment")
        sub.add_argument("--config", required=True, type=Path, help="TOML experiment file")
        sub.add_argument("--seed", type=int, default=None, help="Override the base seed")
        sub.add_argument("--out", default=None, help="Override the output directory")
        sub.add_argument("--force", action="store_true", help="Overwrite a finished run of the same config")

    verify = commands.add_parser("verify", help="Run the acceptance checks")
    verify.add_argument("--out", default=settings.RUNS_DIR, help="Directory for verify.csv")
    return parser


def run_experiment(args: argparse.Namespace) -> int:
    config = config_service.parse_config(args.config, kind=args.command)
    config = config_service.apply_overrides(config, seed=args.seed, out=args.out)
    directory = experiment_service.run_experiment(config, force=args.force)
    print(directory)
    return EXIT_OK


def run_verify(args: argparse.Namespace) -> int:
    directory = Path(args.out) / "verify"
    results = verification_service.run(directory)
    failed = [r.check for r in results if not r.passed]
    print(directory / "verify.csv")
    if failed:
        logger.error(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        setup_logging(level=args.log_level)

    logger.info(f"Starting {settings.APP_NAME} v{__version__}")
    try:
        if args.command == "verify":
            return run_verify(args)
        return run_experiment(args)
    except GradShieldError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        print(f"error: {e.message}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"Unhandled exception: {str(e)}", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
