import argparse
import logging
import sys
from typing import List, Optional

from app.config import LOG_LEVEL, THREADS
from app.errors import CoreGuardError
from app.handlers import attack, bench, gen, lock, run, sweep, verify

logger = logging.getLogger(__name__)


def setup_logging(level: str = LOG_LEVEL):
    logging.basicConfig(
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        level=getattr(logging, level.upper(), logging.INFO),
        stream=sys.stderr,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    common.add_argument("--threads", type=int, default=THREADS, help="cap on internal parallelism")
    common.add_argument("--log-level", default=LOG_LEVEL, help="DEBUG, INFO, WARNING, ...")

    parser = argparse.ArgumentParser(
        prog="coreguard",
        description="Permutation-locked transformer inference with a simulated enclave.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    # one sub-command per handler module
    for handler in (gen, lock, run, verify, bench, attack, sweep):
        handler.register(sub, common)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args) or 0
    except (CoreGuardError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        message = str(e).replace('"', "'")
        print(f'error kind={type(e).__name__} message="{message}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
