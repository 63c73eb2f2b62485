import argparse
import logging
import sys

import config
from config import LOG_DIR, LOG_LEVEL
from handlers import err as err_handler
from handlers import plotdata as plotdata_handler
from handlers import run as run_handler
from handlers import spectrum as spectrum_handler
from handlers import verify as verify_handler
from handlers.common import EXIT_USAGE

LOG_DIR.mkdir(parents=True, exist_ok=True)
LOG_FILE = LOG_DIR / "kvflow.log"

logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    handlers=[
        logging.StreamHandler(),
        logging.FileHandler(LOG_FILE, encoding="utf-8"),
    ],
)
logger = logging.getLogger(__name__)

HANDLERS = (run_handler, spectrum_handler, verify_handler, err_handler, plotdata_handler)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvflow", description="Geometric heat flow lab for vector fields")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for handler in HANDLERS:
        handler.register(subparsers)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; --help exits 0
        return EXIT_USAGE if exc.code else 0
    config.log_settings()
    logger.info("CliDiag: command=%s", args.command)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(dispatch())
