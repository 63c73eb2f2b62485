import argparse
import logging

from handlers.common import EXIT_OK, add_common_arguments, guarded, load_run_config, output_dir
from pipelines.verify import SUITES, emit_verify, require_passed, run_verify_pipeline

logger = logging.getLogger(__name__)


def handle(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    out = output_dir(args, config)
    outcome = run_verify_pipeline(args.suite, config)
    report = emit_verify(outcome, out)
    for row in outcome.rows:
        logger.info("VerifyDiag: %s %s", args.suite, " ".join(str(v) for v in row))
    logger.info("VerifyDiag: %s passed=%s report=%s", args.suite, outcome.passed, report)
    require_passed(outcome)
    return EXIT_OK


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("verify", help="numerical identity suites")
    parser.add_argument("suite", choices=SUITES)
    add_common_arguments(parser)
    parser.set_defaults(func=guarded("verify", handle))
