import argparse
import logging

from handlers.common import add_common_arguments, guarded, load_run_config, output_dir
from pipelines.run import emit_outputs, run_flow_pipeline

logger = logging.getLogger(__name__)


def handle(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    out = output_dir(args, config)
    outcome = run_flow_pipeline(config)
    emit_outputs(outcome, out)
    logger.info(
        "RunDiag: %s %s finished status=%d err=%s",
        outcome.summary.get("kind"),
        outcome.summary.get("variant"),
        outcome.status,
        outcome.summary.get("err_estimate", "n/a"),
    )
    return outcome.status


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("run", help="integrate a flow variant and write monitors, checkpoints, summary")
    add_common_arguments(parser)
    parser.set_defaults(func=guarded("run", handle))
