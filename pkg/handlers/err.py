import argparse

from handlers.common import add_common_arguments, guarded, load_run_config, output_dir
from pipelines.err import emit_err, run_err_pipeline


def handle(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    out = output_dir(args, config)
    outcome = run_err_pipeline(config)
    emit_err(outcome, out)
    return outcome.status


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("err", help="Err(X0) from the main flow, written to err.txt")
    add_common_arguments(parser)
    parser.set_defaults(func=guarded("err", handle))
