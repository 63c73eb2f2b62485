import argparse

from handlers.common import EXIT_OK, add_common_arguments, guarded, load_run_config, output_dir
from pipelines.spectrum import emit_spectrum, run_spectrum_pipeline


def handle(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    out = output_dir(args, config)
    outcome = run_spectrum_pipeline(config)
    emit_spectrum(outcome, out, config.output.kernel_snapshots)
    return EXIT_OK


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("spectrum", help="eigenvalues of the flow operator and its Killing kernel")
    add_common_arguments(parser)
    parser.set_defaults(func=guarded("spectrum", handle))
