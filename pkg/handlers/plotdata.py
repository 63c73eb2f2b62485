import argparse

from handlers.common import EXIT_OK, EXIT_USAGE, add_common_arguments, guarded, load_run_config, output_dir
from pipelines.plotdata import write_plotdata


def handle(args: argparse.Namespace) -> int:
    # reads the monitor.csv a `run` with the same --config/--out left behind
    config = load_run_config(args)
    run_dir = output_dir(args, config)
    monitor = run_dir / "monitor.csv"
    if not monitor.is_file():
        raise FileNotFoundError(f"Monitor CSV not found: {monitor} (run `kvflow run` with this config first)")
    written = write_plotdata(monitor, run_dir / "plotdata")
    return EXIT_OK if written else EXIT_USAGE


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("plotdata", help="split a run's monitor CSV into (t, value) series files")
    add_common_arguments(parser)
    parser.set_defaults(func=guarded("plotdata", handle))
