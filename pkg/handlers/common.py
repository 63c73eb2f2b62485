import argparse
import logging
from collections.abc import Callable
from pathlib import Path

from pipelines.verify import VerificationError
from services.einstein import NotEinsteinError
from services.flow import CflViolationError, FlowInstabilityError, NotConvergedError
from services.manifold import FieldShapeError, ManifoldSpecError
from services.operator import EigenSolveError, SpectrumUnavailableError
from services.poisson import PoissonSolveError
from services.run_config import ConfigError, RunConfig, parse_config
from services.snapshot import SnapshotFormatError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INSTABILITY = 2
EXIT_NOT_CONVERGED = 3
EXIT_VERIFICATION = 4

USAGE_ERRORS = (
    ConfigError,
    ManifoldSpecError,
    FieldShapeError,
    SnapshotFormatError,
    FileNotFoundError,
)
INSTABILITY_ERRORS = (
    FlowInstabilityError,
    CflViolationError,
    PoissonSolveError,
    EigenSolveError,
)
VERIFICATION_ERRORS = (VerificationError, NotEinsteinError)


def add_common_arguments(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", type=Path, required=config_required, help="experiment config file")
    parser.add_argument("--out", type=Path, default=None, help="output directory (overrides [output] directory)")
    parser.add_argument("--seed", type=int, default=None, help="seed for random initial fields")


def load_run_config(args: argparse.Namespace) -> RunConfig:
    return parse_config(args.config, seed=args.seed)


def output_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    out = Path(args.out) if args.out is not None else Path(config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def exit_status_for(exc: BaseException) -> int:
    if isinstance(exc, USAGE_ERRORS):
        return EXIT_USAGE
    if isinstance(exc, INSTABILITY_ERRORS):
        return EXIT_INSTABILITY
    if isinstance(exc, (NotConvergedError, SpectrumUnavailableError)):
        return EXIT_NOT_CONVERGED
    if isinstance(exc, VERIFICATION_ERRORS):
        return EXIT_VERIFICATION
    return EXIT_USAGE


def guarded(name: str, handler: Callable[[argparse.Namespace], int]) -> Callable[[argparse.Namespace], int]:
    """Wrap a subcommand so every exception ends as an exit status."""

    def wrapper(args: argparse.Namespace) -> int:
        try:
            return handler(args)
        except (*USAGE_ERRORS, *INSTABILITY_ERRORS, *VERIFICATION_ERRORS, NotConvergedError, SpectrumUnavailableError) as exc:
            status = exit_status_for(exc)
            logger.error("CliDiag: %s failed (exit %d): %s", name, status, exc)
            return status
        except OSError as exc:
            logger.error("CliDiag: %s filesystem error: %s", name, exc)
            return EXIT_USAGE
        except ValueError as exc:
            logger.error("CliDiag: %s rejected input: %s", name, exc)
            return EXIT_USAGE
        except Exception:
            logger.exception("CliDiag: %s crashed", name)
            return EXIT_USAGE

    return wrapper
