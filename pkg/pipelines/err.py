import logging
from dataclasses import replace
from pathlib import Path

from pipelines.run import RunOutcome, emit_outputs, run_flow_pipeline
from services.run_config import RunConfig
from services.snapshot import write_key_values

logger = logging.getLogger(__name__)

ERR_KEYS = ("err_estimate", "err_final_norm", "err_agreement", "tail_energy", "converged")


def run_err_pipeline(config: RunConfig) -> RunOutcome:
    """Err(X0) always comes from the main variant, whatever the config asks for."""
    if config.flow.variant != "main":
        logger.info("ErrDiag: variant %s replaced by main for Err", config.flow.variant)
        config = replace(config, flow=replace(config.flow, variant="main"))
    return run_flow_pipeline(config)


def emit_err(outcome: RunOutcome, out_dir: Path | None = None) -> Path:
    out_dir = Path(out_dir or outcome.config.output.directory)
    emit_outputs(outcome, out_dir)
    values = {
        "kind": outcome.summary.get("kind"),
        "t_end": outcome.config.flow.t_end,
        "initial_norm2": outcome.summary.get("initial_norm2"),
        "exit_status": outcome.status,
    }
    for key in ERR_KEYS:
        if key in outcome.summary:
            values[key] = outcome.summary[key]
    if "abort_reason" in outcome.summary:
        values["abort_reason"] = outcome.summary["abort_reason"]
    path = write_key_values(out_dir / "err.txt", values)
    logger.info("ErrDiag: Err=%s written to %s", values.get("err_estimate", "n/a"), path)
    return path
