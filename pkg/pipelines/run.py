import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from config import DENSE_THRESHOLD
from pipelines.plotdata import write_plotdata
from services.flow import (
    FlowInstabilityError,
    FlowState,
    MonitorSeries,
    NotConvergedError,
    RunResult,
    default_t_end,
    err_estimate,
    fit_decay_rate,
    run,
)
from services.manifold import ManifoldData, build_manifold, sectional_curvature_range
from services.operator import (
    FlowOperator,
    KillingBasis,
    SpectralDecomposition,
    SpectrumUnavailableError,
    assemble,
    assemble_bochner_yano,
    dominant_mode_projection,
    eigendecompose,
    evolve_spectral,
    kernel_distance,
    killing_kernel,
    spectral_gap,
)
from services.poisson import LerayProjector, build_projector
from services.run_config import RunConfig, build_initial
from services.snapshot import write_csv, write_key_values, write_snapshot

logger = logging.getLogger(__name__)

STATUS_OK = 0
STATUS_INSTABILITY = 2
STATUS_NOT_CONVERGED = 3


@dataclass
class FlowSetup:
    manifold: ManifoldData
    op: FlowOperator
    main_op: FlowOperator
    projector: LerayProjector | None
    spectrum: SpectralDecomposition
    basis: KillingBasis
    gap: float


@dataclass
class RunOutcome:
    config: RunConfig
    setup: FlowSetup
    x0: np.ndarray
    status: int
    summary: dict = field(default_factory=dict)
    result: RunResult | None = None
    series: MonitorSeries | None = None
    checkpoints: list[FlowState] = field(default_factory=list)


def prepare_flow(config: RunConfig) -> FlowSetup:
    manifold = build_manifold(config.manifold)
    main_op = assemble(manifold)
    op = assemble_bochner_yano(manifold) if config.flow.variant == "bochner_yano" else main_op
    projector = build_projector(manifold) if config.flow.variant in ("bochner_yano", "navier_stokes") else None

    m = manifold.dim
    count = None if main_op.n_dofs <= DENSE_THRESHOLD else m * (m + 1) // 2 + 4
    spectrum = eigendecompose(main_op, count=count)
    basis = killing_kernel(spectrum, config.flow.kernel_tol)
    try:
        gap = spectral_gap(spectrum, basis)
    except SpectrumUnavailableError as exc:
        logger.warning("FlowDiag: %s", exc)
        gap = math.nan
    logger.info("FlowDiag: kernel dim=%d spectral gap=%.6f", basis.dim, gap)
    return FlowSetup(
        manifold=manifold,
        op=op,
        main_op=main_op,
        projector=projector,
        spectrum=spectrum,
        basis=basis,
        gap=gap,
    )


def run_flow_pipeline(config: RunConfig, setup: FlowSetup | None = None) -> RunOutcome:
    started = time.monotonic()
    setup = setup or prepare_flow(config)
    manifold = setup.manifold
    x0 = build_initial(config.initial, manifold)

    flow_cfg = config.flow
    if flow_cfg.t_end is None:
        if not math.isfinite(setup.gap):
            raise SpectrumUnavailableError("t_end is unset and no spectral gap is available to default it")
        flow_cfg = replace(flow_cfg, t_end=default_t_end(setup.gap))
        logger.info("FlowDiag: t_end defaulted to %.4f from spectral gap", flow_cfg.t_end)

    outcome = RunOutcome(config=replace(config, flow=flow_cfg), setup=setup, x0=x0, status=STATUS_OK)
    try:
        result = run(x0, flow_cfg, manifold, setup.op, projector=setup.projector, basis=setup.basis)
    except FlowInstabilityError as exc:
        outcome.status = STATUS_INSTABILITY
        outcome.series = exc.series
        outcome.checkpoints = [exc.last_state] if exc.last_state is not None else []
        outcome.summary = _base_summary(outcome, started)
        outcome.summary.update({"exit_status": STATUS_INSTABILITY, "abort_reason": str(exc)})
        return outcome

    outcome.result = result
    outcome.series = result.series
    outcome.checkpoints = result.checkpoints
    outcome.summary = _base_summary(outcome, started)
    outcome.summary.update(_result_summary(outcome))

    if flow_cfg.variant == "main":
        kernel_rate = float(np.max(np.abs(setup.basis.eigenvalues))) if setup.basis.dim else 0.0
        try:
            est = err_estimate(result.series, kernel_rate=kernel_rate)
        except NotConvergedError as exc:
            est = exc.estimate
            outcome.status = STATUS_NOT_CONVERGED
            logger.error("FlowDiag: %s", exc)
        if est is not None:
            outcome.summary.update(
                {
                    "err_estimate": est.err_time_integral,
                    "err_final_norm": est.err_final_norm,
                    "err_agreement": est.agreement,
                    "tail_energy": est.tail_energy,
                    "converged": est.converged,
                }
            )
    outcome.summary["exit_status"] = outcome.status
    outcome.summary["wall_time_s"] = time.monotonic() - started
    return outcome


def _base_summary(outcome: RunOutcome, started: float) -> dict:
    setup = outcome.setup
    cfg = outcome.config
    summary = {
        "kind": setup.manifold.kind,
        "resolution": "x".join(str(n) for n in setup.manifold.grid.shape),
        "variant": cfg.flow.variant,
        "integrator": cfg.flow.integrator,
        "dt_safety": cfg.flow.dt_safety,
        "t_end": cfg.flow.t_end,
        "seed": cfg.initial.seed,
        "kernel_dim": setup.basis.dim,
        "kernel_tol": setup.basis.kernel_tol,
        "spectral_gap": setup.gap,
        "initial_norm2": setup.main_op.inner(outcome.x0, outcome.x0),
        "wall_time_s": time.monotonic() - started,
    }
    if setup.manifold.dim == 2:
        k_min, k_max = sectional_curvature_range(setup.manifold)
        summary["sectional_curvature_min"] = k_min
        summary["sectional_curvature_max"] = k_max
    for sec, entries in cfg.echo.items():
        for key, raw in entries.items():
            summary[f"config.{sec}.{key}"] = raw
    return summary


def _result_summary(outcome: RunOutcome) -> dict:
    result = outcome.result
    setup = outcome.setup
    last = result.series.rows[-1]
    final_x = result.final.x
    out = {
        "dt": result.dt,
        "steps": result.final.step,
        "lambda_max": result.lambda_max,
        "final_frakL": last.frakL,
        "final_E_bochner": last.E_bochner,
        "final_norm2": last.normX2,
        "E_int": last.E_int,
        "energy_violations": result.energy_violations,
        "u0_positive": result.u0_positive,
        "kernel_distance": kernel_distance(final_x, setup.basis) if setup.main_op.norm(final_x) > 0.0 else 0.0,
    }
    if result.limit_error is not None:
        out["limit_error"] = result.limit_error
    norms = np.sqrt(result.series.column("normX2"))
    times = result.series.column("t")
    if len(norms) >= 2 and np.all(norms > 0.0):
        out["decay_rate_fit"] = fit_decay_rate(times, norms)

    variant = outcome.config.flow.variant
    spectrum = setup.spectrum
    x0 = result.checkpoints[0].x
    if variant == "main" and spectrum.complete:
        exact = evolve_spectral(x0, result.final.t, spectrum)
        out["oracle_error"] = setup.main_op.norm(final_x - exact) / max(setup.main_op.norm(exact), 1e-300)
    if variant == "normalized":
        out["max_norm_deviation"] = float(np.max(np.abs(norms - 1.0)))
        if spectrum.complete:
            target = dominant_mode_projection(x0, spectrum, setup.basis)
            if setup.main_op.norm(target) > 0.0:
                target = target / setup.main_op.norm(target)
                out["slowest_mode_error"] = setup.main_op.norm(final_x - target)
    return out


def emit_outputs(outcome: RunOutcome, directory: Path | None = None) -> Path:
    """Monitor CSV, checkpoints, summary and plot data under the output directory."""
    out_dir = Path(directory or outcome.config.output.directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifold = outcome.setup.manifold

    if outcome.series is not None and len(outcome.series):
        monitor_path = write_csv(out_dir / "monitor.csv", outcome.series.columns, outcome.series.as_table())
        if outcome.config.output.plotdata:
            try:
                write_plotdata(monitor_path, out_dir / "plotdata")
            except (OSError, ValueError) as exc:
                logger.warning("Plot data skipped: %s", exc)

    for state in outcome.checkpoints:
        write_snapshot(out_dir / f"step_{state.step}.kvf", state.x, manifold)

    summary_path = write_key_values(out_dir / "summary.txt", outcome.summary)
    logger.info("Run outputs written to %s (status %d)", out_dir, outcome.status)
    return summary_path
