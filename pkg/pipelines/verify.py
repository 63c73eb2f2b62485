"""Identity suites behind ``kvflow verify``.

Each suite returns a table plus a pass/fail verdict; nothing here raises on
a failed check, the handler turns the verdict into the exit status.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from services.einstein import (
    ScalarHeatConfig,
    gradient_flow_reduction_check,
    l2_bound_check,
    lambda1,
    mean_evolution_check,
    scalar_heat_run,
    verify_einstein,
)
from services.fields import band_limited_random, energy_report
from services.flow import (
    CflViolationError,
    FlowInstabilityError,
    FlowState,
    divergence_decay_check,
    energy_balance_defect,
    energy_identity_residual,
    is_non_increasing,
    run,
    stable_dt,
)
from services.manifold import ManifoldData, ManifoldSpec, build_manifold, conformal_torus_exact, l2_inner
from services.operator import assemble, discrete_frakL, lambda_max_estimate, symmetry_defect
from services.poisson import build_projector
from services.run_config import FourierTerm, RunConfig, build_initial, fourier_field, scalar_function
from services.snapshot import write_csv, write_key_values

logger = logging.getLogger(__name__)

SUITES = ("yano", "energy", "einstein", "ns-decay")

YANO_ABS_TOL = 1e-3
STRUCTURE_RTOL = 1e-12
IDENTITY_MIN_RATIO = 8.0
MEAN_REL_TOL = 5e-3
CONSTANT_MEAN_TOL = 1e-6
B_SLACK_FLOOR = -1e-8
TAYLOR_GREEN_TOL = 1e-2
DIVERGENCE_FREE_TOL = 1e-10
DIVERGENCE_RATE_TOL = 2e-2
DIVERGENCE_SERIES_TOL = 1e-2
MONOTONE_STEPS = 200


class VerificationError(RuntimeError):
    pass


TAYLOR_GREEN = (
    FourierTerm("sin", 1, "cos", 1, 0, 1.0),
    FourierTerm("cos", 1, "sin", 1, 1, -1.0),
)


@dataclass
class VerifyOutcome:
    suite: str
    passed: bool
    header: tuple[str, ...] = ()
    rows: list[list] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    series_header: tuple[str, ...] = ()
    series: list[list] = field(default_factory=list)


def convergence_order(h_coarse: float, h_fine: float, e_coarse: float, e_fine: float) -> float:
    if e_fine <= 0.0 or e_coarse <= 0.0:
        return math.inf
    return math.log(e_coarse / e_fine) / math.log(h_coarse / h_fine)


def _default_levels(spec: ManifoldSpec) -> tuple[tuple[int, ...], ...]:
    res = tuple(spec.resolution)
    if min(res) // 4 >= 8:
        return (tuple(n // 4 for n in res), tuple(n // 2 for n in res), res)
    return (res, tuple(2 * n for n in res), tuple(4 * n for n in res))


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def _curvature_error(manifold: ManifoldData) -> float:
    """Max |Ric_h - Ric| against the closed-form conformal torus; nan elsewhere."""
    if manifold.kind != "perturbed_torus":
        return math.nan
    _conn, ric = conformal_torus_exact(manifold.grid, manifold.spec.perturbation_amplitude)
    return float(np.abs(manifold.curvature.ric - ric).max())


def _curvature_order(rows: list[list]) -> float:
    if len(rows) < 2 or not math.isfinite(rows[-1][4]):
        return math.nan
    return convergence_order(rows[-2][1], rows[-1][1], rows[-2][4], rows[-1][4])


def verify_yano(config: RunConfig) -> VerifyOutcome:
    levels = config.verify.levels or _default_levels(config.manifold)
    rows = []
    prev = None
    for level in levels:
        manifold = build_manifold(replace(config.manifold, resolution=level))
        curvature_error = _curvature_error(manifold)
        worst = 0.0
        for s in range(config.verify.samples):
            x = band_limited_random(manifold, config.initial.seed + s)
            rep = energy_report(x, manifold)
            norm2 = l2_inner(x, x, manifold)
            scale = max(rep.E_def, rep.E_bochner, norm2, 1e-300)
            worst = max(worst, abs(rep.yano_residual) / scale)
        order = math.nan if prev is None else convergence_order(prev[0], manifold.h_max, prev[1], worst)
        rows.append(["x".join(map(str, level)), manifold.h_max, worst, order, curvature_error])
        logger.info("VerifyDiag: yano level=%s residual=%.3e order=%s", level, worst, order)
        prev = (manifold.h_max, worst)

    orders = [r[3] for r in rows[1:]]
    finest = rows[-1][2]
    exact = finest <= 1e-12
    passed = exact or (all(o >= config.verify.min_order for o in orders) and finest <= YANO_ABS_TOL)
    return VerifyOutcome(
        suite="yano",
        passed=passed,
        header=("resolution", "h", "residual", "order", "curvature_error"),
        rows=rows,
        summary={
            "finest_residual": finest,
            "min_order": min(orders) if orders else math.nan,
            "exact": exact,
            "curvature_order": _curvature_order(rows),
        },
    )


def verify_energy(config: RunConfig) -> VerifyOutcome:
    manifold = build_manifold(config.manifold)
    op = assemble(manifold)
    rng = np.random.default_rng(config.initial.seed)
    shape = (manifold.dim, manifold.n_nodes)

    worst_identity = 0.0
    worst_sign = -math.inf
    for _ in range(config.verify.samples):
        x = rng.standard_normal(shape)
        q = op.inner(x, op.apply(x))
        frak = discrete_frakL(op, x)
        scale = max(abs(q), 2.0 * frak, 1e-300)
        worst_identity = max(worst_identity, abs(q + 2.0 * frak) / scale)
        worst_sign = max(worst_sign, q / scale)
    asym = symmetry_defect(op)

    x = band_limited_random(manifold, config.initial.seed)
    lam = lambda_max_estimate(op)
    rate = max(-op.inner(x, op.apply(x)) / op.inner(x, x), 1e-3)
    dt = min(0.2 / rate, stable_dt(lam, "rk4", 0.9))
    state = FlowState(t=0.0, x=x)
    rows = []
    for k in range(3):
        h = dt / 2**k
        rows.append([h, energy_identity_residual(state, op, h, "rk4")])
    ratios = [rows[k][1] / max(rows[k + 1][1], 1e-300) for k in range(2)]
    for k, row in enumerate(rows):
        row.append(math.nan if k == 0 else ratios[k - 1])

    # frakL must not increase along the main flow
    mono_cfg = replace(
        config.flow,
        variant="main",
        t_end=MONOTONE_STEPS * stable_dt(lam, config.flow.integrator, config.flow.dt_safety),
        monitor_stride=MONOTONE_STEPS,
        checkpoint_stride=0,
    )
    mono = run(x, mono_cfg, manifold, op, lambda_max=lam)

    passed = (
        worst_identity <= STRUCTURE_RTOL
        and worst_sign <= STRUCTURE_RTOL
        and asym <= STRUCTURE_RTOL
        and ratios[-1] >= IDENTITY_MIN_RATIO
        and mono.energy_violations == 0
        and mono.u0_positive
    )
    logger.info(
        "VerifyDiag: energy identity=%.2e sign=%.2e asym=%.2e ratios=%s violations=%d",
        worst_identity,
        worst_sign,
        asym,
        ratios,
        mono.energy_violations,
    )
    return VerifyOutcome(
        suite="energy",
        passed=passed,
        header=("dt", "identity_residual", "ratio"),
        rows=rows,
        summary={
            "gradient_structure_residual": worst_identity,
            "max_quadratic_form": worst_sign,
            "symmetry_defect": asym,
            "identity_ratio": ratios[-1],
            "energy_violations": mono.energy_violations,
            "monotone_steps": mono.final.step,
        },
    )


def verify_einstein_case(config: RunConfig) -> VerifyOutcome:
    manifold = build_manifold(config.manifold)
    report = verify_einstein(manifold)
    summary = {
        "einstein": report.is_einstein,
        "R": report.R_const,
        "deviation": report.deviation,
        "m": report.m,
    }
    if not report.positive:
        summary["reason"] = "Einstein-case checks need an Einstein manifold with R > 0"
        logger.error("VerifyDiag: %s (%s)", summary["reason"], manifold.kind)
        return VerifyOutcome(suite="einstein", passed=False, summary=summary)

    h2 = manifold.h_max**2
    est = lambda1(manifold)
    lich_ok = est.lambda1 >= est.lichnerowicz_bound * (1.0 - 10.0 * h2)

    spec = config.einstein
    phi = scalar_function(spec.phi, manifold)
    heat_cfg = ScalarHeatConfig(
        t_end=spec.t_end,
        dt_safety=config.flow.dt_safety,
        integrator=config.flow.integrator,
        sample_stride=spec.sample_stride,
    )
    heat = scalar_heat_run(phi, spec.c, heat_cfg, manifold)
    mean = mean_evolution_check(heat, phi, spec.c, manifold, heat_cfg)
    bound = l2_bound_check(heat, phi, spec.c, est.lambda1, manifold)
    reduction = gradient_flow_reduction_check(
        est.eigenfunction,
        manifold,
        assemble(manifold),
        t_end=config.verify.t_end,
        dt_safety=config.flow.dt_safety,
        integrator=config.flow.integrator,
    )

    slack_ok = bound.min_b_slack is None or bound.min_b_slack >= B_SLACK_FLOOR
    passed = (
        lich_ok
        and mean.max_rel_error <= MEAN_REL_TOL
        and (mean.constant_drift is None or mean.constant_drift <= CONSTANT_MEAN_TOL)
        and bound.norm_holds
        and slack_ok
        and reduction.max_discrepancy <= 10.0 * h2
    )
    summary.update(
        {
            "lambda1": est.lambda1,
            "lambda1_residual": est.residual,
            "lichnerowicz_bound": est.lichnerowicz_bound,
            "lichnerowicz_gap": est.lichnerowicz_gap,
            "mean_max_rel_error": mean.max_rel_error,
            "mean_max_abs_error": mean.max_abs_error,
            "c_X": mean.c_X,
            "constant_mean_drift": mean.constant_drift,
            "l2_bound_printed_holds": bound.printed_holds,
            "l2_bound_norm_holds": bound.norm_holds,
            "l2_bound_active": bound.active,
            "min_b_slack": "n/a" if bound.min_b_slack is None else bound.min_b_slack,
            "reduction_max_discrepancy": reduction.max_discrepancy,
        }
    )
    series = [
        [t, a, b, a_cf, bd]
        for t, a, b, a_cf, bd in zip(heat.times, heat.a, heat.b, mean.a_closed_form, bound.bound_norm)
    ]
    return VerifyOutcome(
        suite="einstein",
        passed=passed,
        summary=summary,
        series_header=("t", "a", "b", "a_closed_form", "bound"),
        series=series,
    )


def taylor_green_energy_error(rate: float, t: float) -> float:
    """Relative gap between the discrete energy exp(-2 rate t) and the continuum exp(-4t)."""
    return abs(math.exp(-2.0 * (rate - 2.0) * t) - 1.0)


def verify_ns_decay(config: RunConfig) -> VerifyOutcome:
    manifold = build_manifold(config.manifold)
    if manifold.kind != "flat_torus_t2":
        reason = f"divergence decay and Navier-Stokes checks run on flat_torus_t2 only, not {manifold.kind}"
        logger.info("VerifyDiag: ns-decay skipped: %s", reason)
        return VerifyOutcome(suite="ns-decay", passed=True, summary={"skipped": True, "reason": reason})

    op = assemble(manifold)
    projector = build_projector(manifold)
    lam = lambda_max_estimate(op)
    t_end = config.verify.t_end
    base = replace(config.flow, t_end=t_end, variant="main")
    dt = stable_dt(lam, base.integrator, base.dt_safety)
    n_steps = max(1, math.ceil(t_end / dt))
    stride = max(1, n_steps // 50)
    summary: dict = {}
    rows = []

    # divergence decay along the main flow
    x0 = build_initial(config.initial, manifold)
    main_run = run(x0, replace(base, checkpoint_stride=stride, monitor_stride=stride), manifold, op, lambda_max=lam)
    div = divergence_decay_check(main_run.checkpoints, manifold)
    if div.div_l2[0] <= 1e-20:
        div_ok = float(div.div_l2.max()) <= DIVERGENCE_FREE_TOL
    else:
        rel = abs(div.rate_measured - div.rate_expected) / abs(div.rate_expected)
        div_ok = div.monotone and rel <= DIVERGENCE_RATE_TOL and div.max_rel_error <= DIVERGENCE_SERIES_TOL
    energy_ok = main_run.energy_violations == 0 and main_run.u0_positive
    summary.update(
        {
            "div_l2_initial": float(div.div_l2[0]),
            "div_l2_final": float(div.div_l2[-1]),
            "div_monotone": div.monotone,
            "div_rate_measured": div.rate_measured,
            "div_rate_expected": div.rate_expected,
            "div_closed_form_max_rel_error": div.max_rel_error,
            "main_energy_violations": main_run.energy_violations,
        }
    )
    for t, d, c in zip(div.times, div.div_l2, div.closed_form):
        rows.append(["divergence", t, d])
        rows.append(["divergence_closed_form", t, c])

    # Taylor-Green vortex
    ns_cfg = replace(base, variant="navier_stokes", monitor_stride=stride)
    tg0 = fourier_field(TAYLOR_GREEN, manifold)
    tg_ok = False
    try:
        tg = run(tg0, ns_cfg, manifold, op, projector=projector, lambda_max=lam)
        # TG is an eigenfield of L_h with discrete rate 2 sin^2 h / h^2 + O(h^4), so the
        # energy sits 4 h^2 t / 3 off the continuum 2 pi^2 exp(-4t): 1.3% on 64^2 at t = 1
        rate = -op.inner(tg0, op.apply(tg0)) / op.inner(tg0, tg0)
        expected = math.exp(-rate * tg.final.t) * tg0
        continuum = math.exp(-2.0 * tg.final.t) * tg0
        field_err = op.norm(tg.final.x - expected) / op.norm(expected)
        energy_err = abs(op.inner(tg.final.x, tg.final.x) / op.inner(continuum, continuum) - 1.0)
        tg_ok = (
            field_err <= TAYLOR_GREEN_TOL
            and energy_err <= TAYLOR_GREEN_TOL
            and is_non_increasing(tg.series.column("normX2"))
        )
        summary.update(
            {
                "taylor_green_rate": rate,
                "taylor_green_field_error": field_err,
                "taylor_green_continuum_error": op.norm(tg.final.x - continuum) / op.norm(continuum),
                "taylor_green_energy_error": energy_err,
                "taylor_green_energy_error_predicted": taylor_green_energy_error(rate, tg.final.t),
                "taylor_green_tolerance": TAYLOR_GREEN_TOL,
                "taylor_green_balance_defect": energy_balance_defect(tg.series),
            }
        )
        if energy_err > TAYLOR_GREEN_TOL:
            summary["reason"] = (
                f"Taylor-Green energy {energy_err:.3e} off the continuum at t={tg.final.t:.4g}, "
                f"above {TAYLOR_GREEN_TOL:g}; refine the grid"
            )
        for t, e in zip(tg.series.column("t"), tg.series.column("normX2")):
            rows.append(["taylor_green_energy", t, e])
    except (CflViolationError, FlowInstabilityError) as exc:
        summary["taylor_green_error"] = str(exc)

    # random divergence-free data: energy never increases
    monotone_count = 0
    for s in range(config.verify.samples):
        x = projector.project(band_limited_random(manifold, config.initial.seed + s))
        try:
            res = run(x, ns_cfg, manifold, op, projector=projector, lambda_max=lam)
        except (CflViolationError, FlowInstabilityError) as exc:
            logger.warning("VerifyDiag: random NS sample %d failed: %s", s, exc)
            continue
        if is_non_increasing(res.series.column("normX2"), rtol=1e-10):
            monotone_count += 1
    summary["random_ns_monotone"] = f"{monotone_count}/{config.verify.samples}"

    passed = div_ok and energy_ok and tg_ok and monotone_count == config.verify.samples
    return VerifyOutcome(
        suite="ns-decay",
        passed=passed,
        header=("series", "t", "value"),
        rows=rows,
        summary=summary,
    )


def run_verify_pipeline(suite: str, config: RunConfig) -> VerifyOutcome:
    if suite == "yano":
        return verify_yano(config)
    if suite == "energy":
        return verify_energy(config)
    if suite == "einstein":
        return verify_einstein_case(config)
    if suite == "ns-decay":
        return verify_ns_decay(config)
    raise ValueError(f"Unknown verify suite {suite!r}, expected one of {SUITES}")


def emit_verify(outcome: VerifyOutcome, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    stem = outcome.suite.replace("-", "_")
    if outcome.rows:
        write_csv(out_dir / f"verify_{stem}.csv", outcome.header, outcome.rows)
    if outcome.series:
        write_csv(out_dir / f"{stem}_series.csv", outcome.series_header, outcome.series)
    summary = {"suite": outcome.suite, "passed": outcome.passed, **outcome.summary}
    return write_key_values(out_dir / f"verify_{stem}.txt", summary)


def require_passed(outcome: VerifyOutcome) -> VerifyOutcome:
    if not outcome.passed:
        reason = outcome.summary.get("reason", "see the suite report")
        raise VerificationError(f"verify {outcome.suite} failed: {reason}")
    return outcome
