"""Time integration of the vector heat flow and its variants.

Variants:

- ``main``: x' = L_h x;
- ``normalized``: a main step followed by renormalization to unit M-norm;
- ``bochner_yano``: x' = (Delta + Ric) x on divergence-free fields, with a
  Leray projection after every step;
- ``navier_stokes``: x' = L_h x - nabla_X X, Leray projection after every
  step, advective CFL enforced.

All integrators are explicit; the step size comes from the largest
eigenvalue of -L_h.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from config import (
    DEFAULT_DT_SAFETY,
    DEFAULT_INTEGRATOR,
    DEFAULT_K_MAX,
    DEFAULT_MONITOR_STRIDE,
    ERR_CONVERGENCE_RATIO,
)
from services.fields import (
    EnergyReport,
    advection,
    covariant_derivative,
    covariant_derivative_tensor,
    divergence,
    energy_report,
    tensor_norm2,
)
from services.manifold import ManifoldData, integrate_scalar, l2_inner
from services.operator import FlowOperator, KillingBasis, kernel_distance, lambda_max_estimate, project_killing
from services.poisson import LerayProjector

logger = logging.getLogger(__name__)

VARIANTS = ("main", "normalized", "bochner_yano", "navier_stokes")
INTEGRATORS = ("euler", "rk4")
# stability interval of the method on the negative real axis
STABILITY_LIMIT = {"euler": 2.0, "rk4": 2.7}
INTEGRATOR_ORDER = {"euler": 1, "rk4": 4}
MAX_K = 2
T_END_DECADES = 12.0
MONOTONE_RTOL = 1e-12

MONITOR_COLUMNS = (
    "t",
    "u0",
    "u1",
    "u2",
    "v0",
    "v1",
    "v2",
    "frakL",
    "E_bochner",
    "normX2",
    "E_int",
    "err_partial",
)


class FlowInstabilityError(RuntimeError):
    def __init__(self, message: str, last_state: "FlowState | None" = None, series: "MonitorSeries | None" = None):
        super().__init__(message)
        self.last_state = last_state
        self.series = series


class CflViolationError(RuntimeError):
    pass


class NotConvergedError(RuntimeError):
    def __init__(self, message: str, estimate: "ErrEstimate | None" = None):
        super().__init__(message)
        self.estimate = estimate


@dataclass(frozen=True)
class FlowConfig:
    variant: str = "main"
    integrator: str = DEFAULT_INTEGRATOR
    dt_safety: float = DEFAULT_DT_SAFETY
    t_end: float | None = None
    monitor_stride: int = DEFAULT_MONITOR_STRIDE
    k_max: int = DEFAULT_K_MAX
    checkpoint_stride: int = 0
    kernel_tol: float | None = None

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown flow variant {self.variant!r}, expected one of {VARIANTS}")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"Unknown integrator {self.integrator!r}, expected one of {INTEGRATORS}")
        if not 0.0 < self.dt_safety <= 1.0:
            raise ValueError(f"dt_safety must lie in (0, 1], got {self.dt_safety}")
        if self.t_end is not None and self.t_end <= 0.0:
            raise ValueError(f"t_end must be positive, got {self.t_end}")
        if self.monitor_stride < 1:
            raise ValueError(f"monitor_stride must be >= 1, got {self.monitor_stride}")
        if not 0 <= self.k_max <= MAX_K:
            raise ValueError(f"k_max must lie in [0, {MAX_K}], got {self.k_max}")
        if self.checkpoint_stride < 0:
            raise ValueError(f"checkpoint_stride must be >= 0, got {self.checkpoint_stride}")
        if self.kernel_tol is not None and self.kernel_tol <= 0.0:
            raise ValueError(f"kernel_tol must be positive, got {self.kernel_tol}")


@dataclass(frozen=True, eq=False)
class FlowState:
    t: float
    x: np.ndarray
    step: int = 0
    energy: EnergyReport | None = None


@dataclass(frozen=True)
class MonitorRow:
    t: float
    u: tuple[float, ...]
    v: tuple[float, ...]
    frakL: float
    E_bochner: float
    normX2: float
    E_int: float = 0.0
    err_partial: float = 0.0
    dissipation: float = 0.0

    def values(self) -> list[float]:
        u = list(self.u) + [math.nan] * (MAX_K + 1 - len(self.u))
        v = list(self.v) + [math.nan] * (MAX_K + 1 - len(self.v))
        return [self.t, *u, *v, self.frakL, self.E_bochner, self.normX2, self.E_int, self.err_partial]


@dataclass
class MonitorSeries:
    rows: list[MonitorRow] = field(default_factory=list)

    columns = MONITOR_COLUMNS

    def append(self, row: MonitorRow) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        idx = MONITOR_COLUMNS.index(name)
        return np.array([row.values()[idx] for row in self.rows])

    def as_table(self) -> list[list[float]]:
        return [row.values() for row in self.rows]

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True, eq=False)
class RunResult:
    checkpoints: list[FlowState]
    series: MonitorSeries
    final: FlowState
    dt: float
    lambda_max: float
    energy_violations: int
    u0_positive: bool
    limit_error: float | None = None


@dataclass(frozen=True)
class ErrEstimate:
    err_time_integral: float
    err_final_norm: float
    agreement: float
    tail_energy: float
    converged: bool


# ---------------------------------------------------------------------------
# integrators
# ---------------------------------------------------------------------------

def integrate_step(rhs: Callable[[np.ndarray], np.ndarray], x: np.ndarray, dt: float, integrator: str) -> np.ndarray:
    """One explicit step of x' = rhs(x); shared with the scalar heat equation."""
    if integrator == "euler":
        return x + dt * rhs(x)
    if integrator == "rk4":
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * dt * k1)
        k3 = rhs(x + 0.5 * dt * k2)
        k4 = rhs(x + dt * k3)
        return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    raise ValueError(f"Unknown integrator {integrator!r}")


def stable_dt(lambda_max: float, integrator: str, dt_safety: float) -> float:
    if lambda_max <= 0.0:
        # nothing decays: any step is stable, keep it at unit order
        return dt_safety
    return dt_safety * STABILITY_LIMIT[integrator] / lambda_max


def default_t_end(spectral_gap: float) -> float:
    if spectral_gap <= 0.0:
        raise ValueError(f"Spectral gap must be positive to pick t_end, got {spectral_gap}")
    return T_END_DECADES / spectral_gap


def dissipation(op: FlowOperator, x: np.ndarray) -> float:
    """-<X, L X>_M: equals 2 frakL_h for the main operator."""
    return -op.inner(x, op.apply(x))


def _checked(state: FlowState, x_new: np.ndarray, dt: float) -> FlowState:
    if not np.isfinite(x_new).all():
        raise FlowInstabilityError(
            f"Non-finite field after step {state.step + 1} at t={state.t + dt:.6g}",
            last_state=state,
        )
    return FlowState(t=state.t + dt, x=x_new, step=state.step + 1)


# ---------------------------------------------------------------------------
# steppers
# ---------------------------------------------------------------------------

def step_main(state: FlowState, op: FlowOperator, dt: float, integrator: str = DEFAULT_INTEGRATOR) -> FlowState:
    x_new = integrate_step(op.apply, state.x, dt, integrator)
    return _checked(state, x_new, dt)


def step_normalized(state: FlowState, op: FlowOperator, dt: float, integrator: str = DEFAULT_INTEGRATOR) -> FlowState:
    """Main step, then renormalize to unit M-norm."""
    nxt = step_main(state, op, dt, integrator)
    norm = op.norm(nxt.x)
    if not norm > 1e-300:
        raise FlowInstabilityError(f"Vanishing norm in normalized flow at t={nxt.t:.6g}", last_state=state)
    return replace(nxt, x=nxt.x / norm)


def normalized_reaction_defect(state: FlowState, op: FlowOperator, dt: float, integrator: str = DEFAULT_INTEGRATOR) -> float:
    """||renormalized step - step of Y' = L Y + E(Y) Y / |Y|^2||_M.

    The two forms of the normalized flow agree up to the integrator error.
    """
    renorm = step_normalized(state, op, dt, integrator).x

    def reaction(y: np.ndarray) -> np.ndarray:
        return op.apply(y) + (dissipation(op, y) / op.inner(y, y)) * y

    direct = integrate_step(reaction, state.x, dt, integrator)
    return op.norm(renorm - direct)


def step_bochner_yano(
    state: FlowState,
    op: FlowOperator,
    projector: LerayProjector,
    dt: float,
    integrator: str = DEFAULT_INTEGRATOR,
) -> FlowState:
    nxt = step_main(state, op, dt, integrator)
    return replace(nxt, x=projector.project(nxt.x))


def physical_spacing(manifold: ManifoldData) -> float:
    """Smallest metric length of a grid step."""
    g = manifold.metric.g
    return min(
        float((manifold.grid.spacings[d] * np.sqrt(g[d, d])).min()) for d in range(manifold.dim)
    )


def cfl_limit(x: np.ndarray, manifold: ManifoldData, dt_safety: float) -> float:
    speed = float(np.sqrt(np.einsum("ijn,in,jn->n", manifold.metric.g, x, x)).max())
    if speed == 0.0:
        return math.inf
    return dt_safety * physical_spacing(manifold) / speed


def step_navier_stokes(
    state: FlowState,
    op: FlowOperator,
    projector: LerayProjector,
    dt: float,
    integrator: str = DEFAULT_INTEGRATOR,
    dt_safety: float = DEFAULT_DT_SAFETY,
) -> FlowState:
    manifold = op.manifold
    limit = cfl_limit(state.x, manifold, dt_safety)
    if dt > limit:
        raise CflViolationError(f"dt={dt:.3e} exceeds advective limit {limit:.3e} at t={state.t:.6g}")

    def rhs(x: np.ndarray) -> np.ndarray:
        return op.apply(x) - advection(x, manifold)

    x_new = integrate_step(rhs, state.x, dt, integrator)
    nxt = _checked(state, x_new, dt)
    return replace(nxt, x=projector.project(nxt.x))


# ---------------------------------------------------------------------------
# monitors
# ---------------------------------------------------------------------------

def monitors(state: FlowState, manifold: ManifoldData, k_max: int = DEFAULT_K_MAX) -> MonitorRow:
    """u_k = int |nabla^k X|^2, v_k = int |nabla^k div X|^2, k <= k_max, plus energies."""
    if not 0 <= k_max <= MAX_K:
        raise ValueError(f"k_max must lie in [0, {MAX_K}], got {k_max}")
    x = state.x
    rep = state.energy or energy_report(x, manifold)

    u_vals = [l2_inner(x, x, manifold)]
    nab = None
    if k_max >= 1:
        nab = covariant_derivative(x, manifold)
        u_vals.append(integrate_scalar(tensor_norm2(nab, 2, manifold), manifold))
    if k_max >= 2:
        nab2 = covariant_derivative_tensor(nab, 2, manifold)
        u_vals.append(integrate_scalar(tensor_norm2(nab2, 3, manifold), manifold))

    div = divergence(x, manifold)
    v_vals = [integrate_scalar(div * div, manifold)]
    grad_div = None
    if k_max >= 1:
        grad_div = covariant_derivative_tensor(div, 0, manifold)
        v_vals.append(integrate_scalar(tensor_norm2(grad_div, 1, manifold), manifold))
    if k_max >= 2:
        hess_div = covariant_derivative_tensor(grad_div, 1, manifold)
        v_vals.append(integrate_scalar(tensor_norm2(hess_div, 2, manifold), manifold))

    return MonitorRow(
        t=state.t,
        u=tuple(u_vals),
        v=tuple(v_vals),
        frakL=rep.frakL,
        E_bochner=rep.E_bochner,
        normX2=u_vals[0],
    )


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def _initial_state(x0: np.ndarray, config: FlowConfig, op: FlowOperator, projector: LerayProjector | None) -> FlowState:
    x = np.array(x0, dtype=float, copy=True)
    if config.variant in ("bochner_yano", "navier_stokes"):
        if projector is None:
            raise ValueError(f"Variant {config.variant} needs a Leray projector")
        x = projector.project(x)
    if config.variant == "normalized":
        norm = op.norm(x)
        if not norm > 0.0:
            raise ValueError("Normalized flow needs a nonzero initial field")
        x = x / norm
    return FlowState(t=0.0, x=x)


def _stepper(config: FlowConfig, op: FlowOperator, projector: LerayProjector | None) -> Callable[[FlowState, float], FlowState]:
    integ = config.integrator
    if config.variant == "main":
        return lambda s, dt: step_main(s, op, dt, integ)
    if config.variant == "normalized":
        return lambda s, dt: step_normalized(s, op, dt, integ)
    if config.variant == "bochner_yano":
        return lambda s, dt: step_bochner_yano(s, op, projector, dt, integ)
    return lambda s, dt: step_navier_stokes(s, op, projector, dt, integ, config.dt_safety)


def run(
    x0: np.ndarray,
    config: FlowConfig,
    manifold: ManifoldData,
    op: FlowOperator,
    *,
    projector: LerayProjector | None = None,
    basis: KillingBasis | None = None,
    lambda_max: float | None = None,
) -> RunResult:
    """Integrate to ``config.t_end``, logging monitors every ``monitor_stride`` steps."""
    config.validate()
    if config.t_end is None:
        raise ValueError("t_end must be set before run (see default_t_end)")

    lam = lambda_max_estimate(op) if lambda_max is None else float(lambda_max)
    dt = stable_dt(lam, config.integrator, config.dt_safety)
    n_steps = max(1, math.ceil(config.t_end / dt))
    dt = config.t_end / n_steps
    logger.info(
        "FlowDiag: start variant=%s integrator=%s kind=%s lambda_max=%.4e dt=%.4e steps=%d t_end=%.4g",
        config.variant,
        config.integrator,
        manifold.kind,
        lam,
        dt,
        n_steps,
        config.t_end,
    )

    stepper = _stepper(config, op, projector)
    state = _initial_state(x0, config, op, projector)
    norm0 = op.inner(state.x, state.x)
    diss = dissipation(op, state.x)
    diss0 = diss
    e_int = 0.0
    violations = 0
    u0_positive = True

    series = MonitorSeries()
    first = monitors(state, manifold, config.k_max)
    series.append(replace(first, err_partial=0.5 * norm0, dissipation=diss))
    checkpoints = [state]

    for _ in range(n_steps):
        try:
            nxt = stepper(state, dt)
        except FlowInstabilityError as exc:
            exc.series = series
            logger.error("FlowDiag: abort at t=%.6g: %s", state.t, exc)
            raise
        except CflViolationError as exc:
            logger.error("FlowDiag: abort at t=%.6g: %s", state.t, exc)
            raise FlowInstabilityError(str(exc), last_state=state, series=series) from exc
        diss_new = dissipation(op, nxt.x)
        if not math.isfinite(diss_new):
            raise FlowInstabilityError(f"Non-finite energy at t={nxt.t:.6g}", last_state=state, series=series)

        e_int += 0.5 * dt * (diss + diss_new)
        if config.variant == "main":
            floor = 1e-14 * lam * op.inner(nxt.x, nxt.x)
            if diss_new > diss + MONOTONE_RTOL * max(diss, diss0) + floor:
                violations += 1
        state, diss = nxt, diss_new

        last = state.step == n_steps
        if state.step % config.monitor_stride == 0 or last:
            row = monitors(state, manifold, config.k_max)
            row = replace(row, E_int=e_int, err_partial=0.5 * norm0 - e_int, dissipation=diss)
            series.append(row)
            if norm0 > 0.0 and not row.u[0] > 0.0:
                u0_positive = False
            logger.info(
                "FlowDiag: t=%.5f u0=%.6e frakL=%.6e E_int=%.6e err_partial=%.6e",
                row.t,
                row.u[0],
                row.frakL,
                row.E_int,
                row.err_partial,
            )
        if (config.checkpoint_stride and state.step % config.checkpoint_stride == 0) or last:
            checkpoints.append(state)

    if violations:
        logger.warning("FlowDiag: energy increased on %d of %d steps", violations, n_steps)

    limit_error = None
    if basis is not None:
        target = project_killing(checkpoints[0].x, basis)
        if config.variant == "normalized" and op.norm(target) > 0.0:
            target = target / op.norm(target)
        scale = op.norm(target) if op.norm(target) > 0.0 else op.norm(checkpoints[0].x)
        limit_error = op.norm(state.x - target) / max(scale, 1e-300)
        logger.info(
            "FlowDiag: final vs kernel projection of X0: rel=%.3e kernel_distance=%.3e",
            limit_error,
            kernel_distance(state.x, basis) if op.norm(state.x) > 0.0 else 0.0,
        )

    return RunResult(
        checkpoints=checkpoints,
        series=series,
        final=state,
        dt=dt,
        lambda_max=lam,
        energy_violations=violations,
        u0_positive=u0_positive,
        limit_error=limit_error,
    )


# ---------------------------------------------------------------------------
# post-run analysis
# ---------------------------------------------------------------------------

def err_estimate(series: MonitorSeries, kernel_rate: float = 0.0) -> ErrEstimate:
    """Err = 1/2 |X0|^2 - int_0^T E dt, cross-checked against 1/2 |X_T|^2.

    ``kernel_rate`` is the largest |lambda| inside the Killing kernel; energy
    that decays no faster than that does not count as an unconverged tail.
    """
    if len(series) < 2:
        raise ValueError("Err needs at least two monitor rows")
    first, last = series.rows[0], series.rows[-1]
    err_int = 0.5 * first.normX2 - last.E_int
    err_final = 0.5 * last.normX2
    half0 = 0.5 * first.normX2
    agreement = abs(err_int - err_final) / half0 if half0 > 0.0 else 0.0

    # Convergence is looser than a plain tail-ratio test: the discrete Killing
    # fields are eigenfields with tiny nonzero |lambda| (O(h^4) on S^2), so
    # dissipation up to kernel_rate * |X_T|^2 is the kernel's own decay, not
    # an unconverged transient.
    allowed = ERR_CONVERGENCE_RATIO * first.dissipation + 1.01 * kernel_rate * last.normX2
    converged = first.dissipation == 0.0 or last.dissipation <= allowed
    estimate = ErrEstimate(
        err_time_integral=err_int,
        err_final_norm=err_final,
        agreement=agreement,
        tail_energy=last.dissipation,
        converged=converged,
    )
    logger.info(
        "FlowDiag: Err time-integral=%.8e final-norm=%.8e agreement=%.3e tail=%.3e converged=%s",
        err_int,
        err_final,
        agreement,
        last.dissipation,
        converged,
    )
    if not converged:
        raise NotConvergedError(
            f"Tail energy {last.dissipation:.3e} above {allowed:.3e} at t={last.t:.4g}; Err not trustworthy",
            estimate=estimate,
        )
    return estimate


@dataclass(frozen=True)
class DivergenceDecayReport:
    skipped: bool
    reason: str
    times: np.ndarray
    div_l2: np.ndarray
    monotone: bool
    rate_measured: float
    rate_expected: float
    closed_form: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_rel_error: float = math.nan


def divergence_decay_check(trajectory: list[FlowState], manifold: ManifoldData) -> DivergenceDecayReport:
    """int |div X_t|^2 along a main-flow trajectory on a Ricci-flat manifold.

    With Ric = 0, div X obeys f' = 2 Delta f. When div X0 is a single
    Laplacian eigenmode with eigenvalue mu, int |div X_t|^2 = A exp(-4 mu t),
    A = int |div X0|^2 and mu = int |grad div X0|^2 / A (2 pi^2 exp(-4t) for
    sin(x) d/dx). The measured series is compared with it at every state.
    """
    empty = np.zeros(0)
    ric_max = float(np.abs(manifold.curvature.ric).max())
    if ric_max > 1e-10:
        reason = f"Ric is not zero on {manifold.kind} (max |Ric| = {ric_max:.3e})"
        logger.info("FlowDiag: divergence decay check skipped: %s", reason)
        return DivergenceDecayReport(True, reason, empty, empty, True, math.nan, math.nan)
    if len(trajectory) < 3:
        raise ValueError("Divergence decay check needs at least three trajectory states")

    times = np.array([s.t for s in trajectory])
    divs = [divergence(s.x, manifold) for s in trajectory]
    div_l2 = np.array([integrate_scalar(d * d, manifold) for d in divs])
    scale = max(float(div_l2[0]), 1e-300)
    monotone = bool(np.all(np.diff(div_l2) <= 1e-12 * scale))

    h = times[1] - times[0]
    if not np.isclose(times[2] - times[1], h, rtol=1e-9):
        raise ValueError("Divergence decay check needs equally spaced leading states")
    measured = (-3.0 * div_l2[0] + 4.0 * div_l2[1] - div_l2[2]) / (2.0 * h)
    grad_div = covariant_derivative_tensor(divs[0], 0, manifold)
    expected = -4.0 * integrate_scalar(tensor_norm2(grad_div, 1, manifold), manifold)
    if div_l2[0] > 0.0:
        closed = div_l2[0] * np.exp(expected / div_l2[0] * times)
        max_rel = float(np.max(np.abs(div_l2 - closed) / closed))
    else:
        closed = np.zeros_like(div_l2)
        max_rel = math.nan
    logger.info(
        "FlowDiag: divergence decay |div|^2(0)=%.6e d/dt measured=%.6e expected=%.6e closed-form rel=%.3e monotone=%s",
        div_l2[0],
        measured,
        expected,
        max_rel,
        monotone,
    )
    return DivergenceDecayReport(
        False, "", times, div_l2, monotone, float(measured), float(expected), closed_form=closed, max_rel_error=max_rel
    )


def energy_identity_residual(state: FlowState, op: FlowOperator, dt: float, integrator: str = DEFAULT_INTEGRATOR) -> float:
    """|d/dt (1/2 |X|^2) + E| over one step, E integrated by Simpson's rule."""
    x0 = state.x
    x_half = integrate_step(op.apply, x0, 0.5 * dt, integrator)
    x1 = integrate_step(op.apply, x0, dt, integrator)
    e_mean = (dissipation(op, x0) + 4.0 * dissipation(op, x_half) + dissipation(op, x1)) / 6.0
    d_half_norm = 0.5 * (op.inner(x1, x1) - op.inner(x0, x0)) / dt
    return abs(d_half_norm + e_mean)


def fit_decay_rate(times: np.ndarray, norms: np.ndarray) -> float:
    """Least-squares rate r in |X_t| ~ C exp(-r t)."""
    times = np.asarray(times, dtype=float)
    norms = np.asarray(norms, dtype=float)
    if len(times) < 2 or np.any(norms <= 0.0):
        raise ValueError("Decay fit needs at least two samples with positive norms")
    slope, _intercept = np.polyfit(times, np.log(norms), 1)
    return float(-slope)


def energy_balance_defect(series: MonitorSeries) -> float:
    """max |d/dt |X|^2 + 2E| relative to max 2E, from monitor rows."""
    if len(series) < 3:
        raise ValueError("Energy balance needs at least three monitor rows")
    t = series.column("t")
    norm2 = series.column("normX2")
    diss = np.array([row.dissipation for row in series.rows])
    scale = max(float(np.max(2.0 * diss)), 1e-300)
    return float(np.max(np.abs(np.gradient(norm2, t, edge_order=2) + 2.0 * diss)) / scale)


def is_non_increasing(values: np.ndarray, rtol: float = 1e-12) -> bool:
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return True
    scale = max(float(np.max(np.abs(values))), 1e-300)
    return bool(np.all(np.diff(values) <= rtol * scale))
