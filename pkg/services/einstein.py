"""Einstein-case machinery: the scalar heat equation behind gradient flows.

On an Einstein manifold (Ric = (R/m) g, R constant) the flow of a field
X = K + grad h, K Killing, reduces to the scalar equation

    f' = 2 Delta f + (2R/m) f + phi_X.

Its mean a(t) = int f obeys a' = (2R/m) a + int phi_X in closed form and
its norm b(t) = int f^2 is controlled through the first nonzero eigenvalue
lambda_1 of -Delta. Both are checked here against the discrete solution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla

from config import DEFAULT_DT_SAFETY, DEFAULT_INTEGRATOR, DENSE_THRESHOLD
from services.fields import gradient
from services.flow import FlowInstabilityError, integrate_step, stable_dt
from services.manifold import ManifoldData, integrate_scalar
from services.operator import (
    FlowOperator,
    assemble_scalar_laplacian,
    lambda_max_estimate,
    scalar_lambda_max,
)

logger = logging.getLogger(__name__)

LAMBDA1_ITERATIVE_COUNT = 8
MEAN_ZERO_RTOL = 1e-6
EXACT_EINSTEIN_TOL = 1e-8


class NotEinsteinError(ValueError):
    pass


@dataclass(frozen=True)
class EinsteinReport:
    is_einstein: bool
    R_const: float
    deviation: float
    m: int
    tolerance: float

    @property
    def positive(self) -> bool:
        return self.is_einstein and self.R_const > 0.0

    def as_text(self) -> str:
        return "\n".join(
            [
                f"einstein: {str(self.is_einstein).lower()}",
                f"R: {self.R_const:.6f}",
                f"deviation: {self.deviation:.6e}",
                f"tolerance: {self.tolerance:.6e}",
                f"m: {self.m}",
                f"positive_scalar_curvature: {str(self.positive).lower()}",
            ]
        )


@dataclass(frozen=True, eq=False)
class EigenvalueEstimate:
    lambda1: float
    residual: float
    eigenfunction: np.ndarray
    lichnerowicz_bound: float | None

    @property
    def lichnerowicz_gap(self) -> float | None:
        if self.lichnerowicz_bound is None:
            return None
        return self.lambda1 - self.lichnerowicz_bound


@dataclass(frozen=True)
class ScalarHeatConfig:
    t_end: float
    dt_safety: float = DEFAULT_DT_SAFETY
    integrator: str = DEFAULT_INTEGRATOR
    sample_stride: int = 10

    def validate(self) -> None:
        if self.t_end <= 0.0:
            raise ValueError(f"t_end must be positive, got {self.t_end}")
        if not 0.0 < self.dt_safety <= 1.0:
            raise ValueError(f"dt_safety must lie in (0, 1], got {self.dt_safety}")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError(f"Unknown integrator {self.integrator!r}")
        if self.sample_stride < 1:
            raise ValueError(f"sample_stride must be >= 1, got {self.sample_stride}")


@dataclass(frozen=True, eq=False)
class ScalarHeatState:
    t: float
    f: np.ndarray
    phi: np.ndarray
    c: float


@dataclass(frozen=True, eq=False)
class ScalarHeatResult:
    trajectory: list[ScalarHeatState]
    times: np.ndarray
    a: np.ndarray
    b: np.ndarray
    b_prime: np.ndarray
    grad_energy: np.ndarray
    dt: float

    @property
    def final(self) -> ScalarHeatState:
        return self.trajectory[-1]


@dataclass(frozen=True, eq=False)
class MeanEvolutionReport:
    a_closed_form: np.ndarray
    max_abs_error: float
    max_rel_error: float
    c_X: float
    a_constant: float
    constant_drift: float | None


@dataclass(frozen=True, eq=False)
class L2BoundReport:
    norms: np.ndarray
    bound_printed: np.ndarray
    bound_norm: np.ndarray
    printed_holds: bool
    norm_holds: bool
    active: str
    b_slack: np.ndarray | None
    min_b_slack: float | None


@dataclass(frozen=True, eq=False)
class ReductionReport:
    times: np.ndarray
    discrepancy: np.ndarray
    max_discrepancy: float
    vector_norms: np.ndarray
    scalar_norms: np.ndarray


# ---------------------------------------------------------------------------
# Einstein condition and lambda_1
# ---------------------------------------------------------------------------

def verify_einstein(manifold: ManifoldData) -> EinsteinReport:
    """max |Ric - (R/m) g| with R the volume mean of the scalar curvature.

    In two dimensions Ric is always pointwise proportional to g, so the
    deviation measured against the mean R is what catches non-constant R.
    """
    m = manifold.dim
    curv = manifold.curvature
    w = manifold.metric.weights
    r_const = float(np.dot(curv.scalar, w) / w.sum())
    g = manifold.metric.g
    deviation = float(np.abs(curv.ric - (r_const / m) * g).max())
    scale = max(1.0, float(np.abs(g).max()))
    if manifold.exact_geometry:
        tol = EXACT_EINSTEIN_TOL * scale
    else:
        tol = manifold.h_max**2 * scale
    report = EinsteinReport(
        is_einstein=deviation <= tol,
        R_const=r_const,
        deviation=deviation,
        m=m,
        tolerance=tol,
    )
    logger.info(
        "EinsteinDiag: kind=%s einstein=%s R=%.6f deviation=%.3e tol=%.1e",
        manifold.kind,
        report.is_einstein,
        r_const,
        deviation,
        tol,
    )
    return report


def require_positive_einstein(manifold: ManifoldData) -> EinsteinReport:
    report = verify_einstein(manifold)
    if not report.is_einstein:
        raise NotEinsteinError(f"{manifold.kind} is not Einstein: deviation {report.deviation:.3e}")
    if report.R_const <= 0.0:
        raise NotEinsteinError(f"{manifold.kind} is Einstein with R={report.R_const:.3g}; positive R required")
    return report


def lambda1(manifold: ManifoldData) -> EigenvalueEstimate:
    """First nonzero eigenvalue of -Delta_h on mean-zero functions."""
    lap = assemble_scalar_laplacian(manifold)
    w = manifold.metric.weights
    n = manifold.n_nodes
    if n <= DENSE_THRESHOLD:
        mu, vecs = scipy.linalg.eigh(lap.stiffness.toarray(), lap.mass.toarray())
    else:
        mu, vecs = spla.eigsh(lap.stiffness, k=LAMBDA1_ITERATIVE_COUNT, M=lap.mass, sigma=-1e-2, which="LM")
        order = np.argsort(mu)
        mu, vecs = mu[order], vecs[:, order]

    vol = w.sum()
    for k in range(len(mu)):
        v = vecs[:, k]
        norm = math.sqrt(float(np.dot(w, v * v)))
        mean_rel = abs(float(np.dot(w, v))) / (math.sqrt(vol) * norm)
        if mean_rel > MEAN_ZERO_RTOL:
            continue
        r = lap.stiffness @ v - mu[k] * (w * v)
        residual = float(np.linalg.norm(r)) / max(norm, 1e-300)
        report = verify_einstein(manifold)
        bound = report.R_const / (manifold.dim - 1) if report.positive else None
        est = EigenvalueEstimate(lambda1=float(mu[k]), residual=residual, eigenfunction=v / norm, lichnerowicz_bound=bound)
        logger.info(
            "EinsteinDiag: lambda1=%.6f residual=%.2e lichnerowicz_bound=%s",
            est.lambda1,
            residual,
            "skipped (R <= 0)" if bound is None else f"{bound:.6f}",
        )
        return est
    raise RuntimeError(f"No mean-zero eigenfunction among the {len(mu)} computed eigenpairs")


# ---------------------------------------------------------------------------
# scalar heat equation
# ---------------------------------------------------------------------------

def scalar_heat_run(
    phi: np.ndarray,
    c: float,
    config: ScalarHeatConfig,
    manifold: ManifoldData,
    f0: np.ndarray | None = None,
) -> ScalarHeatResult:
    """f' = 2 Delta f + (2R/m) f + phi with f(0) = c (or ``f0``)."""
    config.validate()
    report = require_positive_einstein(manifold)
    m = manifold.dim
    growth = 2.0 * report.R_const / m
    lap = assemble_scalar_laplacian(manifold)
    w = manifold.metric.weights
    phi = np.asarray(phi, dtype=float)
    f = np.full(manifold.n_nodes, float(c)) if f0 is None else np.array(f0, dtype=float, copy=True)

    def rhs(u: np.ndarray) -> np.ndarray:
        return 2.0 * lap.apply(u) + growth * u + phi

    dt = stable_dt(2.0 * scalar_lambda_max(lap), config.integrator, config.dt_safety)
    n_steps = max(1, math.ceil(config.t_end / dt))
    dt = config.t_end / n_steps

    def sample(u: np.ndarray) -> tuple[float, float, float, float]:
        a = float(np.dot(w, u))
        b = float(np.dot(w, u * u))
        grad_e = float(u @ (lap.stiffness @ u))
        # exact b' of the semidiscrete system
        b_prime = -4.0 * grad_e + 2.0 * growth * b + 2.0 * float(np.dot(w, u * phi))
        return a, b, b_prime, grad_e

    times, a_vals, b_vals, bp_vals, ge_vals = [], [], [], [], []
    trajectory = []
    t = 0.0
    for step in range(n_steps + 1):
        if step % config.sample_stride == 0 or step == n_steps:
            a, b, bp, ge = sample(f)
            times.append(t)
            a_vals.append(a)
            b_vals.append(b)
            bp_vals.append(bp)
            ge_vals.append(ge)
            trajectory.append(ScalarHeatState(t=t, f=f.copy(), phi=phi, c=float(c)))
        if step == n_steps:
            break
        f = integrate_step(rhs, f, dt, config.integrator)
        t = (step + 1) * dt
        if not np.isfinite(f).all():
            raise FlowInstabilityError(f"Scalar heat run blew up at t={t:.6g}")

    logger.info(
        "EinsteinDiag: scalar heat run steps=%d dt=%.3e a(T)=%.6e b(T)=%.6e",
        n_steps,
        dt,
        a_vals[-1],
        b_vals[-1],
    )
    return ScalarHeatResult(
        trajectory=trajectory,
        times=np.array(times),
        a=np.array(a_vals),
        b=np.array(b_vals),
        b_prime=np.array(bp_vals),
        grad_energy=np.array(ge_vals),
        dt=dt,
    )


def mean_closed_form(times: np.ndarray, a0: float, phi_integral: float, r_const: float, m: int) -> np.ndarray:
    """[a0 + (m/2R) int phi] exp(2R t/m) - (m/2R) int phi."""
    shift = m / (2.0 * r_const) * phi_integral
    return (a0 + shift) * np.exp(2.0 * r_const / m * np.asarray(times)) - shift


def mean_evolution_check(
    result: ScalarHeatResult,
    phi: np.ndarray,
    c: float,
    manifold: ManifoldData,
    config: ScalarHeatConfig | None = None,
) -> MeanEvolutionReport:
    """Measured a(t) against the closed form; with ``config`` also reruns at c = c_X."""
    report = require_positive_einstein(manifold)
    m, r_const = manifold.dim, report.R_const
    vol = manifold.volume
    phi_int = integrate_scalar(np.asarray(phi, dtype=float), manifold)
    a0 = float(result.a[0])

    closed = mean_closed_form(result.times, a0, phi_int, r_const, m)
    abs_err = float(np.max(np.abs(result.a - closed)))
    scale = float(np.max(np.abs(closed)))
    rel_err = abs_err / scale if scale > 0.0 else abs_err

    c_x = -m / (2.0 * r_const * vol) * phi_int
    a_const = -m / (2.0 * r_const) * phi_int
    drift = None
    if config is not None:
        const_run = scalar_heat_run(phi, c_x, config, manifold)
        denom = abs(a_const) if a_const != 0.0 else 1.0
        drift = float(np.max(np.abs(const_run.a - a_const))) / denom

    logger.info(
        "EinsteinDiag: mean evolution c=%.4g abs_err=%.3e rel_err=%.3e c_X=%.6e drift=%s",
        c,
        abs_err,
        rel_err,
        c_x,
        "n/a" if drift is None else f"{drift:.3e}",
    )
    return MeanEvolutionReport(
        a_closed_form=closed,
        max_abs_error=abs_err,
        max_rel_error=rel_err,
        c_X=c_x,
        a_constant=a_const,
        constant_drift=drift,
    )


def l2_bound(times: np.ndarray, start: float, phi_norm: float, kappa: float) -> np.ndarray:
    steady = phi_norm / (2.0 * kappa)
    return steady + (start - steady) * np.exp(-2.0 * kappa * np.asarray(times))


def l2_bound_check(
    result: ScalarHeatResult,
    phi: np.ndarray,
    c: float,
    lam1: float,
    manifold: ManifoldData,
    rtol: float = 1e-6,
) -> L2BoundReport:
    """||f_t||_2 against the decay bound with both transient coefficients.

    The printed form starts from c * Vol; the norm form starts from
    ||f_0||_2. The differential inequality for b(t) needs mean-zero f and
    is only evaluated then.
    """
    report = require_positive_einstein(manifold)
    kappa = lam1 - report.R_const / manifold.dim
    if kappa <= 0.0:
        raise ValueError(f"lambda1={lam1:.6f} must exceed R/m={report.R_const / manifold.dim:.6f}")
    w = manifold.metric.weights
    phi = np.asarray(phi, dtype=float)
    phi_norm = math.sqrt(float(np.dot(w, phi * phi)))
    norms = np.sqrt(np.maximum(result.b, 0.0))

    vol = manifold.volume
    bound_printed = l2_bound(result.times, c * vol, phi_norm, kappa)
    bound_norm = l2_bound(result.times, float(norms[0]), phi_norm, kappa)
    margin = rtol * max(float(norms.max()), phi_norm, 1e-300)
    printed_holds = bool(np.all(norms <= bound_printed + margin))
    norm_holds = bool(np.all(norms <= bound_norm + margin))
    active = "printed" if float(bound_printed[-1]) <= float(bound_norm[-1]) else "norm"

    slack = None
    min_slack = None
    means = result.a / vol
    if np.all(np.abs(means) <= MEAN_ZERO_RTOL * max(float(norms.max()), 1.0)):
        rhs = -4.0 * kappa * result.b + 2.0 * np.sqrt(np.maximum(result.b, 0.0)) * phi_norm
        slack = rhs - result.b_prime
        min_slack = float(slack.min())

    logger.info(
        "EinsteinDiag: L2 bound printed=%s norm=%s active=%s min_b_slack=%s",
        printed_holds,
        norm_holds,
        active,
        "n/a (mean not zero)" if min_slack is None else f"{min_slack:.3e}",
    )
    return L2BoundReport(
        norms=norms,
        bound_printed=bound_printed,
        bound_norm=bound_norm,
        printed_holds=printed_holds,
        norm_holds=norm_holds,
        active=active,
        b_slack=slack,
        min_b_slack=min_slack,
    )


def gradient_flow_reduction_check(
    h0: np.ndarray,
    manifold: ManifoldData,
    op: FlowOperator,
    t_end: float,
    killing: np.ndarray | None = None,
    samples: int = 10,
    dt_safety: float = DEFAULT_DT_SAFETY,
    integrator: str = DEFAULT_INTEGRATOR,
) -> ReductionReport:
    """Vector flow from K + grad h0 against K + grad f_t, f_t the scalar flow from h0.

    Both systems advance side by side with the same step.
    """

    report = require_positive_einstein(manifold)
    growth = 2.0 * report.R_const / manifold.dim
    lap = assemble_scalar_laplacian(manifold)
    k_field = manifold.zeros_vector() if killing is None else np.asarray(killing, dtype=float)

    f = np.array(h0, dtype=float, copy=True)
    x = k_field + gradient(f, manifold)
    x0_norm = max(op.norm(x), 1e-300)

    def scalar_rhs(u: np.ndarray) -> np.ndarray:
        return 2.0 * lap.apply(u) + growth * u

    lam = max(lambda_max_estimate(op), 2.0 * scalar_lambda_max(lap))
    dt = stable_dt(lam, integrator, dt_safety)
    n_steps = max(samples, math.ceil(t_end / dt))
    n_steps = samples * math.ceil(n_steps / samples)
    dt = t_end / n_steps
    stride = n_steps // samples

    times, disc, xn, fn = [], [], [], []

    def record(t: float) -> None:
        diff = x - k_field - gradient(f, manifold)
        times.append(t)
        disc.append(op.norm(diff) / x0_norm)
        xn.append(op.norm(x))
        fn.append(math.sqrt(float(np.dot(manifold.metric.weights, f * f))))

    record(0.0)
    for step in range(1, n_steps + 1):
        x = integrate_step(op.apply, x, dt, integrator)
        f = integrate_step(scalar_rhs, f, dt, integrator)
        if step % stride == 0:
            record(step * dt)

    disc_arr = np.array(disc)
    logger.info(
        "EinsteinDiag: gradient reduction max discrepancy=%.3e over t in [0, %.3g]",
        float(disc_arr.max()),
        t_end,
    )
    return ReductionReport(
        times=np.array(times),
        discrepancy=disc_arr,
        max_discrepancy=float(disc_arr.max()),
        vector_norms=np.array(xn),
        scalar_norms=np.array(fn),
    )
