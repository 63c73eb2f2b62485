import math

import numpy as np
import pytest

from services.fields import band_limited_random
from services.flow import (
    FlowConfig,
    FlowInstabilityError,
    FlowState,
    MonitorSeries,
    NotConvergedError,
    default_t_end,
    divergence_decay_check,
    energy_balance_defect,
    energy_identity_residual,
    err_estimate,
    fit_decay_rate,
    integrate_step,
    is_non_increasing,
    monitors,
    normalized_reaction_defect,
    run,
    stable_dt,
)
from services.operator import assemble_bochner_yano, evolve_spectral, kernel_distance, spectral_gap
from services.poisson import build_projector
from services.run_config import exact_gradient, killing_rotation


def _field(manifold, component, values):
    x = manifold.zeros_vector()
    x[component] = values
    return x


def _translation(manifold):
    return _field(manifold, 0, 1.0)


def _kernel_rate(basis):
    return float(np.abs(basis.eigenvalues).max())


@pytest.mark.parametrize(
    "kwargs",
    [
        {"variant": "ricci"},
        {"integrator": "rk2"},
        {"dt_safety": 0.0},
        {"dt_safety": 1.5},
        {"t_end": -1.0},
        {"monitor_stride": 0},
        {"k_max": 3},
        {"checkpoint_stride": -1},
        {"kernel_tol": 0.0},
    ],
)
def test_flow_config_validation(kwargs):
    with pytest.raises(ValueError):
        FlowConfig(**kwargs).validate()


def test_step_size_helpers():
    assert stable_dt(10.0, "euler", 0.5) == pytest.approx(0.1)
    assert stable_dt(10.0, "rk4", 1.0) == pytest.approx(0.27)
    assert stable_dt(0.0, "rk4", 0.5) == 0.5
    assert default_t_end(2.0) == pytest.approx(6.0)
    with pytest.raises(ValueError):
        default_t_end(0.0)


def test_rk4_is_fourth_order_on_a_linear_decay():
    def rhs(x):
        return -x

    errors = []
    for n in (10, 20):
        x = np.array([1.0])
        for _ in range(n):
            x = integrate_step(rhs, x, 1.0 / n, "rk4")
        errors.append(abs(x[0] - math.exp(-1.0)))
    assert math.log2(errors[0] / errors[1]) == pytest.approx(4.0, abs=0.2)
    with pytest.raises(ValueError):
        integrate_step(rhs, np.ones(1), 0.1, "leapfrog")


def test_main_flow_matches_the_spectral_oracle(torus16, torus16_op, torus16_spectrum):
    spectrum, _basis = torus16_spectrum
    x0 = band_limited_random(torus16, 12)
    cfg = FlowConfig(dt_safety=0.1, t_end=1.0, integrator="rk4", monitor_stride=10)
    result = run(x0, cfg, torus16, torus16_op)
    exact = evolve_spectral(x0, result.final.t, spectrum)
    assert result.final.t == pytest.approx(1.0)
    assert np.abs(result.final.x - exact).max() <= 1e-6 * np.abs(x0).max()
    assert result.energy_violations == 0
    assert result.u0_positive
    assert is_non_increasing(result.series.column("normX2"))


def test_err_counts_the_killing_part_of_the_initial_field(torus16, torus16_op, torus16_spectrum):
    spectrum, basis = torus16_spectrum
    x, _y = torus16.grid.coords
    x0 = _translation(torus16) + _field(torus16, 0, np.sin(x))
    t_end = default_t_end(spectral_gap(spectrum, basis))
    cfg = FlowConfig(t_end=t_end, monitor_stride=50)
    result = run(x0, cfg, torus16, torus16_op, basis=basis)

    est = err_estimate(result.series, _kernel_rate(basis))
    # only |d/dx|^2 / 2 = 2 pi^2 survives
    assert est.err_time_integral == pytest.approx(2.0 * math.pi**2, rel=1e-2)
    assert est.err_final_norm == pytest.approx(2.0 * math.pi**2, rel=1e-8)
    assert est.agreement <= 5e-3
    assert est.converged
    assert result.limit_error <= 1e-8


def test_err_vanishes_for_a_gradient_field(torus16, torus16_op, torus16_spectrum):
    spectrum, basis = torus16_spectrum
    x, _y = torus16.grid.coords
    x0 = _field(torus16, 0, np.sin(x))
    cfg = FlowConfig(t_end=default_t_end(spectral_gap(spectrum, basis)), monitor_stride=50)
    result = run(x0, cfg, torus16, torus16_op)
    est = err_estimate(result.series, _kernel_rate(basis))
    assert abs(est.err_time_integral) <= 1e-2 * 0.5 * torus16_op.inner(x0, x0)


def test_short_runs_are_not_converged(torus16, torus16_op):
    x, _y = torus16.grid.coords
    x0 = _field(torus16, 0, np.sin(x))
    result = run(x0, FlowConfig(t_end=0.1, monitor_stride=5), torus16, torus16_op)
    with pytest.raises(NotConvergedError) as excinfo:
        err_estimate(result.series)
    assert excinfo.value.estimate is not None
    assert not excinfo.value.estimate.converged

    with pytest.raises(ValueError):
        err_estimate(MonitorSeries(result.series.rows[:1]))


def test_run_needs_t_end(torus16, torus16_op):
    with pytest.raises(ValueError):
        run(_translation(torus16), FlowConfig(), torus16, torus16_op)


def test_slowest_mode_decays_at_the_spectral_gap(torus16, torus16_op, torus16_spectrum):
    spectrum, basis = torus16_spectrum
    x, _y = torus16.grid.coords
    x0 = _field(torus16, 1, np.sin(x))
    result = run(x0, FlowConfig(t_end=2.0, monitor_stride=5), torus16, torus16_op)
    norms = np.sqrt(result.series.column("normX2"))
    rate = fit_decay_rate(result.series.column("t"), norms)
    assert rate == pytest.approx(spectral_gap(spectrum, basis), rel=1e-3)


def test_normalized_flow_converges_to_the_unit_translation(torus16, torus16_op, torus16_spectrum):
    _spectrum, basis = torus16_spectrum
    x, _y = torus16.grid.coords
    x0 = _translation(torus16) + _field(torus16, 1, np.sin(x))
    cfg = FlowConfig(variant="normalized", t_end=10.0, monitor_stride=20)
    result = run(x0, cfg, torus16, torus16_op, basis=basis)

    np.testing.assert_allclose(result.series.column("normX2"), 1.0, rtol=1e-10)
    target = _translation(torus16) / (2.0 * math.pi)
    assert np.abs(result.final.x - target).max() <= 1e-3
    assert result.limit_error <= 1e-3


def test_normalized_step_agrees_with_the_reaction_form(torus16, torus16_op):
    x, _y = torus16.grid.coords
    x0 = _translation(torus16) + _field(torus16, 1, np.sin(x))
    state = FlowState(t=0.0, x=x0 / torus16_op.norm(x0))
    coarse = normalized_reaction_defect(state, torus16_op, 1e-2, "euler")
    fine = normalized_reaction_defect(state, torus16_op, 5e-3, "euler")
    assert coarse / fine >= 3.0


def test_energy_identity_residual_is_high_order(torus16, torus16_op):
    x, y = torus16.grid.coords
    x0 = _field(torus16, 1, np.sin(x)) + _field(torus16, 0, np.sin(2.0 * y))
    state = FlowState(t=0.0, x=x0)
    coarse = energy_identity_residual(state, torus16_op, 0.1, "rk4")
    fine = energy_identity_residual(state, torus16_op, 0.05, "rk4")
    assert coarse / fine >= 8.0


def test_divergence_decays_at_the_predicted_rate(torus32, torus32_op):
    x, _y = torus32.grid.coords
    x0 = _field(torus32, 0, np.sin(x))
    result = run(x0, FlowConfig(t_end=0.2, checkpoint_stride=1), torus32, torus32_op)
    report = divergence_decay_check(result.checkpoints, torus32)
    assert not report.skipped
    assert report.monotone
    assert report.rate_measured == pytest.approx(report.rate_expected, rel=2e-2)
    assert len(report.closed_form) == len(report.times)
    assert report.max_rel_error <= 1e-2
    # sin(x) dx has div = cos x: |div|^2 = 2 pi^2 exp(-4t) up to O(h^2)
    continuum = 2.0 * math.pi**2 * np.exp(-4.0 * np.asarray(report.times))
    np.testing.assert_allclose(report.closed_form, continuum, rtol=3e-2)


def test_divergence_decay_is_skipped_off_ricci_flat(sphere16):
    state = FlowState(t=0.0, x=band_limited_random(sphere16, 0))
    report = divergence_decay_check([state], sphere16)
    assert report.skipped
    assert "Ric" in report.reason


def test_taylor_green_decays_under_navier_stokes(torus32, torus32_op):
    x, y = torus32.grid.coords
    tg0 = np.stack([np.sin(x) * np.cos(y), -np.cos(x) * np.sin(y)])
    projector = build_projector(torus32)
    cfg = FlowConfig(variant="navier_stokes", t_end=1.0, monitor_stride=1)
    result = run(tg0, cfg, torus32, torus32_op, projector=projector)

    rate = -torus32_op.inner(tg0, torus32_op.apply(tg0)) / torus32_op.inner(tg0, tg0)
    expected = math.exp(-rate * result.final.t) * tg0
    assert torus32_op.norm(result.final.x - expected) <= 1e-6 * torus32_op.norm(expected)
    assert is_non_increasing(result.series.column("normX2"))
    assert energy_balance_defect(result.series) <= 1e-2


def test_cfl_violation_aborts_with_the_last_good_state(torus16, torus16_op):
    projector = build_projector(torus16)
    x0 = 1e4 * _translation(torus16)
    cfg = FlowConfig(variant="navier_stokes", t_end=1.0)
    with pytest.raises(FlowInstabilityError) as excinfo:
        run(x0, cfg, torus16, torus16_op, projector=projector)
    assert excinfo.value.last_state.t == 0.0
    assert len(excinfo.value.series) == 1


def test_monitors_pad_missing_orders(torus16):
    row = monitors(FlowState(t=0.0, x=_translation(torus16)), torus16, k_max=0)
    values = row.values()
    assert row.u[0] == pytest.approx(4.0 * math.pi**2)
    assert math.isnan(values[2]) and math.isnan(values[3])
    full = monitors(FlowState(t=0.0, x=_translation(torus16)), torus16, k_max=2)
    assert full.u[1] == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        monitors(FlowState(t=0.0, x=_translation(torus16)), torus16, k_max=3)


def test_decay_fit_and_monotonicity_helpers():
    t = np.linspace(0.0, 2.0, 11)
    assert fit_decay_rate(t, 3.0 * np.exp(-1.5 * t)) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        fit_decay_rate(t, np.zeros_like(t))
    assert is_non_increasing(np.array([3.0, 2.0, 2.0, 1.0]))
    assert not is_non_increasing(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        energy_balance_defect(MonitorSeries())


@pytest.fixture(scope="module")
def torus32_bochner(torus32):
    return assemble_bochner_yano(torus32), build_projector(torus32)


def test_bochner_yano_decays_sin_x_dy_at_rate_one(torus32, torus32_bochner):
    op, projector = torus32_bochner
    x, _y = torus32.grid.coords
    x0 = _field(torus32, 1, np.sin(x))
    cfg = FlowConfig(variant="bochner_yano", t_end=1.0, monitor_stride=20)
    result = run(x0, cfg, torus32, op, projector=projector)

    rate = fit_decay_rate(result.series.column("t"), np.sqrt(result.series.column("normX2")))
    # discrete rate is (sin h / h)^2 plus an O(h^4) stabilization share
    assert rate == pytest.approx(1.0, rel=2e-2)
    assert np.sqrt(result.series.column("v0").max()) <= 1e-8
    assert is_non_increasing(result.series.column("normX2"))


def test_bochner_yano_removes_gradients_before_the_first_step(torus32, torus32_bochner):
    op, projector = torus32_bochner
    x, _y = torus32.grid.coords
    x0 = _field(torus32, 0, np.sin(x))
    result = run(x0, FlowConfig(variant="bochner_yano", t_end=0.05), torus32, op, projector=projector)
    assert op.norm(result.checkpoints[0].x) <= 1e-8 * op.norm(x0)
    assert op.norm(result.final.x) <= 1e-8 * op.norm(x0)


def test_bochner_yano_keeps_the_sphere_rotation(sphere16):
    op = assemble_bochner_yano(sphere16)
    projector = build_projector(sphere16)
    x0 = killing_rotation(sphere16)
    t_end = 0.5
    result = run(x0, FlowConfig(variant="bochner_yano", t_end=t_end, monitor_stride=500), sphere16, op, projector=projector)
    # Delta + Ric annihilates Killing fields up to the O(h^2) consistency error
    drift = op.norm(result.final.x - x0) / op.norm(x0)
    assert drift <= 5.0 * sphere16.h_max**2 * t_end


def test_sphere_gradient_decays_at_rate_two(sphere16, sphere16_op):
    x0 = exact_gradient("cos_theta", sphere16)
    result = run(x0, FlowConfig(t_end=1.5, monitor_stride=100), sphere16, sphere16_op)
    t = result.series.column("t")
    norms = np.sqrt(result.series.column("normX2"))
    late = t >= 0.5
    assert fit_decay_rate(t[late], norms[late]) == pytest.approx(2.0, rel=0.1)
    assert is_non_increasing(result.series.column("normX2"))


def test_rotation_plus_gradient_converges_to_the_rotation(sphere16, sphere16_op, sphere16_spectrum):
    _spectrum, basis = sphere16_spectrum
    rotation = killing_rotation(sphere16)
    x0 = rotation + exact_gradient("cos_theta", sphere16)
    result = run(x0, FlowConfig(t_end=6.0, monitor_stride=500), sphere16, sphere16_op, basis=basis)

    h2 = sphere16.h_max**2
    assert sphere16_op.norm(result.final.x - rotation) <= h2 * sphere16_op.norm(rotation)
    assert result.limit_error <= h2
    assert kernel_distance(result.final.x, basis) <= h2
