import math

import numpy as np
import pytest

from config import STABILIZATION_WEIGHT
from services.fields import band_limited_random
from services.flow import dissipation
from services.operator import (
    SpectrumUnavailableError,
    assemble_bochner_yano,
    assemble_scalar_laplacian,
    discrete_frakL,
    dominant_mode_projection,
    eigendecompose,
    evolve_spectral,
    kernel_distance,
    killing_kernel,
    lambda_max_estimate,
    project_killing,
    rhs_consistency,
    spectral_gap,
    symmetry_defect,
)
from services.run_config import killing_rotation


def _torus_gap(h):
    sigma2 = (math.sin(h) / h) ** 2
    stab = (2.0 * math.sin(h / 2.0)) ** 6 / h**2
    return sigma2 + 2.0 * STABILIZATION_WEIGHT * stab


def _mode(manifold, component, fn):
    x = manifold.zeros_vector()
    x[component] = fn(manifold.grid.coords[0])
    return x


def test_operator_is_a_mass_symmetric_gradient(torus16_op, sphere16_op):
    for op in (torus16_op, sphere16_op):
        assert symmetry_defect(op) <= 1e-12
        rng = np.random.default_rng(1)
        for _ in range(5):
            x = rng.standard_normal((op.manifold.dim, op.manifold.n_nodes))
            frak = discrete_frakL(op, x)
            assert frak >= 0.0
            assert op.inner(x, op.apply(x)) == pytest.approx(-2.0 * frak, rel=1e-11)
            assert dissipation(op, x) == pytest.approx(2.0 * frak, rel=1e-11)


def test_torus_kernel_is_the_translations(torus16, torus16_spectrum):
    spectrum, basis = torus16_spectrum
    assert spectrum.complete
    assert np.all(np.diff(spectrum.eigenvalues) <= 1e-12)
    assert basis.dim == 2
    for direction in ("x", "y"):
        assert kernel_distance(killing_rotation(torus16, direction=direction), basis) <= 1e-10


def test_torus_spectral_gap_matches_the_discrete_symbol(torus16_spectrum):
    spectrum, basis = torus16_spectrum
    h = 2.0 * math.pi / 16
    assert spectral_gap(spectrum, basis) == pytest.approx(_torus_gap(h), rel=1e-8)


def test_wider_kernel_tolerance_picks_up_the_first_cluster(torus16_spectrum):
    spectrum, basis = torus16_spectrum
    gap = spectral_gap(spectrum, basis)
    wide = killing_kernel(spectrum, kernel_tol=1.01 * gap)
    assert wide.dim == 6


def test_sphere_kernel_is_so3(sphere16, sphere16_spectrum):
    spectrum, basis = sphere16_spectrum
    assert basis.dim == 3
    # the discrete rotation sits O(h^2) off the discrete kernel
    assert kernel_distance(killing_rotation(sphere16, axis="z"), basis) <= sphere16.h_max**2
    # next modes are the conformal fields grad(x_i), eigenvalue -2
    assert spectral_gap(spectrum, basis) == pytest.approx(2.0, rel=0.1)


def test_evolve_spectral_is_the_exact_semidiscrete_solution(torus16, torus16_op, torus16_spectrum):
    spectrum, _basis = torus16_spectrum
    x0 = band_limited_random(torus16, 2)
    np.testing.assert_allclose(evolve_spectral(x0, 0.0, spectrum), x0, atol=1e-10)

    lam = spectrum.eigenvalues[5]
    v = spectrum.vectors[5]
    np.testing.assert_allclose(evolve_spectral(v, 0.7, spectrum), math.exp(0.7 * lam) * v, atol=1e-10)

    partial = eigendecompose(torus16_op, count=8)
    assert not partial.complete
    assert len(partial.eigenvalues) == 8
    with pytest.raises(SpectrumUnavailableError):
        evolve_spectral(x0, 1.0, partial)


def test_spectral_gap_needs_a_mode_past_the_kernel(torus16_op):
    partial = eigendecompose(torus16_op, count=2)
    basis = killing_kernel(partial, kernel_tol=1e-6)
    with pytest.raises(SpectrumUnavailableError):
        spectral_gap(partial, basis)


def test_dominant_mode_projection(torus16, torus16_spectrum):
    spectrum, basis = torus16_spectrum
    translation = killing_rotation(torus16, direction="x")
    slow = _mode(torus16, 1, np.sin)
    fast = _mode(torus16, 1, lambda x: np.sin(2.0 * x))

    np.testing.assert_allclose(dominant_mode_projection(translation + slow, spectrum, basis), translation, atol=1e-10)
    np.testing.assert_allclose(dominant_mode_projection(slow + fast, spectrum, basis), slow, atol=1e-8)
    np.testing.assert_allclose(project_killing(slow, basis), 0.0, atol=1e-10)


def test_lambda_max_estimate_matches_dense_spectrum(torus16_op, torus16_spectrum):
    spectrum, _basis = torus16_spectrum
    assert lambda_max_estimate(torus16_op) == pytest.approx(-spectrum.eigenvalues[-1], rel=1e-4)


def test_operator_agrees_with_the_direct_finite_difference_form(torus32, torus32_op):
    x = _mode(torus32, 0, np.sin)
    assert rhs_consistency(torus32_op, x) <= 1e-3


def test_scalar_laplacian_symbol(torus16):
    lap = assemble_scalar_laplacian(torus16)
    x, _y = torus16.grid.coords
    h = torus16.grid.spacings[0]
    sym = (math.sin(h) / h) ** 2 + STABILIZATION_WEIGHT * (2.0 * math.sin(h / 2.0)) ** 6 / h**2
    np.testing.assert_allclose(lap.apply(np.cos(x)), -sym * np.cos(x), atol=1e-12)
    np.testing.assert_allclose(lap.apply(np.ones(torus16.n_nodes)), 0.0, atol=1e-12)


def test_bochner_yano_operator_is_symmetric_and_dissipative(sphere16):
    op = assemble_bochner_yano(sphere16)
    assert symmetry_defect(op) <= 1e-12
    x = band_limited_random(sphere16, 5)
    # Bochner: |nabla K|^2 = Ric(K, K) in the mean for Killing K
    rotation = killing_rotation(sphere16, axis="z")
    assert op.inner(rotation, op.apply(rotation)) == pytest.approx(0.0, abs=0.1 * op.inner(rotation, rotation))
    assert op.inner(x, op.apply(x)) < 0.0
