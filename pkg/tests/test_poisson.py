import numpy as np
import pytest

from services import poisson
from services.fields import band_limited_random, divergence_density, gradient
from services.operator import mass_matrix
from services.poisson import PoissonSolveError, build_projector, leray_project


@pytest.fixture(scope="module")
def torus_projector(torus16):
    return build_projector(torus16)


@pytest.fixture(scope="module")
def sphere_projector(sphere16):
    return build_projector(sphere16)


def _m_inner(manifold, x, y):
    return float(x.reshape(-1) @ (mass_matrix(manifold) @ y.reshape(-1)))


@pytest.mark.parametrize("name", ["torus", "sphere"])
def test_projection_is_discretely_divergence_free(name, torus16, sphere16, torus_projector, sphere_projector):
    manifold, proj = (torus16, torus_projector) if name == "torus" else (sphere16, sphere_projector)
    x = band_limited_random(manifold, 6)
    before = proj.divergence_norm(x)
    px = proj.project(x)
    assert before > 0.0
    assert proj.divergence_norm(px) <= 1e-6 * before


def test_projection_is_idempotent_and_orthogonal_to_gradients(sphere16, sphere_projector):
    x = band_limited_random(sphere16, 8)
    px = sphere_projector.project(x)
    np.testing.assert_allclose(sphere_projector.project(px), px, atol=1e-7 * np.abs(px).max())

    th, ph = sphere16.grid.coords
    grad = gradient(np.sin(th) * np.cos(ph) + np.cos(th) ** 2, sphere16)
    scale = np.sqrt(_m_inner(sphere16, px, px) * _m_inner(sphere16, grad, grad))
    assert abs(_m_inner(sphere16, px, grad)) <= 1e-7 * scale


def test_gradient_fields_are_removed_and_vortices_kept(torus16, torus_projector):
    x, y = torus16.grid.coords
    grad = torus16.zeros_vector()
    grad[0] = np.sin(x)
    assert np.abs(torus_projector.project(grad)).max() <= 1e-8

    tg = np.stack([np.sin(x) * np.cos(y), -np.cos(x) * np.sin(y)])
    np.testing.assert_allclose(torus_projector.project(tg), tg, atol=1e-12)

    constant = torus16.zeros_vector()
    constant[1] = 1.0
    np.testing.assert_allclose(torus_projector.project(constant), constant, atol=1e-12)


def test_adjoint_divergence_is_the_density_divergence_on_the_torus(torus16, torus_projector):
    x = band_limited_random(torus16, 9)
    np.testing.assert_allclose(torus_projector.adjoint_divergence(x), divergence_density(x, torus16), atol=1e-10)


def test_solution_is_mean_zero(sphere16, sphere_projector):
    rhs = np.cos(sphere16.grid.coords[0]) * sphere16.metric.weights + 3.0
    phi = sphere_projector.solve(rhs)
    assert abs(np.dot(phi, sphere16.metric.weights)) <= 1e-10 * np.abs(phi).max() * sphere16.volume


def test_leray_project_helper(torus16, torus_projector):
    x = band_limited_random(torus16, 10)
    np.testing.assert_allclose(leray_project(x, torus16), torus_projector.project(x), atol=1e-10)


def test_cg_failure_raises(monkeypatch, torus16, torus_projector):
    monkeypatch.setattr(poisson, "CG_MAXITER", 1)
    with pytest.raises(PoissonSolveError):
        torus_projector.project(band_limited_random(torus16, 11))


def test_kernel_classes_are_invisible_to_central_differences(torus16, sphere16, torus_projector, sphere_projector):
    # odd/even sublattices in both periodic directions
    assert torus_projector.kernel_count == 4
    for proj in (torus_projector, sphere_projector):
        assert proj.kernel_count >= 1
        for c in range(proj.kernel_count):
            indicator = (proj.kernel_labels == c).astype(float)
            assert np.abs(proj.derivative @ indicator).max() == 0.0


def test_divergence_free_fields_pass_through_unchanged(torus32, sphere16, sphere_projector):
    x, y = torus32.grid.coords
    tg = np.stack([np.sin(x) * np.cos(y), -np.cos(x) * np.sin(y)])
    np.testing.assert_allclose(build_projector(torus32).project(tg), tg, atol=1e-10)

    rotation = sphere16.zeros_vector()
    rotation[1] = 1.0
    np.testing.assert_allclose(sphere_projector.project(rotation), rotation, atol=1e-10)


def test_checkerboard_load_does_not_break_the_solve(torus16, torus_projector):
    rng = np.random.default_rng(3)
    rhs = torus_projector.poisson @ rng.standard_normal(torus16.n_nodes)
    w = torus16.metric.weights
    checker = np.where(torus_projector.kernel_labels == 1, 1.0, 0.0)
    phi = torus_projector.solve(rhs + 1e-3 * w * checker)
    np.testing.assert_allclose(torus_projector.poisson @ phi, rhs, atol=1e-8 * np.abs(rhs).max())
    for c in range(torus_projector.kernel_count):
        in_class = torus_projector.kernel_labels == c
        assert abs(np.dot(w[in_class], phi[in_class])) <= 1e-10 * np.abs(phi).max() * w.sum()
