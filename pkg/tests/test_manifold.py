import math

import numpy as np
import pytest

from services.manifold import (
    FieldShapeError,
    ManifoldSpec,
    ManifoldSpecError,
    build_manifold,
    conformal_torus_exact,
    integrate_scalar,
    l2_inner,
    sectional_curvature_range,
)


@pytest.mark.parametrize(
    "spec",
    [
        ManifoldSpec("klein_bottle", (16, 16)),
        ManifoldSpec("flat_torus_t2", (16,)),
        ManifoldSpec("flat_torus_t2", (4, 16)),
        ManifoldSpec("unit_sphere_s2", (16, 31)),
        ManifoldSpec("perturbed_torus", (16, 16), perturbation_amplitude=0.7),
        ManifoldSpec("unit_sphere_s2", (16, 32), perturbation_amplitude=0.1),
    ],
)
def test_invalid_specs_are_rejected(spec):
    with pytest.raises(ManifoldSpecError):
        build_manifold(spec)


def test_volumes(torus16, sphere16, perturbed24, s3_coarse):
    assert torus16.volume == pytest.approx(4.0 * math.pi**2, rel=1e-12)
    # sin x sin y sums to zero over whole periods
    assert perturbed24.volume == pytest.approx(4.0 * math.pi**2, rel=1e-12)
    assert sphere16.volume == pytest.approx(4.0 * math.pi, rel=1e-2)
    assert s3_coarse.volume == pytest.approx(2.0 * math.pi**2, rel=3e-2)


def test_metric_inverse_and_weights(sphere16):
    g, g_inv = sphere16.metric.g, sphere16.metric.g_inv
    ident = np.einsum("ijn,jkn->ikn", g, g_inv)
    np.testing.assert_allclose(ident, np.broadcast_to(np.eye(2)[:, :, None], ident.shape), atol=1e-12)
    assert np.all(sphere16.metric.weights > 0.0)


def test_no_node_sits_on_a_pole(sphere16, s3_coarse):
    assert np.all(np.sin(sphere16.grid.coords[0]) > 0.0)
    assert np.all(np.sin(s3_coarse.grid.coords[:2]) > 0.0)


def test_closed_form_curvatures(torus16, sphere16, s3_coarse):
    assert np.abs(torus16.curvature.ric).max() == 0.0
    np.testing.assert_allclose(sphere16.curvature.scalar, 2.0, atol=1e-12)
    np.testing.assert_allclose(s3_coarse.curvature.scalar, 6.0, atol=1e-12)
    np.testing.assert_allclose(sphere16.curvature.ric, sphere16.metric.g, atol=1e-12)


def test_sphere_christoffels(sphere16):
    th = sphere16.grid.coords[0]
    gam = sphere16.connection.gamma
    np.testing.assert_allclose(gam[0, 1, 1], -np.sin(th) * np.cos(th))
    np.testing.assert_allclose(gam[1, 0, 1], np.cos(th) / np.sin(th))
    np.testing.assert_allclose(gam[1, 1, 0], gam[1, 0, 1])


def _perturbed_errors(n):
    manifold = build_manifold(ManifoldSpec("perturbed_torus", (n, n), perturbation_amplitude=0.2))
    conn, ric = conformal_torus_exact(manifold.grid, 0.2)
    gamma_err = float(np.abs(manifold.connection.gamma - conn.gamma).max())
    ric_err = float(np.abs(manifold.curvature.ric - ric).max())
    return gamma_err, ric_err


def test_finite_difference_geometry_converges_at_second_order():
    g_coarse, r_coarse = _perturbed_errors(24)
    g_fine, r_fine = _perturbed_errors(48)
    assert math.log2(g_coarse / g_fine) > 1.8
    assert math.log2(r_coarse / r_fine) > 1.8


def test_sectional_curvature_range(sphere16, perturbed24, s3_coarse):
    assert sectional_curvature_range(sphere16) == pytest.approx((1.0, 1.0))
    k_min, k_max = sectional_curvature_range(perturbed24)
    assert k_min < 0.0 < k_max
    with pytest.raises(ValueError):
        sectional_curvature_range(s3_coarse)


def test_l2_inner_uses_the_metric(sphere16):
    th = sphere16.grid.coords[0]
    rotation = sphere16.zeros_vector()
    rotation[1] = 1.0
    # |d/dphi|^2 = sin^2 theta integrates to 8 pi / 3
    assert l2_inner(rotation, rotation, sphere16) == pytest.approx(8.0 * math.pi / 3.0, rel=1e-2)
    assert integrate_scalar(np.sin(th) ** 2, sphere16) == pytest.approx(l2_inner(rotation, rotation, sphere16))


def test_shape_errors(torus16):
    with pytest.raises(FieldShapeError):
        l2_inner(np.zeros((2, 10)), np.zeros((2, 10)), torus16)
    with pytest.raises(FieldShapeError):
        integrate_scalar(np.zeros(3), torus16)
