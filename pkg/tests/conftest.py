import pytest

from services.manifold import ManifoldSpec, build_manifold
from services.operator import assemble, eigendecompose, killing_kernel


@pytest.fixture(scope="session")
def torus16():
    return build_manifold(ManifoldSpec("flat_torus_t2", (16, 16)))


@pytest.fixture(scope="session")
def torus32():
    return build_manifold(ManifoldSpec("flat_torus_t2", (32, 32)))


@pytest.fixture(scope="session")
def sphere16():
    return build_manifold(ManifoldSpec("unit_sphere_s2", (16, 32)))


@pytest.fixture(scope="session")
def perturbed24():
    return build_manifold(ManifoldSpec("perturbed_torus", (24, 24), perturbation_amplitude=0.2))


@pytest.fixture(scope="session")
def s3_coarse():
    return build_manifold(ManifoldSpec("unit_sphere_s3", (8, 8, 16)))


@pytest.fixture(scope="session")
def torus16_op(torus16):
    return assemble(torus16)


@pytest.fixture(scope="session")
def torus32_op(torus32):
    return assemble(torus32)


@pytest.fixture(scope="session")
def sphere16_op(sphere16):
    return assemble(sphere16)


@pytest.fixture(scope="session")
def torus16_spectrum(torus16_op):
    spectrum = eigendecompose(torus16_op)
    return spectrum, killing_kernel(spectrum)


@pytest.fixture(scope="session")
def sphere16_spectrum(sphere16_op):
    spectrum = eigendecompose(sphere16_op)
    return spectrum, killing_kernel(spectrum)

