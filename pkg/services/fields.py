"""Discrete tensor calculus on a chart manifold.

Vector fields are ``(m, N)`` arrays of contravariant components X^i;
covariant tensors of rank r are ``(m,)*r + (N,)`` arrays. Derivatives are
second-order central differences with the manifold's boundary rules; norms
use full metric contractions so results do not depend on the chart.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from services import grid_stencils
from services.manifold import FieldShapeError, ManifoldData, integrate_scalar, l2_inner

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnergyReport:
    frakL: float
    E_bochner: float
    E_def: float
    yano_residual: float
    div_l2: float
    grad_l2: float
    ric_quad: float


@dataclass(frozen=True, eq=False)
class DaggerSource:
    field: np.ndarray
    phi: np.ndarray
    residual: float


def check_vector(x: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (manifold.dim, manifold.n_nodes):
        raise FieldShapeError(f"Vector field has shape {x.shape}, expected {(manifold.dim, manifold.n_nodes)}")
    if not np.isfinite(x).all():
        raise FieldShapeError("Vector field has non-finite components")
    return x


def lower(x: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    return np.einsum("ijn,jn->in", manifold.metric.g, x)


def raise_index(x_flat: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    return np.einsum("ijn,jn->in", manifold.metric.g_inv, x_flat)


def raise_all(t: np.ndarray, rank: int, manifold: ManifoldData) -> np.ndarray:
    g_inv = manifold.metric.g_inv
    out = t
    for axis in range(rank):
        out = np.moveaxis(np.einsum("ajn,...jn->...an", g_inv, np.moveaxis(out, axis, -2)), -2, axis)
    return out


def tensor_norm2(t: np.ndarray, rank: int, manifold: ManifoldData) -> np.ndarray:
    """Pointwise |T|^2 of a covariant rank-r tensor."""
    if rank == 0:
        return t * t
    return np.sum(t * raise_all(t, rank, manifold), axis=tuple(range(rank)))


def covariant_derivative_tensor(t: np.ndarray, rank: int, manifold: ManifoldData) -> np.ndarray:
    """nabla of a covariant rank-r tensor; the new index comes first."""
    grid = manifold.grid
    gam = manifold.connection.gamma
    partial = np.stack([grid_stencils.central_diff(grid, t, rank, d) for d in range(grid.dim)])
    if rank == 0:
        return partial
    if rank == 1:
        return partial - np.einsum("kijn,kn->ijn", gam, t)
    if rank == 2:
        return (
            partial
            - np.einsum("lian,lbn->iabn", gam, t)
            - np.einsum("libn,aln->iabn", gam, t)
        )
    raise ValueError(f"Covariant derivative implemented up to rank 2, got {rank}")


def covariant_derivative(x: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    """nabla_i X_j as an (m, m, N) array."""
    x = check_vector(x, manifold)
    return covariant_derivative_tensor(lower(x, manifold), 1, manifold)


def deformation(x: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    nab = covariant_derivative(x, manifold)
    return 0.5 * (nab + np.swapaxes(nab, 0, 1))


def divergence(x: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    nab = covariant_derivative(x, manifold)
    return np.einsum("ijn,ijn->n", manifold.metric.g_inv, nab)


def divergence_density(x: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    """(1/sqrt g) d_i(sqrt g X^i); the negative M-adjoint of ``gradient``."""
    x = check_vector(x, manifold)
    grid = manifold.grid
    dens = manifold.metric.sqrt_det * x
    total = np.zeros(manifold.n_nodes)
    for d in range(grid.dim):
        total += grid_stencils.central_diff(grid, dens, 1, d)[d]
    return total / manifold.metric.sqrt_det


def gradient(f: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != (manifold.n_nodes,):
        raise FieldShapeError(f"Scalar field has shape {f.shape}, expected ({manifold.n_nodes},)")
    return raise_index(covariant_derivative_tensor(f, 0, manifold), manifold)


def scalar_laplacian(f: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    return divergence(gradient(f, manifold), manifold)


def rough_laplacian(x: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    nab = covariant_derivative(x, manifold)
    nab2 = covariant_derivative_tensor(nab, 2, manifold)
    lap_flat = np.einsum("kin,kijn->jn", manifold.metric.g_inv, nab2)
    return raise_index(lap_flat, manifold)


def ricci_apply(x: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    x = check_vector(x, manifold)
    return np.einsum("ijn,jn->in", manifold.curvature.ric_mixed, x)


def flow_rhs(x: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    """Delta X + grad div X + Ric(X), direct finite-difference form."""
    return (
        rough_laplacian(x, manifold)
        + gradient(divergence(x, manifold), manifold)
        + ricci_apply(x, manifold)
    )


def advection(x: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    """(nabla_X X)^i = X^j nabla_j X^i."""
    nab = covariant_derivative(x, manifold)
    return raise_index(np.einsum("jn,jin->in", x, nab), manifold)


def energy_report(x: np.ndarray, manifold: ManifoldData) -> EnergyReport:
    nab = covariant_derivative(x, manifold)
    defo = 0.5 * (nab + np.swapaxes(nab, 0, 1))
    div = np.einsum("ijn,ijn->n", manifold.metric.g_inv, nab)
    ric_xx = np.einsum("ijn,in,jn->n", manifold.curvature.ric, x, x)

    frak_l = integrate_scalar(tensor_norm2(defo, 2, manifold), manifold)
    grad_l2 = integrate_scalar(tensor_norm2(nab, 2, manifold), manifold)
    div_l2 = integrate_scalar(div * div, manifold)
    ric_quad = integrate_scalar(ric_xx, manifold)
    e_bochner = grad_l2 + div_l2 - ric_quad
    e_def = 2.0 * frak_l
    return EnergyReport(
        frakL=frak_l,
        E_bochner=e_bochner,
        E_def=e_def,
        yano_residual=e_bochner - e_def,
        div_l2=div_l2,
        grad_l2=grad_l2,
        ric_quad=ric_quad,
    )


def dagger_source(h: np.ndarray, killing: np.ndarray, manifold: ManifoldData) -> DaggerSource:
    """X = K + grad h together with the potential phi_X of its flow velocity.

    On an Einstein manifold flow_rhs(K + grad h) = grad(2 Delta h + (2R/m) h)
    when K is Killing; ``residual`` is the relative L2 mismatch.
    """
    # einstein builds on this module
    from services.einstein import NotEinsteinError, verify_einstein

    report = verify_einstein(manifold)
    if not report.is_einstein:
        raise NotEinsteinError(f"{manifold.kind} is not Einstein: |Ric - (R/m)g| = {report.deviation:.3e}")
    r_const = report.R_const
    killing = check_vector(killing, manifold)
    x = killing + gradient(h, manifold)
    phi = 2.0 * scalar_laplacian(h, manifold) + (2.0 * r_const / manifold.dim) * h

    mismatch = flow_rhs(x, manifold) - gradient(phi, manifold)
    scale = math.sqrt(max(l2_inner(x, x, manifold), 1e-300))
    residual = math.sqrt(l2_inner(mismatch, mismatch, manifold)) / scale
    logger.info("FieldsDiag: dagger_source residual=%.3e R=%.6f", residual, r_const)
    return DaggerSource(field=x, phi=phi, residual=residual)


# ---------------------------------------------------------------------------
# smooth test fields
# ---------------------------------------------------------------------------

def band_limited_random(manifold: ManifoldData, seed: int, modes: int = 3) -> np.ndarray:
    """Seeded smooth vector field built from the lowest ``modes`` modes.

    Tori: Fourier modes in each component. Spheres: gradients and rotated
    gradients of low-degree polynomials in the embedding coordinates, which
    are smooth across the poles.
    """
    rng = np.random.default_rng(seed)
    if manifold.kind in ("flat_torus_t2", "perturbed_torus"):
        x, y = manifold.grid.coords
        field = np.zeros((2, manifold.n_nodes))
        for c in range(2):
            for kx in range(modes):
                for ky in range(modes):
                    if kx + ky >= modes:
                        continue
                    a, b = rng.normal(size=2)
                    field[c] += a * np.cos(kx * x + ky * y) + b * np.sin(kx * x + ky * y)
        return field

    emb = embedding_coordinates(manifold)
    dim_e = emb.shape[0]
    field = np.zeros((manifold.dim, manifold.n_nodes))
    for degree in range(1, modes + 1):
        coef = rng.normal(size=dim_e)
        poly = (coef @ emb) ** degree
        grad = gradient(poly, manifold)
        field += grad
        if manifold.dim == 2:
            # rotate the gradient by 90 degrees: divergence-free part
            coef2 = rng.normal(size=dim_e)
            grad2 = gradient((coef2 @ emb) ** degree, manifold)
            field += rotate_quarter_turn(grad2, manifold)
    return field


def embedding_coordinates(manifold: ManifoldData) -> np.ndarray:
    c = manifold.grid.coords
    if manifold.kind == "unit_sphere_s2":
        th, ph = c
        return np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
    if manifold.kind == "unit_sphere_s3":
        chi, th, ph = c
        return np.stack(
            [
                np.sin(chi) * np.sin(th) * np.cos(ph),
                np.sin(chi) * np.sin(th) * np.sin(ph),
                np.sin(chi) * np.cos(th),
                np.cos(chi),
            ]
        )
    raise ValueError(f"No embedding coordinates for {manifold.kind}")


def rotate_quarter_turn(x: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    """J X on an oriented surface: (J X)^i = eps^i_j X^j."""
    if manifold.dim != 2:
        raise ValueError("Quarter-turn rotation needs a 2D manifold")
    sqrt_det = manifold.metric.sqrt_det
    x_flat = lower(x, manifold)
    return np.stack([-x_flat[1], x_flat[0]]) / sqrt_det
