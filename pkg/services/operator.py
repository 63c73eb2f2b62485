"""Variational flow operator, its spectrum and the Killing kernel.

The semidiscrete flow is x' = L_h x with L_h = -2 M^-1 D^T W D, where D is
the discrete deformation operator and W the metric weight on symmetric
tensors, so L_h is exactly the negative M-gradient of the discrete energy
frakL_h(x) = x^T D^T W D x. D stacks the central-difference deformation
with a third-difference block of weight ``STABILIZATION_WEIGHT``: central
differences do not see grid-scale sawtooth fields, the third difference
does, while adding only O(h^4) to the energy of smooth fields.

Vector degrees of freedom are ordered component-major: dof = i * N + node.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from config import DENSE_THRESHOLD, EIGEN_RESIDUAL_TOL, KERNEL_TOL_FACTOR, STABILIZATION_WEIGHT
from services import grid_stencils
from services.fields import energy_report, flow_rhs
from services.manifold import ManifoldData

logger = logging.getLogger(__name__)

DEFAULT_ITERATIVE_COUNT = 12
SHIFT_INVERT_SIGMA = -1e-2


class EigenSolveError(RuntimeError):
    pass


class SpectrumUnavailableError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class FlowOperator:
    name: str
    manifold: ManifoldData
    mass: sp.csr_matrix
    mass_inv: sp.csr_matrix
    deformation: sp.csr_matrix
    weight: sp.csr_matrix
    stiffness: sp.csr_matrix
    matrix: sp.csr_matrix

    @property
    def n_dofs(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (self.matrix @ x.reshape(-1)).reshape(x.shape)

    def inner(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(x.reshape(-1) @ (self.mass @ y.reshape(-1)))

    def norm(self, x: np.ndarray) -> float:
        return math.sqrt(max(self.inner(x, x), 0.0))


@dataclass(frozen=True, eq=False)
class ScalarLaplacian:
    manifold: ManifoldData
    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    matrix: sp.csr_matrix

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.matrix @ f


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    vectors: np.ndarray
    complete: bool
    max_residual: float
    operator: FlowOperator


@dataclass(frozen=True, eq=False)
class KillingBasis:
    vectors: np.ndarray
    eigenvalues: np.ndarray
    kernel_tol: float
    operator: FlowOperator

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[0])


# ---------------------------------------------------------------------------
# assembly helpers
# ---------------------------------------------------------------------------

def _diag_blocks(arr: np.ndarray) -> sp.csr_matrix:
    m = arr.shape[0]
    return sp.bmat([[sp.diags(arr[i, j]) for j in range(m)] for i in range(m)], format="csr")


def mass_matrix(manifold: ManifoldData) -> sp.csr_matrix:
    return _diag_blocks(manifold.metric.g * manifold.metric.weights)


def _mass_inverse(manifold: ManifoldData) -> sp.csr_matrix:
    return _diag_blocks(manifold.metric.g_inv / manifold.metric.weights)


def _tensor_weight(manifold: ManifoldData) -> sp.csr_matrix:
    m = manifold.dim
    g_inv = manifold.metric.g_inv
    w = manifold.metric.weights
    pairs = [(i, j) for i in range(m) for j in range(m)]
    return sp.bmat(
        [[sp.diags(w * g_inv[i, k] * g_inv[j, l]) for (k, l) in pairs] for (i, j) in pairs],
        format="csr",
    )


def _lower_rows(manifold: ManifoldData) -> list[sp.csr_matrix]:
    g = manifold.metric.g
    m = manifold.dim
    return [sp.hstack([sp.diags(g[j, k]) for k in range(m)], format="csr") for j in range(m)]


def _nabla_rows(manifold: ManifoldData) -> dict[tuple[int, int], sp.csr_matrix]:
    """Sparse rows of nabla_i X_j acting on contravariant dofs."""
    grid = manifold.grid
    gam = manifold.connection.gamma
    m = manifold.dim
    lower = _lower_rows(manifold)
    rows = {}
    for i in range(m):
        for j in range(m):
            row = grid_stencils.central_diff_matrix(grid, i, component=j) @ lower[j]
            for k in range(m):
                row = row - sp.diags(gam[k, i, j]) @ lower[k]
            rows[(i, j)] = row.tocsr()
    return rows


def _stabilization_rows(manifold: ManifoldData) -> sp.csr_matrix:
    grid = manifold.grid
    m = manifold.dim
    lower = _lower_rows(manifold)
    return sp.vstack(
        [grid_stencils.third_diff_matrix(grid, d, component=j) @ lower[j] for d in range(m) for j in range(m)],
        format="csr",
    )


def _finish(name: str, manifold: ManifoldData, d_full: sp.csr_matrix, w_full: sp.csr_matrix,
            potential: sp.csr_matrix | None = None) -> FlowOperator:
    stiffness = (d_full.T @ w_full @ d_full).tocsr()
    if potential is not None:
        stiffness = (stiffness - potential).tocsr()
    stiffness = (0.5 * (stiffness + stiffness.T)).tocsr()
    mass = mass_matrix(manifold)
    mass_inv = _mass_inverse(manifold)
    scale = 2.0 if name == "deformation" else 1.0
    matrix = (-scale * (mass_inv @ stiffness)).tocsr()
    logger.info(
        "SpecDiag: assembled %s operator on %s dofs=%d nnz=%d",
        name,
        manifold.kind,
        matrix.shape[0],
        matrix.nnz,
    )
    return FlowOperator(
        name=name,
        manifold=manifold,
        mass=mass,
        mass_inv=mass_inv,
        deformation=d_full,
        weight=w_full,
        stiffness=stiffness,
        matrix=matrix,
    )


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def assemble(manifold: ManifoldData) -> FlowOperator:
    """L_h = -2 M^-1 D^T W D for Delta X + grad div X + Ric(X)."""
    m = manifold.dim
    nabla = _nabla_rows(manifold)
    defo = sp.vstack([0.5 * (nabla[(i, j)] + nabla[(j, i)]) for i in range(m) for j in range(m)], format="csr")
    stab = _stabilization_rows(manifold)
    d_full = sp.vstack([defo, math.sqrt(STABILIZATION_WEIGHT) * stab], format="csr")
    w = _tensor_weight(manifold)
    w_full = sp.block_diag([w, w], format="csr")
    return _finish("deformation", manifold, d_full, w_full)


def assemble_bochner_yano(manifold: ManifoldData) -> FlowOperator:
    """-M^-1 (G^T W G - Ric_M) for Delta X + Ric(X), G the full covariant derivative."""
    m = manifold.dim
    nabla = _nabla_rows(manifold)
    grad = sp.vstack([nabla[(i, j)] for i in range(m) for j in range(m)], format="csr")
    stab = _stabilization_rows(manifold)
    d_full = sp.vstack([grad, math.sqrt(STABILIZATION_WEIGHT) * stab], format="csr")
    w = _tensor_weight(manifold)
    w_full = sp.block_diag([w, w], format="csr")
    potential = _diag_blocks(manifold.curvature.ric * manifold.metric.weights)
    return _finish("bochner_yano", manifold, d_full, w_full, potential=potential)


def scalar_derivative_matrix(manifold: ManifoldData) -> sp.csr_matrix:
    """Central differences d_i f stacked over directions: (m*N) x N."""
    grid = manifold.grid
    return sp.vstack([grid_stencils.central_diff_matrix(grid, d) for d in range(manifold.dim)], format="csr")


def covector_weight(manifold: ManifoldData) -> sp.csr_matrix:
    return _diag_blocks(manifold.metric.g_inv * manifold.metric.weights)


def assemble_scalar_laplacian(manifold: ManifoldData) -> ScalarLaplacian:
    """Variational Laplace-Beltrami: Delta_h = -M_s^-1 A_s, A_s = dF^T W1 dF + stabilization."""
    grid = manifold.grid
    d_f = scalar_derivative_matrix(manifold)
    w1 = covector_weight(manifold)
    stab = sp.vstack([grid_stencils.third_diff_matrix(grid, d) for d in range(manifold.dim)], format="csr")
    stiffness = (d_f.T @ w1 @ d_f + STABILIZATION_WEIGHT * (stab.T @ w1 @ stab)).tocsr()
    stiffness = (0.5 * (stiffness + stiffness.T)).tocsr()
    weights = manifold.metric.weights
    mass = sp.diags(weights, format="csr")
    matrix = (-(sp.diags(1.0 / weights) @ stiffness)).tocsr()
    return ScalarLaplacian(manifold=manifold, stiffness=stiffness, mass=mass, matrix=matrix)


# ---------------------------------------------------------------------------
# energies and consistency
# ---------------------------------------------------------------------------

def discrete_frakL(op: FlowOperator, x: np.ndarray) -> float:
    v = x.reshape(-1)
    return float(v @ (op.stiffness @ v))


def rhs_consistency(op: FlowOperator, x: np.ndarray) -> float:
    """||L_h X - flow_rhs(X)||_M / ||X||_M."""
    diff = op.apply(x) - flow_rhs(x, op.manifold)
    return op.norm(diff) / max(op.norm(x), 1e-300)


def symmetry_defect(op: FlowOperator) -> float:
    """max |M L_h - (M L_h)^T| relative to max |M L_h|."""
    ml = (op.mass @ op.matrix).tocsr()
    scale = abs(ml).max()
    if scale == 0.0:
        return 0.0
    return float(abs(ml - ml.T).max() / scale)


# ---------------------------------------------------------------------------
# spectrum
# ---------------------------------------------------------------------------

def _residuals(op: FlowOperator, eigenvalues: np.ndarray, flat: np.ndarray) -> np.ndarray:
    out = np.empty(len(eigenvalues))
    for k, (lam, v) in enumerate(zip(eigenvalues, flat)):
        r = op.matrix @ v - lam * v
        out[k] = math.sqrt(max(float(r @ (op.mass @ r)), 0.0)) / max(1.0, abs(lam))
    return out


def eigendecompose(op: FlowOperator, count: int | None = None) -> SpectralDecomposition:
    """Eigenpairs of L_h, eigenvalues descending, eigenfields M-orthonormal."""
    n = op.n_dofs
    shape = (op.manifold.dim, op.manifold.n_nodes)
    scale = 2.0 if op.name == "deformation" else 1.0

    if n <= DENSE_THRESHOLD:
        mu, vecs = scipy.linalg.eigh(op.stiffness.toarray(), op.mass.toarray())
        complete = count is None or count >= n
        if count is not None:
            mu, vecs = mu[:count], vecs[:, :count]
    else:
        k = count or DEFAULT_ITERATIVE_COUNT
        try:
            mu, vecs = spla.eigsh(op.stiffness, k=k, M=op.mass, sigma=SHIFT_INVERT_SIGMA, which="LM")
        except spla.ArpackNoConvergence as exc:
            raise EigenSolveError(f"Iterative eigensolver did not converge: {exc}") from exc
        order = np.argsort(mu)
        mu, vecs = mu[order], vecs[:, order]
        complete = False

    eigenvalues = -scale * mu
    flat = vecs.T.copy()
    res = _residuals(op, eigenvalues, flat)
    max_res = float(res.max()) if len(res) else 0.0
    if max_res > EIGEN_RESIDUAL_TOL:
        if complete:
            logger.warning("SpecDiag: dense eigen residual %.3e above %.1e", max_res, EIGEN_RESIDUAL_TOL)
        else:
            raise EigenSolveError(f"Iterative eigenpairs have residual {max_res:.3e} > {EIGEN_RESIDUAL_TOL:.1e}")
    logger.info(
        "SpecDiag: %s eigenpairs=%d complete=%s top=%s max_residual=%.2e",
        op.manifold.kind,
        len(eigenvalues),
        complete,
        np.array2string(eigenvalues[:6], precision=5),
        max_res,
    )
    return SpectralDecomposition(
        eigenvalues=eigenvalues,
        vectors=flat.reshape((len(eigenvalues),) + shape),
        complete=complete,
        max_residual=max_res,
        operator=op,
    )


def default_kernel_tol(spec: SpectralDecomposition) -> float:
    """min(F * h^2 * |lambda_ref|, |lambda_ref| / 2), lambda_ref just past the isometry bound."""
    m = spec.operator.manifold.dim
    ref_index = m * (m + 1) // 2
    if len(spec.eigenvalues) <= ref_index:
        ref = abs(spec.eigenvalues[-1])
    else:
        ref = abs(spec.eigenvalues[ref_index])
    h = spec.operator.manifold.h_max
    return min(KERNEL_TOL_FACTOR * h * h * ref, 0.5 * ref)


def killing_kernel(spec: SpectralDecomposition, kernel_tol: float | None = None) -> KillingBasis:
    tol = default_kernel_tol(spec) if kernel_tol is None else float(kernel_tol)
    manifold = spec.operator.manifold
    keep = []
    for k, lam in enumerate(spec.eigenvalues):
        if abs(lam) > tol:
            continue
        frak_l = energy_report(spec.vectors[k], manifold).frakL
        if frak_l > tol:
            logger.warning("SpecDiag: eigenvalue %.3e inside tol but frakL=%.3e, rejected", lam, frak_l)
            continue
        keep.append(k)
    vectors = spec.vectors[keep] if keep else np.zeros((0,) + spec.vectors.shape[1:])
    logger.info("SpecDiag: killing kernel dim=%d tol=%.3e", len(keep), tol)
    return KillingBasis(
        vectors=vectors,
        eigenvalues=spec.eigenvalues[keep],
        kernel_tol=tol,
        operator=spec.operator,
    )


def project_killing(x: np.ndarray, basis: KillingBasis) -> np.ndarray:
    out = np.zeros_like(x, dtype=float)
    for v in basis.vectors:
        out += basis.operator.inner(x, v) * v
    return out


def kernel_distance(x: np.ndarray, basis: KillingBasis) -> float:
    op = basis.operator
    return op.norm(x - project_killing(x, basis)) / max(op.norm(x), 1e-300)


def spectral_gap(spec: SpectralDecomposition, basis: KillingBasis) -> float:
    """-(first eigenvalue outside the kernel): the measured decay rate."""
    if len(spec.eigenvalues) <= basis.dim:
        raise SpectrumUnavailableError("No eigenvalue beyond the kernel was computed")
    return float(-spec.eigenvalues[basis.dim])


def evolve_spectral(x0: np.ndarray, t: float, spec: SpectralDecomposition) -> np.ndarray:
    """Exact semidiscrete solution X(t) = sum_k exp(lambda_k t) <X0, v_k>_M v_k."""
    if not spec.complete:
        raise SpectrumUnavailableError("evolve_spectral needs a complete (dense) decomposition")
    op = spec.operator
    flat = spec.vectors.reshape(len(spec.eigenvalues), -1)
    coef = flat @ (op.mass @ x0.reshape(-1))
    out = (np.exp(spec.eigenvalues * t) * coef) @ flat
    return out.reshape(x0.shape)


def dominant_mode_projection(x: np.ndarray, spec: SpectralDecomposition, basis: KillingBasis, rtol: float = 1e-8) -> np.ndarray:
    """Projection of x onto the slowest eigenspace it actually touches.

    The kernel projection when it is nonzero; otherwise the first cluster of
    equal eigenvalues (relative spread ``rtol``) with a non-negligible
    component. This is where the renormalized flow ends up.
    """
    op = spec.operator
    scale = max(op.norm(x), 1e-300)
    kernel_part = project_killing(x, basis)
    if op.norm(kernel_part) > 1e-10 * scale:
        return kernel_part
    lams = spec.eigenvalues
    k = basis.dim
    while k < len(lams):
        j = k
        while j < len(lams) and abs(lams[j] - lams[k]) <= rtol * max(abs(lams[k]), 1.0):
            j += 1
        part = np.zeros_like(x, dtype=float)
        for v in spec.vectors[k:j]:
            part += op.inner(x, v) * v
        if op.norm(part) > 1e-10 * scale:
            return part
        k = j
    return np.zeros_like(x, dtype=float)


def lambda_max_estimate(op: FlowOperator) -> float:
    """Largest eigenvalue of -L_h (Lanczos on the M-symmetric pencil)."""
    if op.stiffness.nnz == 0 or abs(op.stiffness).max() == 0.0:
        return 0.0
    scale = 2.0 if op.name == "deformation" else 1.0
    n = op.n_dofs
    if n <= 64:
        mu = scipy.linalg.eigh(op.stiffness.toarray(), op.mass.toarray(), eigvals_only=True)
        return float(scale * max(mu.max(), 0.0))
    try:
        mu = spla.eigsh(op.stiffness, k=1, M=op.mass, which="LA", tol=1e-6, return_eigenvectors=False)
    except spla.ArpackNoConvergence as exc:
        if len(exc.eigenvalues) == 0:
            raise EigenSolveError(f"lambda_max estimate did not converge: {exc}") from exc
        mu = exc.eigenvalues
    return float(scale * max(float(np.max(mu)), 0.0))


def scalar_lambda_max(lap: ScalarLaplacian) -> float:
    """Largest eigenvalue of -Delta_h."""
    n = lap.stiffness.shape[0]
    if n <= 64:
        mu = scipy.linalg.eigh(lap.stiffness.toarray(), lap.mass.toarray(), eigvals_only=True)
        return float(max(mu.max(), 0.0))
    mu = spla.eigsh(lap.stiffness, k=1, M=lap.mass, which="LA", tol=1e-6, return_eigenvectors=False)
    return float(max(float(np.max(mu)), 0.0))
