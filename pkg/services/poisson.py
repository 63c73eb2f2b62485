"""Leray projection onto discretely divergence-free vector fields.

The gradient is the central difference of f with its index raised,
G = g^-1 dF. The projection removes the M-closest gradient:
X <- X - G phi with (G^T M G) phi = G^T M X. Since G^T M = dF^T diag(w),
the Poisson matrix is dF^T W1 dF and the constraint left on the result is
dF^T (w X) = 0, the M-adjoint divergence. Solved with conjugate gradients
in the gauge where phi has zero weighted mean on every class of nodes
the central differences cannot separate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from config import CG_MAXITER, CG_RTOL
from services.grid_stencils import central_diff_kernel_classes
from services.manifold import ManifoldData
from services.operator import covector_weight, scalar_derivative_matrix

logger = logging.getLogger(__name__)


class PoissonSolveError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LerayProjector:
    manifold: ManifoldData
    derivative: sp.csr_matrix
    gradient: sp.csr_matrix
    poisson: sp.csr_matrix
    preconditioner: sp.dia_matrix
    kernel_count: int
    kernel_labels: np.ndarray

    def adjoint_divergence(self, x: np.ndarray) -> np.ndarray:
        """-M_s^-1 dF^T (w X): zero exactly on the projected fields."""
        w = self.manifold.metric.weights
        dens = (x * w).reshape(-1)
        return -(self.derivative.T @ dens) / w

    def _class_sums(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.kernel_labels, weights=values, minlength=self.kernel_count)

    def _remove_kernel_load(self, rhs: np.ndarray) -> np.ndarray:
        w = self.manifold.metric.weights
        load = self._class_sums(rhs) / self._class_sums(w)
        return rhs - w * load[self.kernel_labels]

    def _gauge(self, phi: np.ndarray) -> np.ndarray:
        w = self.manifold.metric.weights
        mean = self._class_sums(w * phi) / self._class_sums(w)
        return phi - mean[self.kernel_labels]

    def solve(self, rhs: np.ndarray, x0: np.ndarray | None = None, atol: float = 0.0) -> np.ndarray:
        """phi with (G^T M G) phi = rhs, weighted mean of phi zero on every kernel class.

        The Poisson matrix is singular on each class of nodes the central
        differences cannot tell apart, not only on constants; the load on
        those classes is removed so the system stays consistent.
        """
        rhs = self._remove_kernel_load(rhs)
        if np.linalg.norm(rhs) <= atol or not np.any(rhs):
            return np.zeros_like(rhs)
        phi, info = spla.cg(
            self.poisson, rhs, x0=x0, rtol=CG_RTOL, atol=atol, maxiter=CG_MAXITER, M=self.preconditioner
        )
        if info > 0:
            res = np.linalg.norm(self.poisson @ phi - rhs) / max(np.linalg.norm(rhs), 1e-300)
            raise PoissonSolveError(f"CG did not converge in {info} iterations (relative residual {res:.3e})")
        if info < 0:
            raise PoissonSolveError(f"CG failed with illegal input (info={info})")
        return self._gauge(phi)

    def load_scale(self, x: np.ndarray) -> float:
        """Size of dF^T (w X) with no cancellation, the roundoff floor of the load."""
        dens = np.abs((x * self.manifold.metric.weights).reshape(-1))
        return float(np.linalg.norm(abs(self.derivative).T @ dens))

    def project(self, x: np.ndarray) -> np.ndarray:
        w = self.manifold.metric.weights
        rhs = self.derivative.T @ (x * w).reshape(-1)
        # an already divergence-free field leaves only roundoff in the load
        phi = self.solve(rhs, atol=CG_RTOL * self.load_scale(x))
        return x - (self.gradient @ phi).reshape(x.shape)

    def divergence_norm(self, x: np.ndarray) -> float:
        """L2 norm of the adjoint divergence."""
        div = self.adjoint_divergence(x)
        return math.sqrt(float(np.dot(div * div, self.manifold.metric.weights)))


def build_projector(manifold: ManifoldData) -> LerayProjector:
    d_f = scalar_derivative_matrix(manifold)
    raise_g = sp.bmat(
        [[sp.diags(manifold.metric.g_inv[i, j]) for j in range(manifold.dim)] for i in range(manifold.dim)],
        format="csr",
    )
    poisson = (d_f.T @ covector_weight(manifold) @ d_f).tocsr()
    poisson = (0.5 * (poisson + poisson.T)).tocsr()
    diag = poisson.diagonal()
    diag = np.where(diag > 0.0, diag, 1.0)
    count, labels = central_diff_kernel_classes(manifold.grid)
    logger.info(
        "PoissonDiag: projector on %s nodes=%d nnz=%d kernel_classes=%d",
        manifold.kind,
        manifold.n_nodes,
        poisson.nnz,
        count,
    )
    return LerayProjector(
        manifold=manifold,
        derivative=d_f,
        gradient=(raise_g @ d_f).tocsr(),
        poisson=poisson,
        preconditioner=sp.diags(1.0 / diag),
        kernel_count=count,
        kernel_labels=labels,
    )


def leray_project(x: np.ndarray, manifold: ManifoldData) -> np.ndarray:
    return build_projector(manifold).project(x)
