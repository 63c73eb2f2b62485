"""Discrete closed Riemannian manifolds on chart grids.

Supported model geometries:

- ``unit_sphere_s2``: coordinates (theta, phi), g = diag(1, sin^2 theta);
- ``flat_torus_t2``: [0, 2pi)^2 with the identity metric;
- ``perturbed_torus``: g = (1 + a sin x sin y) * identity, a in [0, 0.5];
- ``unit_sphere_s3``: coordinates (chi, theta, phi),
  g = diag(1, sin^2 chi, sin^2 chi sin^2 theta).

Polar angles use half-offset nodes so no node sits on a coordinate
singularity; the ghost values across a pole come from the identified point
(see ``services.grid_stencils``). Sphere and flat torus carry closed-form
connection and curvature; the perturbed torus uses central differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from services import grid_stencils
from services.grid_stencils import Neighbor

logger = logging.getLogger(__name__)

KIND_DIMENSIONS = {
    "unit_sphere_s2": 2,
    "flat_torus_t2": 2,
    "perturbed_torus": 2,
    "unit_sphere_s3": 3,
}
MIN_RESOLUTION = 8
MAX_PERTURBATION = 0.5
EXACT_KINDS = {"unit_sphere_s2", "flat_torus_t2", "unit_sphere_s3"}


class ManifoldSpecError(ValueError):
    pass


class FieldShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ManifoldSpec:
    kind: str
    resolution: tuple[int, ...]
    perturbation_amplitude: float = 0.0

    def validate(self) -> None:
        if self.kind not in KIND_DIMENSIONS:
            raise ManifoldSpecError(f"Unknown manifold kind: {self.kind!r}")
        dim = KIND_DIMENSIONS[self.kind]
        if len(self.resolution) != dim:
            raise ManifoldSpecError(f"{self.kind} needs {dim} resolutions, got {len(self.resolution)}")
        if any(int(n) < MIN_RESOLUTION for n in self.resolution):
            raise ManifoldSpecError(f"Resolution must be >= {MIN_RESOLUTION} per direction, got {self.resolution}")
        if self.kind in ("unit_sphere_s2", "unit_sphere_s3") and self.resolution[-1] % 2:
            # the pole identification rotates phi by half a period
            raise ManifoldSpecError(f"Azimuthal resolution must be even, got {self.resolution[-1]}")
        a = float(self.perturbation_amplitude)
        if self.kind == "perturbed_torus":
            if not 0.0 <= a <= MAX_PERTURBATION:
                raise ManifoldSpecError(
                    f"perturbation_amplitude={a} outside [0, {MAX_PERTURBATION}]: metric would not stay positive-definite"
                )
        elif a != 0.0:
            raise ManifoldSpecError(f"perturbation_amplitude only applies to perturbed_torus, not {self.kind}")


@dataclass(frozen=True)
class PoleRule:
    shift_direction: int
    reflect_directions: tuple[int, ...]
    flips: frozenset[int]


@dataclass(frozen=True, eq=False)
class ChartGrid:
    dim: int
    shape: tuple[int, ...]
    extents: tuple[tuple[float, float], ...]
    spacings: tuple[float, ...]
    rules: tuple[str, ...]
    coords: np.ndarray
    poles: dict[int, PoleRule]
    _neighbors: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def neighbor(self, direction: int, offset: int) -> Neighbor:
        key = (direction, offset)
        if key not in self._neighbors:
            self._neighbors[key] = grid_stencils.build_neighbor(self, direction, offset)
        return self._neighbors[key]


@dataclass(frozen=True, eq=False)
class MetricData:
    g: np.ndarray
    g_inv: np.ndarray
    sqrt_det: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True, eq=False)
class ConnectionData:
    # gamma[k, i, j, node] = Gamma^k_ij
    gamma: np.ndarray


@dataclass(frozen=True, eq=False)
class CurvatureData:
    ric: np.ndarray
    ric_mixed: np.ndarray
    scalar: np.ndarray


@dataclass(frozen=True, eq=False)
class ManifoldData:
    spec: ManifoldSpec
    grid: ChartGrid
    metric: MetricData
    connection: ConnectionData
    curvature: CurvatureData

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def n_nodes(self) -> int:
        return self.grid.n_nodes

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def exact_geometry(self) -> bool:
        return self.spec.kind in EXACT_KINDS

    @property
    def h_max(self) -> float:
        return max(self.grid.spacings)

    @property
    def volume(self) -> float:
        return float(self.metric.weights.sum())

    def zeros_vector(self) -> np.ndarray:
        return np.zeros((self.dim, self.n_nodes))


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

def _build_grid(spec: ManifoldSpec) -> ChartGrid:
    res = tuple(int(n) for n in spec.resolution)
    two_pi = 2.0 * math.pi
    if spec.kind in ("flat_torus_t2", "perturbed_torus"):
        extents = ((0.0, two_pi), (0.0, two_pi))
        rules = ("periodic", "periodic")
        poles: dict[int, PoleRule] = {}
    elif spec.kind == "unit_sphere_s2":
        extents = ((0.0, math.pi), (0.0, two_pi))
        rules = ("pole_offset", "periodic")
        poles = {0: PoleRule(shift_direction=1, reflect_directions=(), flips=frozenset({0}))}
    else:
        extents = ((0.0, math.pi), (0.0, math.pi), (0.0, two_pi))
        rules = ("pole_offset", "pole_offset", "periodic")
        # chi -> -chi is the point (-chi, pi - theta, phi + pi)
        poles = {
            0: PoleRule(shift_direction=2, reflect_directions=(1,), flips=frozenset({0, 1})),
            1: PoleRule(shift_direction=2, reflect_directions=(), flips=frozenset({1})),
        }

    spacings = tuple((hi - lo) / n for (lo, hi), n in zip(extents, res))
    axes = []
    for (lo, _hi), n, h, rule in zip(extents, res, spacings, rules):
        offset = 0.5 if rule == "pole_offset" else 0.0
        axes.append(lo + (np.arange(n) + offset) * h)
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([c.reshape(-1) for c in mesh])
    return ChartGrid(
        dim=len(res),
        shape=res,
        extents=extents,
        spacings=spacings,
        rules=rules,
        coords=coords,
        poles=poles,
    )


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------

def _metric_components(spec: ManifoldSpec, grid: ChartGrid) -> np.ndarray:
    m, n = grid.dim, grid.n_nodes
    g = np.zeros((m, m, n))
    c = grid.coords
    if spec.kind == "flat_torus_t2":
        g[0, 0] = g[1, 1] = 1.0
    elif spec.kind == "perturbed_torus":
        psi = 1.0 + spec.perturbation_amplitude * np.sin(c[0]) * np.sin(c[1])
        g[0, 0] = g[1, 1] = psi
    elif spec.kind == "unit_sphere_s2":
        g[0, 0] = 1.0
        g[1, 1] = np.sin(c[0]) ** 2
    else:
        g[0, 0] = 1.0
        g[1, 1] = np.sin(c[0]) ** 2
        g[2, 2] = np.sin(c[0]) ** 2 * np.sin(c[1]) ** 2
    return g


def _metric_data(g: np.ndarray, grid: ChartGrid) -> MetricData:
    blocks = np.moveaxis(g, -1, 0)
    if not np.allclose(blocks, np.swapaxes(blocks, 1, 2), rtol=0.0, atol=1e-14):
        raise ManifoldSpecError("Metric is not symmetric")
    eig_min = float(np.linalg.eigvalsh(blocks).min())
    if eig_min <= 0.0:
        raise ManifoldSpecError(f"Metric is not positive-definite (min eigenvalue {eig_min:.3e})")

    inv = np.linalg.inv(blocks)
    ident = np.einsum("nij,njk->nik", blocks, inv)
    err = float(np.abs(ident - np.eye(grid.dim)).max())
    if err > 1e-12:
        raise ManifoldSpecError(f"g * g^-1 deviates from identity by {err:.3e}")

    sqrt_det = np.sqrt(np.linalg.det(blocks))
    weights = sqrt_det * float(np.prod(grid.spacings))
    return MetricData(g=g, g_inv=np.moveaxis(inv, 0, -1).copy(), sqrt_det=sqrt_det, weights=weights)


# ---------------------------------------------------------------------------
# connection and curvature
# ---------------------------------------------------------------------------

def _closed_form_christoffel(kind: str, grid: ChartGrid) -> np.ndarray:
    m, n = grid.dim, grid.n_nodes
    gamma = np.zeros((m, m, m, n))
    c = grid.coords
    if kind == "unit_sphere_s2":
        th = c[0]
        gamma[0, 1, 1] = -np.sin(th) * np.cos(th)
        gamma[1, 0, 1] = gamma[1, 1, 0] = np.cos(th) / np.sin(th)
    elif kind == "unit_sphere_s3":
        chi, th = c[0], c[1]
        sc, cc = np.sin(chi), np.cos(chi)
        st, ct = np.sin(th), np.cos(th)
        gamma[0, 1, 1] = -sc * cc
        gamma[0, 2, 2] = -sc * cc * st**2
        gamma[1, 0, 1] = gamma[1, 1, 0] = cc / sc
        gamma[1, 2, 2] = -st * ct
        gamma[2, 0, 2] = gamma[2, 2, 0] = cc / sc
        gamma[2, 1, 2] = gamma[2, 2, 1] = ct / st
    return gamma


def christoffel(metric: MetricData, grid: ChartGrid, kind: str | None = None) -> ConnectionData:
    """Levi-Civita connection; closed form for the exact kinds, central differences otherwise."""
    if kind in EXACT_KINDS:
        return ConnectionData(gamma=_closed_form_christoffel(kind, grid))

    # dg[a, b, c] = d_a g_bc
    dg = np.stack([grid_stencils.central_diff(grid, metric.g, 2, a) for a in range(grid.dim)])
    term = np.einsum("ijln->lijn", dg) + np.einsum("jiln->lijn", dg) - dg
    gamma = 0.5 * np.einsum("kln,lijn->kijn", metric.g_inv, term)
    gamma = 0.5 * (gamma + np.swapaxes(gamma, 1, 2))
    return ConnectionData(gamma=gamma)


def _curvature_from_ricci(ric: np.ndarray, metric: MetricData) -> CurvatureData:
    ric = 0.5 * (ric + np.swapaxes(ric, 0, 1))
    mixed = np.einsum("ikn,kjn->ijn", metric.g_inv, ric)
    scalar = np.einsum("ijn,ijn->n", metric.g_inv, ric)
    return CurvatureData(ric=ric, ric_mixed=mixed, scalar=scalar)


def curvature(
    metric: MetricData,
    connection: ConnectionData,
    grid: ChartGrid,
    kind: str | None = None,
) -> CurvatureData:
    """Ricci tensor, mixed Ricci and scalar curvature."""
    if kind in ("unit_sphere_s2", "unit_sphere_s3"):
        return _curvature_from_ricci((grid.dim - 1) * metric.g.copy(), metric)
    if kind == "flat_torus_t2":
        return _curvature_from_ricci(np.zeros_like(metric.g), metric)

    gam = connection.gamma
    # dgam[a, k, i, j] = d_a Gamma^k_ij
    dgam = np.stack([grid_stencils.central_diff(grid, gam, 3, a) for a in range(grid.dim)])
    ric = (
        np.einsum("rrvsn->svn", dgam)
        - np.einsum("vrrsn->svn", dgam)
        + np.einsum("rrln,lvsn->svn", gam, gam)
        - np.einsum("rvln,lrsn->svn", gam, gam)
    )
    return _curvature_from_ricci(ric, metric)


def conformal_torus_exact(grid: ChartGrid, amplitude: float) -> tuple[ConnectionData, np.ndarray]:
    """Closed-form connection and Ricci tensor of g = (1 + a sin x sin y) * identity."""
    x, y = grid.coords
    a = amplitude
    psi = 1.0 + a * np.sin(x) * np.sin(y)
    psi_x = a * np.cos(x) * np.sin(y)
    psi_y = a * np.sin(x) * np.cos(y)
    du = np.stack([psi_x, psi_y]) / (2.0 * psi)

    gamma = np.zeros((2, 2, 2, grid.n_nodes))
    for k in range(2):
        for i in range(2):
            for j in range(2):
                val = np.zeros(grid.n_nodes)
                if k == i:
                    val = val + du[j]
                if k == j:
                    val = val + du[i]
                if i == j:
                    val = val - du[k]
                gamma[k, i, j] = val

    lap_psi = -2.0 * a * np.sin(x) * np.sin(y)
    lap_u = 0.5 * (lap_psi / psi - (psi_x**2 + psi_y**2) / psi**2)
    gauss = -lap_u / psi
    ric = np.zeros((2, 2, grid.n_nodes))
    ric[0, 0] = ric[1, 1] = gauss * psi
    return ConnectionData(gamma=gamma), ric


# ---------------------------------------------------------------------------
# construction and quadrature
# ---------------------------------------------------------------------------

def build_manifold(spec: ManifoldSpec) -> ManifoldData:
    spec.validate()
    grid = _build_grid(spec)
    metric = _metric_data(_metric_components(spec, grid), grid)
    connection = christoffel(metric, grid, kind=spec.kind)
    curv = curvature(metric, connection, grid, kind=spec.kind)
    logger.info(
        "ManifoldDiag: kind=%s shape=%s nodes=%d volume=%.6f R=[%.4f, %.4f]",
        spec.kind,
        grid.shape,
        grid.n_nodes,
        float(metric.weights.sum()),
        float(curv.scalar.min()),
        float(curv.scalar.max()),
    )
    return ManifoldData(spec=spec, grid=grid, metric=metric, connection=connection, curvature=curv)


def integrate_scalar(f: np.ndarray, manifold: ManifoldData) -> float:
    f = np.asarray(f, dtype=float)
    if f.shape != (manifold.n_nodes,):
        raise FieldShapeError(f"Scalar field has shape {f.shape}, expected ({manifold.n_nodes},)")
    return float(np.dot(f, manifold.metric.weights))


def l2_inner(x: np.ndarray, y: np.ndarray, manifold: ManifoldData) -> float:
    expected = (manifold.dim, manifold.n_nodes)
    if x.shape != expected or y.shape != expected:
        raise FieldShapeError(f"Vector fields have shapes {x.shape} and {y.shape}, expected {expected}")
    pointwise = np.einsum("ijn,in,jn->n", manifold.metric.g, x, y)
    return float(np.dot(pointwise, manifold.metric.weights))


def sectional_curvature_range(manifold: ManifoldData) -> tuple[float, float]:
    """Min/max Gaussian curvature K = R/2 (2D manifolds only)."""
    if manifold.dim != 2:
        raise ValueError("Sectional curvature range is reported on 2D manifolds only")
    gauss = 0.5 * manifold.curvature.scalar
    return float(gauss.min()), float(gauss.max())
