"""Neighbor tables and finite-difference stencils on chart grids.

Every difference operator in the code base goes through the tables built
here, so periodic wrap-around and the pole identification of the sphere
charts are handled in exactly one place. A node's neighbor at offset ``k``
along a direction is either an ordinary grid node or, across a pole, the
mirror node of the identified point; in the latter case tensor components
along the reflected directions change sign.

Fields are stored flat: a covariant rank-r tensor is an array of shape
``(m,)*r + (N,)`` with the node axis last, nodes in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

if TYPE_CHECKING:
    from services.manifold import ChartGrid

# h^2 * delta+ delta+ delta- : offsets -1, 0, 1, 2
THIRD_DIFF_STENCIL = ((-1, -1.0), (0, 3.0), (1, -3.0), (2, 1.0))


@dataclass(frozen=True)
class Neighbor:
    index: np.ndarray
    reflected: np.ndarray


def build_neighbor(grid: "ChartGrid", direction: int, offset: int) -> Neighbor:
    shape = grid.shape
    n = shape[direction]
    multi = np.indices(shape).reshape(grid.dim, -1).copy()
    j = multi[direction] + offset

    if grid.rules[direction] == "periodic":
        multi[direction] = np.mod(j, n)
        reflected = np.zeros(multi.shape[1], dtype=bool)
    else:
        low = j < 0
        high = j >= n
        reflected = low | high
        j = np.where(low, -1 - j, j)
        j = np.where(high, 2 * n - 1 - j, j)
        multi[direction] = j
        rule = grid.poles[direction]
        ns = shape[rule.shift_direction]
        multi[rule.shift_direction] = np.where(
            reflected,
            np.mod(multi[rule.shift_direction] + ns // 2, ns),
            multi[rule.shift_direction],
        )
        for r in rule.reflect_directions:
            multi[r] = np.where(reflected, shape[r] - 1 - multi[r], multi[r])

    index = np.ravel_multi_index(tuple(multi), shape)
    return Neighbor(index=index, reflected=reflected)


def component_signs(grid: "ChartGrid", direction: int, offset: int) -> np.ndarray:
    """(m, N) array of +-1: sign picked up by each component at the neighbor."""
    nb = grid.neighbor(direction, offset)
    signs = np.ones((grid.dim, grid.n_nodes))
    if grid.rules[direction] == "periodic" or not nb.reflected.any():
        return signs
    for c in grid.poles[direction].flips:
        signs[c, nb.reflected] = -1.0
    return signs


def shift(grid: "ChartGrid", field: np.ndarray, rank: int, direction: int, offset: int) -> np.ndarray:
    nb = grid.neighbor(direction, offset)
    out = field[..., nb.index]
    if rank == 0 or grid.rules[direction] == "periodic" or not nb.reflected.any():
        return out
    signs = component_signs(grid, direction, offset)
    m = grid.dim
    for axis in range(rank):
        bshape = [1] * rank + [grid.n_nodes]
        bshape[axis] = m
        out = out * signs.reshape(bshape)
    return out


def central_diff(grid: "ChartGrid", field: np.ndarray, rank: int, direction: int) -> np.ndarray:
    h = grid.spacings[direction]
    return (shift(grid, field, rank, direction, 1) - shift(grid, field, rank, direction, -1)) / (2.0 * h)


def third_diff(grid: "ChartGrid", field: np.ndarray, rank: int, direction: int) -> np.ndarray:
    h = grid.spacings[direction]
    out = np.zeros_like(field, dtype=float)
    for offset, coef in THIRD_DIFF_STENCIL:
        out = out + coef * shift(grid, field, rank, direction, offset)
    return out / h


def shift_matrix(grid: "ChartGrid", direction: int, offset: int, flip: bool) -> sp.csr_matrix:
    """Sparse N x N neighbor matrix for one tensor component.

    ``flip`` states whether the component changes sign across a pole.
    """
    nb = grid.neighbor(direction, offset)
    n = grid.n_nodes
    data = np.ones(n)
    if flip:
        data[nb.reflected] = -1.0
    return sp.csr_matrix((data, (np.arange(n), nb.index)), shape=(n, n))


def _flips(grid: "ChartGrid", direction: int, component: int | None) -> bool:
    if component is None or grid.rules[direction] == "periodic":
        return False
    return component in grid.poles[direction].flips


def central_diff_matrix(grid: "ChartGrid", direction: int, component: int | None = None) -> sp.csr_matrix:
    flip = _flips(grid, direction, component)
    h = grid.spacings[direction]
    return ((shift_matrix(grid, direction, 1, flip) - shift_matrix(grid, direction, -1, flip)) / (2.0 * h)).tocsr()


def third_diff_matrix(grid: "ChartGrid", direction: int, component: int | None = None) -> sp.csr_matrix:
    flip = _flips(grid, direction, component)
    h = grid.spacings[direction]
    mat = sp.csr_matrix((grid.n_nodes, grid.n_nodes))
    for offset, coef in THIRD_DIFF_STENCIL:
        mat = mat + coef * shift_matrix(grid, direction, offset, flip)
    return (mat / h).tocsr()


def central_diff_kernel_classes(grid: "ChartGrid") -> tuple[int, np.ndarray]:
    """Node classes on which the scalar central differences are blind.

    A scalar has zero central difference in every direction exactly when it is
    constant on each class: the odd/even sublattices of a periodic direction,
    linked up across poles. Returns the class count and a label per node.
    """
    n = grid.n_nodes
    rows = np.concatenate([grid.neighbor(d, 1).index for d in range(grid.dim)])
    cols = np.concatenate([grid.neighbor(d, -1).index for d in range(grid.dim)])
    links = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    count, labels = connected_components(links, directed=False)
    return int(count), labels
