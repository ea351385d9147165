"""Linear density filter mapping the void design field to a smoothed material field.

The filtered material density at element f is a cone-weighted average of the
material fractions (1 - rho_v) of the elements within the filter radius:

    rho_f(f) = sum_i max(0, r - dist(f, i)) * (1 - rho_v(i)) / S_f

with S_f the sum of the weights. The weight matrix is symmetric; the
normalized operator is not, because rows are scaled by different S_f.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .grid import StructuredGrid


@dataclass(frozen=True)
class FilterKernel:
    """Precomputed filter operator for one grid + radius."""

    radius: float
    row_sums: np.ndarray = field(repr=False)
    operator: sparse.csr_matrix = field(repr=False)  # diag(1/S) @ weights
    operator_t: sparse.csr_matrix = field(repr=False)  # operator.T, stored as CSR

    def smooth(self, material: np.ndarray) -> np.ndarray:
        """Normalized weighted average of a material-fraction field."""
        return self.operator @ material

    def smooth_transpose(self, grad: np.ndarray) -> np.ndarray:
        """Transpose of smooth(), used by the adjoint chain."""
        return self.operator_t @ grad


def build_filter(grid: StructuredGrid, radius: float) -> FilterKernel:
    """Assemble the sparse cone-weight filter for `grid`.

    Weights are max(0, radius - center_distance); elements at or beyond the
    radius contribute nothing and are not stored. Neighbor enumeration uses
    the integer offset stencil, so cost is O(N * stencil size).

    Parameters
    ----------
    grid : StructuredGrid
    radius : float
        Filter radius in element widths, > 0.
    """
    if radius <= 0:
        raise ValueError(f"filter radius must be positive, got {radius}")

    dims = np.array(grid.dims)
    ndim = grid.ndim
    reach = int(np.ceil(radius - 1e-12)) - 1  # largest |offset| with any weight
    reach = max(reach, 0)
    axes = [np.arange(-reach, reach + 1)] * ndim
    offsets = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, ndim)
    dist = np.sqrt((offsets**2).sum(axis=1))
    keep = dist < radius
    offsets, dist = offsets[keep], dist[keep]

    coords = np.unravel_index(np.arange(grid.num_elements), grid.dims, order="F")
    coords = np.stack(coords, axis=1)  # (N, ndim) integer lattice coords

    rows, cols, vals = [], [], []
    strides = np.cumprod(np.concatenate(([1], dims[:-1])))
    flat = coords @ strides
    for off, d in zip(offsets, dist):
        shifted = coords + off
        ok = np.all((shifted >= 0) & (shifted < dims), axis=1)
        rows.append(flat[ok])
        cols.append(shifted[ok] @ strides)
        vals.append(np.full(ok.sum(), radius - d))

    weights = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.num_elements, grid.num_elements),
    ).tocsr()
    row_sums = np.asarray(weights.sum(axis=1)).ravel()
    operator = sparse.diags(1.0 / row_sums) @ weights
    return FilterKernel(
        radius=float(radius),
        row_sums=row_sums,
        operator=operator.tocsr(),
        operator_t=operator.T.tocsr(),
    )


def apply_filter(kernel: FilterKernel, rho_v: np.ndarray) -> np.ndarray:
    """Filtered material field rho_f from the void design field rho_v."""
    return kernel.smooth(1.0 - np.asarray(rho_v))


def filter_backprop(kernel: FilterKernel, grad_f: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. rho_f back to the void variables.

    The minus sign from d(1 - rho_v)/d(rho_v) lives here, so callers chain
    stage adjoints without tracking signs themselves.
    """
    return -kernel.smooth_transpose(np.asarray(grad_f))
