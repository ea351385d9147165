"""Regular voxel grid used by every downstream stage.

Elements are unit squares (2D) or cubes (3D) with edge length 1. Element
(i, j, k) has its center at (i + 0.5, j + 0.5, k + 0.5) and flat index
i + nelx * (j + nely * k), i.e. x runs fastest, then y, then z.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class StructuredGrid:
    """Axis-aligned box of unit elements. Treat as immutable after build_grid."""

    dims: tuple[int, ...]
    centers: np.ndarray = field(repr=False)  # (num_elements, 3); z column is 0 on 2D grids
    h: float = 1.0

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def num_elements(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    def element_index(self, coords: tuple[int, ...]) -> int:
        """Flat index of the element at integer lattice coords (x-fastest)."""
        if len(coords) != self.ndim:
            raise ValueError(f"expected {self.ndim} coords, got {len(coords)}")
        idx = 0
        for c, d in zip(reversed(coords), reversed(self.dims)):
            if not 0 <= c < d:
                raise ValueError(f"coords {coords} outside grid {self.dims}")
            idx = idx * d + c
        return idx

    def element_coords(self, index: int) -> tuple[int, ...]:
        """Inverse of element_index."""
        if not 0 <= index < self.num_elements:
            raise ValueError(f"element {index} outside grid of {self.num_elements}")
        out = []
        for d in self.dims:
            out.append(index % d)
            index //= d
        return tuple(out)


def build_grid(extents: tuple[int, ...]) -> StructuredGrid:
    """Construct a StructuredGrid from per-axis element counts.

    Parameters
    ----------
    extents : tuple of int
        (nelx, nely) or (nelx, nely, nelz), every entry >= 1.
    """
    extents = tuple(int(e) for e in extents)
    if len(extents) not in (2, 3):
        raise ValueError(f"extents must have 2 or 3 entries, got {len(extents)}")
    if any(e < 1 for e in extents):
        raise ValueError(f"extents must be positive, got {extents}")

    ids = np.arange(int(np.prod(extents)))
    centers = np.zeros((ids.size, 3))
    rem = ids
    for axis, d in enumerate(extents):
        centers[:, axis] = (rem % d) + 0.5
        rem = rem // d
    return StructuredGrid(dims=extents, centers=centers)


def neighbors_within_radius(
    grid: StructuredGrid, element: int, radius: float
) -> list[tuple[int, float]]:
    """All elements whose center lies strictly closer than `radius`.

    Returns (index, distance) pairs sorted by index. The element itself is
    always included (distance 0). Membership is strict: an element exactly
    at `radius` is excluded, so its filter weight would be zero anyway.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    delta = grid.centers - grid.centers[element]
    dist = np.sqrt(np.einsum("ij,ij->i", delta, delta))
    keep = np.flatnonzero(dist < radius)
    return [(int(i), float(dist[i])) for i in keep]
