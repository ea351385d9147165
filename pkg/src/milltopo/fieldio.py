"""Readers and writers for the on-disk result formats.

Volumes go to legacy structured-points text (cell data, x-fastest, 9
significant digits), planar fields to 8-bit graymaps where solid
renders black. Both writers are deterministic: same field, same bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

VTK_HEADER = "# vtk DataFile Version 3.0"


def _check_field(field: np.ndarray, extents: tuple[int, ...], ndim: int) -> np.ndarray:
    field = np.asarray(field, dtype=float)
    if len(extents) != ndim:
        raise ValueError(f"expected {ndim}D extents, got {extents}")
    n = int(np.prod(extents))
    if field.shape != (n,):
        raise ValueError(f"field has shape {field.shape}, extents {extents} need ({n},)")
    return field


def write_vtk(path, field: np.ndarray, extents: tuple[int, int, int]) -> None:
    field = _check_field(field, extents, 3)
    nx, ny, nz = extents
    lines = [
        VTK_HEADER,
        "density field",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}",
        "ORIGIN 0 0 0",
        "SPACING 1 1 1",
        f"CELL_DATA {field.size}",
        "SCALARS density double 1",
        "LOOKUP_TABLE default",
    ]
    lines.extend(f"{v:.9g}" for v in field)
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk(path) -> tuple[np.ndarray, tuple[int, int, int]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# vtk"):
        raise ValueError(f"{path} is not a legacy volume file")
    dims = None
    start = None
    for i, line in enumerate(lines):
        if line.startswith("DIMENSIONS"):
            dims = tuple(int(t) for t in line.split()[1:])
        if line.startswith("LOOKUP_TABLE"):
            start = i + 1
            break
    if dims is None or len(dims) != 3 or start is None:
        raise ValueError(f"{path} lacks DIMENSIONS or LOOKUP_TABLE")
    extents = tuple(d - 1 for d in dims)
    values = np.array(" ".join(lines[start:]).split(), dtype=float)
    if values.size != np.prod(extents):
        raise ValueError(
            f"{path} holds {values.size} cells, dimensions imply {np.prod(extents)}"
        )
    return values, extents


def write_pgm(path, field: np.ndarray, extents: tuple[int, int]) -> None:
    field = _check_field(field, extents, 2)
    nx, ny = extents
    gray = np.rint(255.0 * (1.0 - field)).astype(int).reshape(ny, nx)
    lines = ["P2", f"{nx} {ny}", "255"]
    # image rows run top-down, grid rows bottom-up
    lines.extend(" ".join(str(v) for v in row) for row in gray[::-1])
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> tuple[np.ndarray, tuple[int, int]]:
    tokens = []
    for line in Path(path).read_text().splitlines():
        body = line.split("#", 1)[0]
        tokens.extend(body.split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path} is not a plain graymap")
    nx, ny, maxval = (int(t) for t in tokens[1:4])
    gray = np.array(tokens[4:], dtype=float)
    if gray.size != nx * ny:
        raise ValueError(f"{path} holds {gray.size} pixels, header says {nx * ny}")
    field = 1.0 - gray.reshape(ny, nx)[::-1] / maxval
    return field.ravel(), (nx, ny)


def read_field(path) -> tuple[np.ndarray, tuple[int, ...]]:
    """Load a density field written by this tool, picking the format by suffix."""
    suffix = Path(path).suffix.lower()
    if suffix == ".vtk":
        return read_vtk(path)
    if suffix == ".pgm":
        return read_pgm(path)
    raise ValueError(f"unsupported field format {suffix!r} (expected .vtk or .pgm)")


def write_field(path, field: np.ndarray, extents: tuple[int, ...]) -> None:
    if len(extents) == 3:
        write_vtk(path, field, extents)
    else:
        write_pgm(path, field, extents)


def write_convergence_csv(path, history) -> None:
    """One row per iteration; floats keep full precision via repr."""
    lines = ["iter,compliance,volume,change"]
    lines.extend(f"{r.iteration},{r.compliance!r},{r.volume!r},{r.change!r}" for r in history)
    Path(path).write_text("\n".join(lines) + "\n")


def read_init_field(path, num_elements: int) -> np.ndarray:
    """Load a starting void field from a .npy file and validate it."""
    if Path(path).suffix.lower() != ".npy":
        raise ValueError(f"init field must be a .npy file, got {path}")
    data = np.load(path, allow_pickle=False)
    field = np.asarray(data, dtype=float).ravel()
    if field.size != num_elements:
        raise ValueError(f"init field holds {field.size} values, grid has {num_elements}")
    if field.min() < 0.0 or field.max() > 1.0:
        raise ValueError("init field values must lie in [0, 1]")
    return field
