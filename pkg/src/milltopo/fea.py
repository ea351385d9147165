"""Voxel finite elements: SIMP-interpolated stiffness, solve, compliance chain.

Bilinear quads (plane stress, unit thickness) in 2D, trilinear hexes in 3D,
all with unit edge length. Element e gets modulus

    E(e) = E_min + rho(e)^p * (E0 - E_min)

and the global system K(rho) U = F is solved on the free DOFs, either by
Jacobi-preconditioned conjugate gradients (default for 3D, warm-startable)
or a direct sparse factorization (default for 2D).

Node (i, j, k) has index i + (nelx+1) * (j + (nely+1) * k), mirroring the
element convention; DOFs interleave as ndim * node + component.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve


class SolverError(RuntimeError):
    """Iterative solve failed; carries the final relative residual."""

    def __init__(self, message: str, relative_residual: float):
        super().__init__(message)
        self.relative_residual = relative_residual


@dataclass(frozen=True)
class MaterialModel:
    """SIMP interpolation constants."""

    youngs_modulus: float = 1.0
    poisson_ratio: float = 0.3
    min_modulus: float = 1e-9
    penalization: float = 3.0

    def __post_init__(self):
        if not 0 < self.min_modulus < self.youngs_modulus:
            raise ValueError("min_modulus must satisfy 0 < E_min < E0")
        if self.penalization < 1:
            raise ValueError(f"penalization must be >= 1, got {self.penalization}")
        if not -1 < self.poisson_ratio < 0.5:
            raise ValueError(f"poisson_ratio outside (-1, 0.5): {self.poisson_ratio}")

    def modulus(self, rho: np.ndarray) -> np.ndarray:
        e0, emin = self.youngs_modulus, self.min_modulus
        return emin + np.asarray(rho) ** self.penalization * (e0 - emin)


def element_stiffness(model: MaterialModel, dimension: int) -> np.ndarray:
    """Unit-modulus element stiffness matrix, 8x8 (2D) or 24x24 (3D).

    Full Gauss integration (2 points per axis) of the isoparametric
    bilinear quad / trilinear hex on the unit element; exact for these
    polynomial integrands. 2D is plane stress with unit thickness.
    """
    if dimension not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {dimension}")
    nu = model.poisson_ratio
    if dimension == 2:
        signs = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
        dmat = np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]]) / (1 - nu**2)
    else:
        signs = np.array(
            [
                [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
                [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
            ],
            dtype=float,
        )
        lam, mu = nu, (1 - 2 * nu) / 2
        dmat = np.array(
            [
                [1 - nu, lam, lam, 0, 0, 0],
                [lam, 1 - nu, lam, 0, 0, 0],
                [lam, lam, 1 - nu, 0, 0, 0],
                [0, 0, 0, mu, 0, 0],
                [0, 0, 0, 0, mu, 0],
                [0, 0, 0, 0, 0, mu],
            ]
        ) / ((1 + nu) * (1 - 2 * nu))
    nn = signs.shape[0]
    k0 = np.zeros((dimension * nn, dimension * nn))
    gauss = np.array([-1.0, 1.0]) / np.sqrt(3.0)
    for point in itertools.product(gauss, repeat=dimension):
        # dN/dx = 2 dN/dxi on the unit element (Jacobian 0.5 I)
        dndx = np.empty((nn, dimension))
        for a in range(dimension):
            grad = 0.5 * signs[:, a]
            for b in range(dimension):
                if b != a:
                    grad = grad * 0.5 * (1 + point[b] * signs[:, b])
            dndx[:, a] = 2.0 * grad
        if dimension == 2:
            bmat = np.zeros((3, 8))
            bmat[0, 0::2] = dndx[:, 0]
            bmat[1, 1::2] = dndx[:, 1]
            bmat[2, 0::2] = dndx[:, 1]
            bmat[2, 1::2] = dndx[:, 0]
        else:
            bmat = np.zeros((6, 24))
            bmat[0, 0::3] = dndx[:, 0]
            bmat[1, 1::3] = dndx[:, 1]
            bmat[2, 2::3] = dndx[:, 2]
            bmat[3, 0::3] = dndx[:, 1]
            bmat[3, 1::3] = dndx[:, 0]
            bmat[4, 1::3] = dndx[:, 2]
            bmat[4, 2::3] = dndx[:, 1]
            bmat[5, 0::3] = dndx[:, 2]
            bmat[5, 2::3] = dndx[:, 0]
        k0 += bmat.T @ dmat @ bmat * 0.5**dimension
    return 0.5 * (k0 + k0.T)  # scrub float asymmetry from the accumulation


def node_dims(grid) -> tuple[int, ...]:
    return tuple(d + 1 for d in grid.dims)


def node_index(grid, coords: tuple[int, ...]) -> int:
    """Flat node index at integer lattice coords (x-fastest)."""
    nd = node_dims(grid)
    if len(coords) != len(nd):
        raise ValueError(f"expected {len(nd)} coords, got {len(coords)}")
    idx = 0
    for c, d in zip(reversed(coords), reversed(nd)):
        if not 0 <= c < d:
            raise ValueError(f"node coords {coords} outside lattice {nd}")
        idx = idx * d + c
    return idx


def nearest_node(grid, point) -> int:
    """Node closest to a physical point; coordinates round half to even."""
    coords = []
    for a in range(grid.ndim):
        c = int(np.rint(point[a]))
        coords.append(min(max(c, 0), grid.dims[a]))
    return node_index(grid, tuple(coords))


def face_nodes(grid, axis: int, side: int) -> np.ndarray:
    """All node indices on one boundary face (side 0 = min face, 1 = max face)."""
    nd = node_dims(grid)
    ranges = [np.arange(n) for n in nd]
    ranges[axis] = np.array([0 if side == 0 else nd[axis] - 1])
    mesh = np.meshgrid(*ranges, indexing="ij")
    strides = np.cumprod(np.concatenate(([1], np.array(nd[:-1]))))
    flat = sum(m.ravel() * s for m, s in zip(mesh, strides))
    return np.sort(flat)


@dataclass
class FeaProblem:
    """Grid, supports, and point loads for one analysis configuration.

    fixed_dofs lists constrained DOF indices; loads are (node, component,
    magnitude) triples summed into the force vector. 2D is plane stress
    with unit thickness.
    """

    grid: object
    fixed_dofs: np.ndarray
    loads: list
    material: MaterialModel = MaterialModel()
    plane_stress: bool = True
    ndof: int = field(init=False)
    force: np.ndarray = field(init=False, repr=False)
    free: np.ndarray = field(init=False, repr=False)
    edof: np.ndarray = field(init=False, repr=False)
    k0: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ndim = self.grid.ndim
        if ndim == 2 and not self.plane_stress:
            raise ValueError("2D problems support plane stress only")
        n_nodes = int(np.prod(node_dims(self.grid)))
        self.ndof = ndim * n_nodes
        self.fixed_dofs = np.unique(np.asarray(self.fixed_dofs, dtype=np.intp))
        if self.fixed_dofs.size and (
            self.fixed_dofs[0] < 0 or self.fixed_dofs[-1] >= self.ndof
        ):
            raise ValueError("fixed_dofs outside the DOF range")
        if self.fixed_dofs.size >= self.ndof:
            raise ValueError("every DOF is fixed; nothing to solve")
        if not self.loads:
            raise ValueError("at least one point load is required")
        self.force = np.zeros(self.ndof)
        for node, comp, mag in self.loads:
            if not 0 <= int(node) < n_nodes:
                raise ValueError(f"load node {node} outside lattice")
            if not 0 <= int(comp) < ndim:
                raise ValueError(f"load component {comp} invalid for {ndim}D")
            if not np.isfinite(mag):
                raise ValueError("load magnitudes must be finite")
            self.force[ndim * int(node) + int(comp)] += float(mag)
        if not np.any(self.force):
            raise ValueError("loads cancel to an all-zero force vector")
        mask = np.ones(self.ndof, dtype=bool)
        mask[self.fixed_dofs] = False
        self.free = np.flatnonzero(mask)
        self.edof = _element_dofs(self.grid)
        self.k0 = element_stiffness(self.material, ndim)
        self._pattern = None

    def assembly(self):
        if self._pattern is None:
            self._pattern = _AssemblyPattern(self)
        return self._pattern


def _element_dofs(grid) -> np.ndarray:
    dims = grid.dims
    ndim = grid.ndim
    coords = np.unravel_index(np.arange(grid.num_elements), dims, order="F")
    if ndim == 2:
        nnx = dims[0] + 1
        n0 = coords[0] + nnx * coords[1]
        nodes = np.stack([n0, n0 + 1, n0 + 1 + nnx, n0 + nnx], axis=1)
    else:
        nnx, nny = dims[0] + 1, dims[1] + 1
        n0 = coords[0] + nnx * (coords[1] + nny * coords[2])
        layer = nnx * nny
        base = np.stack([n0, n0 + 1, n0 + 1 + nnx, n0 + nnx], axis=1)
        nodes = np.concatenate([base, base + layer], axis=1)
    k = ndim * nodes.shape[1]
    edof = np.empty((grid.num_elements, k), dtype=np.int64)
    for c in range(ndim):
        edof[:, c::ndim] = ndim * nodes + c
    return edof


class _AssemblyPattern:
    """Fixed-sparsity map from element moduli to CSR data of K on free DOFs.

    Built once per problem; per solve the stiffness update is a single
    sparse mat-vec, keeping 3D optimization loops away from repeated
    COO-to-CSR conversions.
    """

    def __init__(self, problem: FeaProblem):
        nfree = problem.free.size
        free_map = np.full(problem.ndof, -1, dtype=np.int64)
        free_map[problem.free] = np.arange(nfree)
        emap = free_map[problem.edof]  # (N, k), -1 marks fixed
        n, k = emap.shape
        rows = np.broadcast_to(emap[:, :, None], (n, k, k))
        cols = np.broadcast_to(emap[:, None, :], (n, k, k))
        keep = (rows >= 0) & (cols >= 0)
        rows = rows[keep]
        cols = cols[keep]
        elems = np.broadcast_to(np.arange(n)[:, None, None], (n, k, k))[keep]
        vals = np.broadcast_to(problem.k0[None, :, :], (n, k, k))[keep]

        order = np.lexsort((cols, rows))
        rs, cs = rows[order], cols[order]
        new_group = np.empty(rs.size, dtype=bool)
        new_group[0] = True
        new_group[1:] = (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])
        slot_sorted = np.cumsum(new_group) - 1
        nnz = int(slot_sorted[-1]) + 1
        slots = np.empty_like(slot_sorted)
        slots[order] = slot_sorted

        indptr = np.zeros(nfree + 1, dtype=np.int64)
        np.cumsum(np.bincount(rs[new_group], minlength=nfree), out=indptr[1:])
        self.indices = cs[new_group].astype(np.int32)
        self.indptr = indptr
        self.shape = (nfree, nfree)
        self.weights = sparse.csr_matrix(
            (vals, (slots, elems)), shape=(nnz, problem.grid.num_elements)
        )

    def stiffness(self, moduli: np.ndarray) -> sparse.csr_matrix:
        data = self.weights @ moduli
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=self.shape)


@dataclass(frozen=True)
class SolveResult:
    """Displacements plus the compliance bookkeeping downstream stages need."""

    displacement: np.ndarray
    compliance: float
    element_energies: np.ndarray  # u_e^T k0 u_e, unit modulus
    method: str
    iterations: int
    relative_residual: float
    residual_history: np.ndarray


def _pcg(mat, b, x0, diag, rtol, maxiter):
    x = x0.copy()
    r = b - mat @ x
    bnorm = float(np.linalg.norm(b))
    history = [float(np.linalg.norm(r))]
    z = r / diag
    p = z.copy()
    rz = float(r @ z)
    it = 0
    while history[-1] > rtol * bnorm:
        if it >= maxiter:
            raise SolverError(
                f"PCG stalled at relative residual {history[-1] / bnorm:.3e} "
                f"after {maxiter} iterations (target {rtol:.1e})",
                relative_residual=history[-1] / bnorm,
            )
        ap = mat @ p
        pap = float(p @ ap)
        if pap <= 0:
            raise SolverError(
                "system matrix is not positive definite on the free DOFs; "
                "check that supports remove all rigid-body modes",
                relative_residual=history[-1] / bnorm,
            )
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        history.append(float(np.linalg.norm(r)))
        z = r / diag
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    return x, np.array(history)


def solve(
    problem: FeaProblem,
    rho_p: np.ndarray,
    solver: str = "auto",
    rtol: float = 1e-8,
    maxiter: int | None = None,
    warm_start: np.ndarray | None = None,
) -> SolveResult:
    """Solve K(rho_p) U = F and return displacements, compliance, energies.

    Parameters
    ----------
    rho_p : np.ndarray
        Composite physical density per element, each value in [0, 1].
    solver : str
        "auto" (direct for 2D, cg for 3D), "direct", or "cg".
    rtol : float
        Relative residual target for the iterative path.
    warm_start : np.ndarray, optional
        Full displacement vector from a previous solve of the same problem.
    """
    rho_p = np.asarray(rho_p, dtype=float)
    if rho_p.shape != (problem.grid.num_elements,):
        raise ValueError(f"rho_p must have shape ({problem.grid.num_elements},)")
    if rho_p.min() < -1e-12 or rho_p.max() > 1 + 1e-12:
        raise ValueError("rho_p entries must lie in [0, 1]")
    if solver == "auto":
        solver = "direct" if problem.grid.ndim == 2 else "cg"
    if solver not in ("direct", "cg"):
        raise ValueError(f"unknown solver {solver!r}")

    moduli = problem.material.modulus(np.clip(rho_p, 0.0, 1.0))
    kmat = problem.assembly().stiffness(moduli)
    b = problem.force[problem.free]
    u = np.zeros(problem.ndof)

    if solver == "direct":
        x = spsolve(kmat.tocsc(), b)
        res = float(np.linalg.norm(b - kmat @ x))
        history = np.array([res])
        iterations = 0
    else:
        if maxiter is None:
            maxiter = max(3000, min(2 * b.size, 25000))
        x0 = np.zeros(b.size) if warm_start is None else np.asarray(warm_start)[problem.free]
        x, history = _pcg(kmat, b, x0, kmat.diagonal(), rtol, maxiter)
        iterations = len(history) - 1
    u[problem.free] = x

    compliance = float(problem.force @ u)
    ue = u[problem.edof]
    energies = np.einsum("ij,jk,ik->i", ue, problem.k0, ue)
    bnorm = float(np.linalg.norm(b))
    return SolveResult(
        displacement=u,
        compliance=compliance,
        element_energies=energies,
        method=solver,
        iterations=iterations,
        relative_residual=float(history[-1] / bnorm) if bnorm else 0.0,
        residual_history=history,
    )


def compliance_sensitivity(
    problem: FeaProblem, rho_p: np.ndarray, result: SolveResult
) -> np.ndarray:
    """dC / d(rho_p): -p * rho^(p-1) * (E0 - E_min) * element energy. All <= 0."""
    m = problem.material
    rho_p = np.asarray(rho_p, dtype=float)
    scale = m.penalization * (m.youngs_modulus - m.min_modulus)
    return -scale * rho_p ** (m.penalization - 1) * result.element_energies


def volume_fraction(rho_p: np.ndarray) -> float:
    """Mean element density."""
    return float(np.mean(rho_p))


def volume_sensitivity(num_elements: int) -> np.ndarray:
    """dV / d(rho_p), the constant 1/N."""
    return np.full(num_elements, 1.0 / num_elements)
