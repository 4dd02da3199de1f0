"""Piecewise-linear finite elements on simplicial meshes.

Provides quadrature on simplices, P1 spaces with an interleaved vertex-based
DOF map, operator assembly (mass, anisotropic stiffness, boundary mass), a
sparse system container with Dirichlet constraints, and L2 errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi

from .mesh import Mesh

# -- quadrature ------------------------------------------------------------


@lru_cache(maxsize=None)
def simplex_quadrature(dim: int, degree: int):
    """Quadrature on the reference simplex in barycentric coordinates.

    Returns ``(bary, weights)`` with ``bary`` of shape (q, dim+1) and weights
    summing to one, so that ``int_K f = |K| * sum_q w_q f(x_q)``.
    Rules are exact for polynomials up to ``degree``.
    """
    if degree <= 1:
        return np.full((1, dim + 1), 1.0 / (dim + 1)), np.ones(1)
    if degree == 2:
        if dim == 2:
            a, b = 2.0 / 3.0, 1.0 / 6.0
        else:
            a, b = 0.5854101966249685, 0.1381966011250105
        bary = np.full((dim + 1, dim + 1), b)
        np.fill_diagonal(bary, a)
        return bary, np.full(dim + 1, 1.0 / (dim + 1))
    return _conical_rule(dim, degree)


def _conical_rule(dim, degree):
    # collapsed-coordinate Gauss-Jacobi product rule
    n = (degree + 2) // 2
    pts_1d, wts_1d = [], []
    for k in range(dim):
        alpha = dim - 1 - k
        x, w = roots_jacobi(n, alpha, 0.0)
        pts_1d.append((x + 1.0) / 2.0)
        wts_1d.append(w / 2.0 ** (alpha + 1))
    grids = np.meshgrid(*pts_1d, indexing="ij")
    wgrid = np.meshgrid(*wts_1d, indexing="ij")
    t = [g.ravel() for g in grids]
    w = np.prod([g.ravel() for g in wgrid], axis=0)
    # Duffy map from the unit cube to the simplex
    coords = []
    remaining = np.ones_like(t[0])
    for k in range(dim):
        coords.append(remaining * t[k])
        remaining = remaining * (1.0 - t[k])
    lam = np.column_stack(coords)
    bary = np.column_stack([1.0 - lam.sum(axis=1), lam])
    return bary, w / w.sum()


def quadrature_points(mesh: Mesh, degree: int):
    """Physical quadrature points (m, q, d) and weights (m, q) incl. volumes."""
    bary, w = simplex_quadrature(mesh.dimension, degree)
    x = np.einsum("qa,mad->mqd", bary, mesh.vertices[mesh.cells])
    return x, mesh.cell_volumes[:, None] * w[None, :]


# -- spaces and fields -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeSpace:
    """Vertex-based P1 space; DOF ``vertex * multiplicity + component``."""

    mesh: Mesh
    multiplicity: int = 1

    @property
    def ndofs(self) -> int:
        return self.mesh.n_vertices * self.multiplicity

    def dof(self, vertex, component=0):
        return np.asarray(vertex) * self.multiplicity + component

    def dofs_of_vertices(self, vertices) -> np.ndarray:
        v = np.asarray(vertices, dtype=np.int64)
        return (v[:, None] * self.multiplicity + np.arange(self.multiplicity)).ravel()

    def interpolate(self, func, units="") -> "Field":
        """Nodal interpolant of ``func(x)`` (x of shape (n, d))."""
        vals = np.asarray(func(self.mesh.vertices), dtype=float)
        return Field(self, vals.reshape(-1), units)


@dataclass(frozen=True, eq=False)
class Field:
    """Coefficient vector on a space (one value per DOF)."""

    space: FeSpace
    values: np.ndarray
    units: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if len(v) != self.space.ndofs:
            raise ValueError(f"field has {len(v)} values, space has {self.space.ndofs} DOFs")
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def nodal(self) -> np.ndarray:
        """Values reshaped to (n_vertices, multiplicity)."""
        return self.values.reshape(self.space.mesh.n_vertices, self.space.multiplicity)

    def __add__(self, other):
        return Field(self.space, self.values + _vals(other), self.units)

    def __sub__(self, other):
        return Field(self.space, self.values - _vals(other), self.units)

    def __mul__(self, scalar):
        return Field(self.space, self.values * scalar, self.units)

    __rmul__ = __mul__


def _vals(x):
    return x.values if isinstance(x, Field) else x


# -- sparse systems ------------------------------------------------------------


@dataclass(eq=False)
class SparseSystem:
    """``A x = b`` with optional prescribed DOF values."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)
        self.rhs = np.asarray(self.rhs, dtype=float).reshape(-1)
        n, m = self.matrix.shape
        if n != m or n != len(self.rhs):
            raise ValueError(f"matrix {self.matrix.shape} does not match rhs {len(self.rhs)}")
        self.constrained = np.asarray(self.constrained, dtype=np.int64).reshape(-1)
        self.values = np.broadcast_to(np.asarray(self.values, float), self.constrained.shape).copy()

    def constrain(self, dofs, values=0.0) -> "SparseSystem":
        dofs = np.asarray(dofs, dtype=np.int64).reshape(-1)
        vals = np.broadcast_to(np.asarray(values, float), dofs.shape)
        return SparseSystem(
            self.matrix,
            self.rhs,
            np.concatenate([self.constrained, dofs]),
            np.concatenate([self.values, vals]),
        )

    def applied(self) -> "SparseSystem":
        """Equivalent unconstrained system: identity rows and columns on
        constrained DOFs, prescribed values moved to the right-hand side.
        Later constraints on the same DOF win."""
        if self.constrained.size == 0:
            return self
        n = len(self.rhs)
        x_c = np.zeros(n)
        x_c[self.constrained] = self.values
        mask = np.zeros(n, bool)
        mask[self.constrained] = True
        keep = sp.diags((~mask).astype(float))
        A = keep @ self.matrix @ keep + sp.diags(mask.astype(float))
        b = np.where(mask, x_c, self.rhs - self.matrix @ x_c)
        return SparseSystem(sp.csr_matrix(A), b)

    def residual(self, x) -> float:
        """Relative residual of the constraint-applied system."""
        s = self.applied()
        nb = np.linalg.norm(s.rhs)
        r = np.linalg.norm(s.matrix @ x - s.rhs)
        return float(r / nb) if nb > 0 else float(r)


# -- assembly ------------------------------------------------------------------


class AssemblyPattern:
    """Fixed CSR pattern for repeated assembly of cell-local matrices.

    ``block`` is the number of unknowns per vertex; the local matrix of a cell
    is ordered (vertex, unknown) x (vertex, unknown). Extra couplings (e.g.
    non-local boundary terms) are added through ``extra_pairs``.
    """

    def __init__(self, cells, n_vertices, block=1, extra_pairs=None):
        cells = np.asarray(cells, np.int64)
        nb = cells.shape[1]
        self.block = block
        self.n = n_vertices * block
        local = (cells[:, :, None] * block + np.arange(block)).reshape(len(cells), nb * block)
        rows = np.repeat(local, nb * block, axis=1).ravel()
        cols = np.tile(local, (1, nb * block)).ravel()
        if extra_pairs is not None:
            er, ec = extra_pairs
            rows = np.concatenate([rows, er])
            cols = np.concatenate([cols, ec])
        key = rows * self.n + cols
        uniq, inverse = np.unique(key, return_inverse=True)
        self.rows = uniq // self.n
        self.cols = uniq % self.n
        self._cell_slot = inverse[: len(cells) * (nb * block) ** 2]
        self._extra_slot = inverse[len(cells) * (nb * block) ** 2:]
        indptr = np.zeros(self.n + 1, np.int64)
        np.add.at(indptr, self.rows + 1, 1)
        self.indptr = np.cumsum(indptr)
        self.indices = self.cols.astype(np.int32 if self.n < 2**31 else np.int64)
        self.nnz = len(uniq)
        diag = np.flatnonzero(self.rows == self.cols)
        self.diag_slot = np.full(self.n, -1, np.int64)
        self.diag_slot[self.rows[diag]] = diag

    def slots(self, rows, cols) -> np.ndarray:
        """Positions of (row, col) entries in the data array (must exist)."""
        key = np.asarray(rows, np.int64) * self.n + np.asarray(cols, np.int64)
        pos = np.searchsorted(self.rows * self.n + self.cols, key)
        return pos

    def data(self, local, extra=None) -> np.ndarray:
        """Sum cell-local matrices (m, k, k) into the pattern's data array."""
        out = np.bincount(self._cell_slot, weights=local.reshape(-1), minlength=self.nnz)
        if extra is not None:
            out += np.bincount(self._extra_slot, weights=extra, minlength=self.nnz)
        return out

    def matrix(self, data) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


def _scatter(cells, local, n):
    nb = cells.shape[1]
    rows = np.repeat(cells, nb, axis=1).ravel()
    cols = np.tile(cells, (1, nb)).ravel()
    return sp.coo_matrix((local.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()


def local_mass(volumes, dim, weights=None):
    """Consistent P1 mass matrices, optionally scaled by cellwise weights."""
    nb = dim + 1
    ref = (np.ones((nb, nb)) + np.eye(nb)) / ((dim + 1) * (dim + 2))
    scale = volumes if weights is None else volumes * weights
    return scale[:, None, None] * ref[None]


def local_stiffness(mesh: Mesh, K=None):
    """Cell stiffness matrices ``|K| G K G^T`` for per-cell tensors ``K``."""
    G = mesh.cell_gradients
    if K is None:
        GK = G
    else:
        GK = np.einsum("mad,mde->mae", G, K)
    return mesh.cell_volumes[:, None, None] * np.einsum("mae,mbe->mab", GK, G)


def check_spd(K, dim, n_cells):
    """Broadcast ``K`` to (m, d, d) and verify symmetry and positivity."""
    K = np.asarray(K, dtype=float)
    if K.ndim == 0:
        K = K * np.eye(dim)
    if K.ndim == 2:
        K = np.broadcast_to(K, (n_cells, dim, dim))
    if K.shape != (n_cells, dim, dim):
        raise ValueError(f"coefficient tensor has shape {K.shape}")
    if not np.allclose(K, K.transpose(0, 2, 1), rtol=1e-12, atol=0.0):
        raise ValueError("coefficient tensor is not symmetric")
    eig = np.linalg.eigvalsh(K)
    bad = np.flatnonzero(eig[:, 0] <= 0.0)
    if bad.size:
        raise ValueError(f"coefficient tensor not positive definite in cell {bad[0]}")
    return K


def assemble_operator(space: FeSpace, kind: str, K=None, patch=None, weights=None) -> sp.csr_matrix:
    """Assemble a P1 operator.

    Parameters
    ----------
    kind : {"mass", "stiffness", "boundary_mass"}
    K : scalar, (d, d) or (m, d, d) SPD tensor for ``"stiffness"`` (default I)
    patch : tag(s) for ``"boundary_mass"``
    weights : optional cellwise (mass) or facetwise (boundary mass) scaling

    For multiplicity > 1 the scalar operator acts on every component.
    """
    mesh = space.mesh
    d, n = mesh.dimension, mesh.n_vertices
    if kind == "mass":
        A = _scatter(mesh.cells, local_mass(mesh.cell_volumes, d, weights), n)
    elif kind == "stiffness":
        Kc = None if K is None else check_spd(K, d, mesh.n_cells)
        A = _scatter(mesh.cells, local_stiffness(mesh, Kc), n)
    elif kind == "boundary_mass":
        if patch is None:
            raise ValueError("boundary_mass needs a patch")
        idx = mesh.facets_of(patch)
        areas = mesh.facet_areas[idx]
        A = _scatter(mesh.facets[idx], local_mass(areas, d - 1, None if weights is None else weights), n)
    else:
        raise ValueError(f"unknown operator kind {kind!r}")
    if space.multiplicity > 1:
        A = sp.kron(A, sp.identity(space.multiplicity), format="csr")
    return A


def load_vector(space: FeSpace, func=None, cellwise=None, degree=2) -> np.ndarray:
    """``int f phi_i`` for a scalar/vector function or cellwise constants."""
    mesh = space.mesh
    m = space.multiplicity
    nb = mesh.dimension + 1
    if cellwise is not None:
        c = np.asarray(cellwise, float).reshape(mesh.n_cells, m)
        local = (mesh.cell_volumes / nb)[:, None, None] * c[:, None, :] * np.ones((1, nb, 1))
    else:
        bary, w = simplex_quadrature(mesh.dimension, degree)
        x, W = quadrature_points(mesh, degree)
        f = np.asarray(func(x.reshape(-1, mesh.dimension)), float).reshape(mesh.n_cells, len(w), m)
        local = np.einsum("mq,qa,mqc->mac", W, bary, f)
    out = np.zeros((mesh.n_vertices, m))
    for a in range(nb):
        np.add.at(out, mesh.cells[:, a], local[:, a, :])
    return out.reshape(-1)


def cell_average(mesh: Mesh, nodal) -> np.ndarray:
    """Cell means of a P1 scalar field."""
    return np.asarray(nodal)[mesh.cells].mean(axis=1)


def integrate(mesh: Mesh, nodal) -> float:
    """Exact integral of a P1 scalar field."""
    return float(np.dot(cell_average(mesh, nodal), mesh.cell_volumes))


def l2_error(field: Field, exact, degree: int = 4) -> float:
    """``||field - exact||_L2`` by simplex quadrature (exact to ``degree``)."""
    space = field.space
    mesh = space.mesh
    m = space.multiplicity
    bary, w = simplex_quadrature(mesh.dimension, max(degree, 2))
    x, W = quadrature_points(mesh, max(degree, 2))
    uh = np.einsum("qa,mac->mqc", bary, field.nodal[mesh.cells])
    ex = np.asarray(exact(x.reshape(-1, mesh.dimension)), float).reshape(mesh.n_cells, len(w), m)
    return math.sqrt(float(np.einsum("mq,mqc->", W, (uh - ex) ** 2)))


def write_matrix_market(matrix, path) -> None:
    """Dump a sparse matrix in MatrixMarket coordinate format."""
    from scipy.io import mmwrite

    mmwrite(str(path), sp.coo_matrix(matrix))
