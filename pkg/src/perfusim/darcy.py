"""Three-compartment Darcy perfusion model.

With the Darcy velocities ``u_i = -K_i grad p_i`` eliminated, the pressures
solve, for i = 1, 2, 3,

    -div(K_i grad p_i) + sum_k beta_ik (p_i - p_k) + [i=3] gamma p_3
        = [i=1] g_1 + [i=3] gamma p_bed

with homogeneous Neumann conditions on the whole boundary. Compartment 1
receives the coronary inflow ``g_1``; compartment 3 drains into the coronary
bed at pressure ``p_bed = a1 p_LV + a2``.

Unknowns are ordered compartment-major: DOF ``i * n_vertices + v``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import FeSpace, Field, SparseSystem, assemble_operator, check_spd, integrate, load_vector
from .linalg import SolverError, solve_sparse
from .mesh import Mesh
from .units import MINUTE

N_COMP = 3
MBF_SCALE = MINUTE * 100.0  # 1/s -> ml/min per 100 ml


class DarcyError(ValueError):
    """Singular or incompatible Darcy problem."""


def bed_pressure(p_lv, a1=0.4, a2=1500.0):
    """Coronary-bed pressure ``a1 * p_LV + a2`` (Pa)."""
    if np.ndim(p_lv):
        return a1 * np.asarray(p_lv, float) + a2
    return a1 * float(p_lv) + a2


@dataclass(frozen=True, eq=False)
class CompartmentParams:
    """Permeabilities, exchange and bed-sink coefficients.

    Parameters
    ----------
    K : sequence of 3
        Per compartment: scalar, (d, d) tensor, or (m, d, d) per-cell tensors
        (m^2/(Pa s)).
    beta : (3, 3) array
        Symmetric exchange coefficients (1/(Pa s)), zero diagonal.
    gamma : float
        Bed-sink coefficient (1/(Pa s)).
    a1, a2 : float
        Bed-pressure law ``p_bed = a1 p_LV + a2`` (a2 in Pa).
    """

    K: tuple
    beta: np.ndarray
    gamma: float
    a1: float = 0.4
    a2: float = 1500.0

    def __post_init__(self):
        if len(self.K) != N_COMP:
            raise ValueError("need one permeability per compartment")
        b = np.asarray(self.beta, float)
        if b.shape != (N_COMP, N_COMP):
            raise ValueError("beta must be 3x3")
        if np.any(np.diag(b) != 0.0):
            raise ValueError("beta must have a zero diagonal")
        if not np.array_equal(b, b.T):
            raise ValueError("beta must be symmetric")
        if np.any(b < 0) or self.gamma < 0:
            raise ValueError("exchange and sink coefficients must be non-negative")
        b.flags.writeable = False
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "K", tuple(self.K))

    @classmethod
    def chain(cls, K1, K2, K3, beta12, beta23, gamma, beta13=0.0, a1=0.4, a2=1500.0):
        beta = np.array([[0.0, beta12, beta13], [beta12, 0.0, beta23], [beta13, beta23, 0.0]])
        return cls((K1, K2, K3), beta, gamma, a1, a2)

    def tensors(self, mesh: Mesh):
        return [check_spd(k, mesh.dimension, mesh.n_cells) for k in self.K]

    def groups(self):
        """Connected groups of compartments under exchange."""
        seen, out = set(), []
        for i in range(N_COMP):
            if i in seen:
                continue
            stack, grp = [i], []
            while stack:
                k = stack.pop()
                if k in seen:
                    continue
                seen.add(k)
                grp.append(k)
                stack.extend(j for j in range(N_COMP) if self.beta[k, j] > 0 and j not in seen)
            out.append(sorted(grp))
        return out

    def singular_groups(self):
        """Groups without a path to the bed sink (pure Neumann, singular)."""
        return [g for g in self.groups() if not (self.gamma > 0 and 2 in g)]


@dataclass(frozen=True, eq=False)
class SourceData:
    """Sources: cellwise ``g1`` (1/s) and bed pressure (Pa).

    ``body`` optionally adds a per-compartment volumetric source: a sequence of
    three entries, each ``None`` or a callable ``f(x)`` (Pa/s scaled like the
    equations' right-hand side).
    """

    g1: np.ndarray
    p_bed: float
    body: tuple | None = None

    @classmethod
    def uniform(cls, mesh: Mesh, g1=0.0, p_bed=0.0, body=None):
        return cls(np.full(mesh.n_cells, float(g1)), float(p_bed), body)


@dataclass(frozen=True, eq=False)
class DarcyState:
    p1: Field
    p2: Field
    p3: Field
    t: float = 0.0

    @property
    def pressures(self):
        return (self.p1, self.p2, self.p3)

    @property
    def mesh(self) -> Mesh:
        return self.p1.space.mesh

    @classmethod
    def uniform(cls, mesh: Mesh, value, t=0.0):
        s = FeSpace(mesh)
        f = Field(s, np.full(mesh.n_vertices, float(value)), "Pa")
        return cls(f, f, f, t)


def _operator(mesh: Mesh, params: CompartmentParams):
    space = FeSpace(mesh)
    M = assemble_operator(space, "mass")
    blocks = [[None] * N_COMP for _ in range(N_COMP)]
    for i, Ki in enumerate(params.tensors(mesh)):
        diag = assemble_operator(space, "stiffness", K=Ki)
        diag = diag + params.beta[i].sum() * M
        if i == 2:
            diag = diag + params.gamma * M
        blocks[i][i] = diag
        for k in range(N_COMP):
            if k != i:
                blocks[i][k] = -params.beta[i, k] * M
    return sp.bmat(blocks, format="csr"), M


def _rhs(mesh: Mesh, params: CompartmentParams, sources: SourceData, M):
    n = mesh.n_vertices
    g1 = np.asarray(sources.g1, float).reshape(-1)
    if g1.shape != (mesh.n_cells,):
        raise ValueError(f"g1 must be cellwise with {mesh.n_cells} values")
    b = np.zeros(N_COMP * n)
    b[:n] = load_vector(FeSpace(mesh), cellwise=g1)
    b[2 * n :] = params.gamma * sources.p_bed * np.asarray(M.sum(axis=1)).ravel()
    if sources.body is not None:
        for i, f in enumerate(sources.body):
            if f is not None:
                b[i * n : (i + 1) * n] += load_vector(FeSpace(mesh), func=f, degree=4)
    return b


def assemble_darcy_system(mesh: Mesh, params: CompartmentParams, sources: SourceData) -> SparseSystem:
    """Block system for the three pressures (compartment-major DOFs)."""
    A, M = _operator(mesh, params)
    return SparseSystem(A, _rhs(mesh, params, sources, M))


class DarcySolver:
    """Factorize the (time-independent) Darcy operator once, solve many times.

    Parameters
    ----------
    regularize : bool
        Allow singular groups of compartments (no path to the bed sink):
        each is solved with zero mean, provided its source integral
        vanishes. Without it such problems raise :class:`DarcyError`.
    tol : float
        Relative residual checked after every solve.
    """

    def __init__(self, mesh: Mesh, params: CompartmentParams, regularize=False, tol=1e-10):
        self.mesh = mesh
        self.params = params
        self.regularize = regularize
        self.tol = tol
        self.space = FeSpace(mesh)
        self.A, self.M = _operator(mesh, params)
        n = mesh.n_vertices
        self.singular = params.singular_groups()
        if self.singular and not regularize:
            names = ", ".join("{" + ",".join(str(i + 1) for i in g) + "}" for g in self.singular)
            raise DarcyError(f"compartment group(s) {names} have no sink: pure-Neumann problem is singular")
        A = self.A.tolil() if self.singular else self.A
        self._pins = []
        if self.singular:
            for g in self.singular:
                dof = g[0] * n
                A[dof, :] = 0.0
                A[:, dof] = 0.0
                A[dof, dof] = 1.0
                self._pins.append(dof)
            A = A.tocsc()
        self._lu = spla.splu(sp.csc_matrix(A), permc_spec="COLAMD")
        self._row_mass = np.asarray(self.M.sum(axis=1)).ravel()

    def rhs(self, sources: SourceData) -> np.ndarray:
        return _rhs(self.mesh, self.params, sources, self.M)

    def solve(self, sources: SourceData, t=0.0) -> DarcyState:
        n = self.mesh.n_vertices
        b = self.rhs(sources)
        bb = b.copy()
        for g, dof in zip(self.singular, self._pins):
            total = sum(b[i * n : (i + 1) * n].sum() for i in g)
            scale = max(sum(np.abs(b[i * n : (i + 1) * n]).sum() for i in g), 1e-300)
            if abs(total) > 1e-10 * scale:
                raise DarcyError(f"incompatible sources for compartment group {[i + 1 for i in g]}: integral {total:.3e}")
            bb[dof] = 0.0
        x = self._lu.solve(bb)
        for g in self.singular:
            vol = self._row_mass.sum()
            for i in g:
                blk = slice(i * n, (i + 1) * n)
                x[blk] -= np.dot(self._row_mass, x[blk]) / vol
        nb = np.linalg.norm(b)
        res = np.linalg.norm(self.A @ x - b)
        if nb > 0 and res > self.tol * nb:
            x = x + self._lu.solve(self._project(b - self.A @ x))
            res = np.linalg.norm(self.A @ x - b)
            if res > self.tol * nb:
                raise SolverError("Darcy solve did not reach tolerance", res / nb, 1)
        return self.state(x, t)

    def _project(self, r):
        r = r.copy()
        for dof in self._pins:
            r[dof] = 0.0
        return r

    def state(self, x, t=0.0) -> DarcyState:
        return _state_from_vector(self.space, x, t)


def _state_from_vector(space: FeSpace, x, t=0.0) -> DarcyState:
    n = space.mesh.n_vertices
    f = [Field(space, x[i * n : (i + 1) * n], "Pa") for i in range(N_COMP)]
    return DarcyState(f[0], f[1], f[2], t)


def solve_darcy(mesh: Mesh, params: CompartmentParams, sources: SourceData, regularize=False, tol=1e-10) -> DarcyState:
    """Solve the Darcy system (conjugate gradients unless singular groups need pinning)."""
    if params.singular_groups():
        return DarcySolver(mesh, params, regularize=regularize, tol=tol).solve(sources)
    system = assemble_darcy_system(mesh, params, sources)
    x = solve_sparse(system, tol=tol)
    return _state_from_vector(FeSpace(mesh), x)


def darcy_velocity(p: Field, K) -> np.ndarray:
    """Cellwise Darcy velocity ``-K grad p`` (m/s), shape (m, d)."""
    mesh = p.space.mesh
    Kc = check_spd(K, mesh.dimension, mesh.n_cells)
    grad = np.einsum("mad,ma->md", mesh.cell_gradients, p.values[mesh.cells])
    return -np.einsum("mde,me->md", Kc, grad)


def compute_mbf(p2: Field, p3: Field, beta23) -> Field:
    """Myocardial blood flow ``beta23 (p2 - p3) * 6000`` in ml/min/100 ml."""
    if p2.space.mesh is not p3.space.mesh:
        raise ValueError("p2 and p3 live on different meshes")
    vals = np.asarray(beta23, float) * (p2.values - p3.values) * MBF_SCALE
    return Field(p2.space, np.broadcast_to(vals, p2.values.shape), "ml/min/100ml")


def mean_mbf(mbf: Field) -> float:
    """Volume average of an MBF field."""
    mesh = mbf.space.mesh
    return integrate(mesh, mbf.values) / mesh.volume


def mass_balance(mesh: Mesh, params: CompartmentParams, sources: SourceData, state: DarcyState):
    """``(inflow, outflow)``: ``int g1`` and ``gamma int (p3 - p_bed)``."""
    inflow = float(np.dot(sources.g1, mesh.cell_volumes))
    outflow = params.gamma * (integrate(mesh, state.p3.values) - sources.p_bed * mesh.volume)
    return inflow, outflow


__all__ = [
    "CompartmentParams",
    "DarcyError",
    "DarcySolver",
    "DarcyState",
    "SourceData",
    "assemble_darcy_system",
    "bed_pressure",
    "compute_mbf",
    "darcy_velocity",
    "mass_balance",
    "mean_mbf",
    "solve_darcy",
]
