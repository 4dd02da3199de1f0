"""Fluid-domain motion: harmonic lifting of wall displacements.

The interior displacement solves a componentwise Laplace problem on the
reference mesh with the wall displacement prescribed on the wall vertices and
zero on every other boundary vertex (coronary walls and inlet/outlet
sections). The stiffness matrix never changes, so one factorization serves
the whole run.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import FeSpace, Field, assemble_operator
from .mesh import Mesh


class HarmonicLifter:
    """Reusable harmonic extension of boundary displacements.

    Parameters
    ----------
    mesh : Mesh
        Reference fluid mesh.
    wall_tags : iterable of int, optional
        Patches whose vertices receive the prescribed displacement. Default:
        all patches. Every other boundary vertex is held at zero.
    zero_tags : iterable of int, optional
        Patches forced to zero even where they touch a wall patch.
    """

    def __init__(self, mesh: Mesh, wall_tags=None, zero_tags=()):
        self.mesh = mesh
        wall_tags = mesh.tags if wall_tags is None else tuple(wall_tags)
        bnd = mesh.boundary_vertices
        wall = np.setdiff1d(mesh.vertices_of(wall_tags), mesh.vertices_of(zero_tags) if zero_tags else [])
        self.wall_vertices = wall
        self.fixed = bnd
        self.free = np.setdiff1d(np.arange(mesh.n_vertices), bnd)
        A = assemble_operator(FeSpace(mesh), "stiffness").tocsr()
        self._A_fb = A[self.free][:, bnd]
        self._lu = spla.splu(sp.csc_matrix(A[self.free][:, self.free])) if self.free.size else None

    def lift(self, wall_values, check=True) -> np.ndarray:
        """Interior extension of wall values, shape (n_vertices, d).

        ``wall_values`` is (n_vertices, d) nodal data (only wall vertices are
        read) or (len(wall_vertices), d).
        """
        mesh = self.mesh
        d = mesh.dimension
        w = np.asarray(wall_values, float)
        out = np.zeros((mesh.n_vertices, d))
        if w.shape[0] == mesh.n_vertices:
            out[self.wall_vertices] = w.reshape(-1, d)[self.wall_vertices]
        else:
            out[self.wall_vertices] = w.reshape(len(self.wall_vertices), d)
        if self._lu is not None:
            rhs = -(self._A_fb @ out[self.fixed])
            out[self.free] = self._lu.solve(np.ascontiguousarray(rhs))
        if check:
            mesh.displaced(out)  # raises MeshInversionError
        return out


def lift_displacement(mesh: Mesh, wall_data, wall_tags=None, zero_tags=()) -> Field:
    """Discrete-harmonic extension of wall displacements.

    Parameters
    ----------
    mesh : Mesh
    wall_data : (n_vertices, d) array
        Displacement; only values on ``wall_tags`` vertices are used.
    wall_tags, zero_tags
        See :class:`HarmonicLifter`.

    Raises
    ------
    MeshInversionError
        If the displaced mesh has a non-positive cell volume.
    """
    d = HarmonicLifter(mesh, wall_tags, zero_tags).lift(wall_data)
    return Field(FeSpace(mesh, mesh.dimension), d.reshape(-1), "m")


def ale_velocity(d_now: Field, d_prev: Field, dt: float, d_prev2: Field | None = None) -> Field:
    """Domain velocity by backward differences (BDF1, or BDF2 with ``d_prev2``)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    fields = [d_now, d_prev] + ([d_prev2] if d_prev2 is not None else [])
    sp0 = d_now.space
    if any(f.space.mesh is not sp0.mesh or f.space.multiplicity != sp0.multiplicity for f in fields):
        raise ValueError("displacements live on different spaces")
    if d_prev2 is None:
        v = (d_now.values - d_prev.values) / dt
    else:
        v = (3.0 * d_now.values - 4.0 * d_prev.values + d_prev2.values) / (2.0 * dt)
    return Field(d_now.space, v, "m/s")
