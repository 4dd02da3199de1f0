"""Builders for the small meshes used in tests, demos and the desk scenario.

Everything here produces conforming simplicial meshes from tensor-product
grids: boxes and rectangles split into simplices along a common diagonal,
voxelized unions of simple shapes, and a mapped cylinder.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .mesh import _FACETS, Mesh, _face_keys, signed_volumes

# Kuhn decomposition of the unit cube: one tet per axis permutation
_PERMS = list(itertools.permutations(range(3)))


def _kuhn_local():
    corner = lambda c: c[0] + 2 * c[1] + 4 * c[2]  # noqa: E731
    tets = []
    for perm in _PERMS:
        c = [0, 0, 0]
        verts = [corner(c)]
        for ax in perm:
            c[ax] += 1
            verts.append(corner(c))
        tets.append(verts)
    tets = np.array(tets)
    cube = np.array([[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)], float)
    vol = signed_volumes(cube, tets)
    tets[vol < 0] = tets[vol < 0][:, [0, 2, 1, 3]]
    return tets


_KUHN = _kuhn_local()
_TRI_LOCAL = np.array([[0, 1, 3], [0, 3, 2]])  # square corners: 0=(0,0) 1=(1,0) 2=(0,1) 3=(1,1)


def exterior_facets(cells, n_vertices):
    """Outward-oriented facets that belong to exactly one cell."""
    d = cells.shape[1] - 1
    local = _FACETS[d]
    faces = cells[:, local].reshape(-1, d)
    keys = _face_keys(faces, n_vertices)
    _, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    return faces[counts[inverse] == 1]


def _grid_cells(active, shape):
    """Simplices for the active voxels of a rectilinear grid.

    ``shape`` is the number of grid points per axis.
    """
    dim = len(shape)
    idx = np.arange(np.prod(shape)).reshape(shape)
    act = np.argwhere(active)
    if dim == 3:
        corners = np.stack(
            [idx[act[:, 0] + (k & 1), act[:, 1] + ((k >> 1) & 1), act[:, 2] + ((k >> 2) & 1)] for k in range(8)],
            axis=1,
        )
        return corners[:, _KUHN].reshape(-1, 4)
    corners = np.stack(
        [idx[act[:, 0] + (k & 1), act[:, 1] + ((k >> 1) & 1)] for k in range(4)],
        axis=1,
    )
    return corners[:, _TRI_LOCAL].reshape(-1, 3)


def grid_mesh(axes, active=None, tagger=None) -> Mesh:
    """Simplicial mesh of (a subset of) a rectilinear grid.

    Parameters
    ----------
    axes : sequence of 1D coordinate arrays (2 or 3 of them)
    active : bool array over voxels, default all
    tagger : callable(centroids, normals) -> int tags, default all 1
    """
    axes = [np.asarray(a, float) for a in axes]
    shape = tuple(len(a) for a in axes)
    if active is None:
        active = np.ones(tuple(s - 1 for s in shape), bool)
    cells = _grid_cells(active, shape)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    used, cells = np.unique(cells, return_inverse=True)
    cells = cells.reshape(-1, len(axes) + 1)
    pts = pts[used]
    facets = exterior_facets(cells, len(pts))
    x = pts[facets]
    centroids = x.mean(axis=1)
    if len(axes) == 2:
        t = x[:, 1] - x[:, 0]
        normals = np.stack([t[:, 1], -t[:, 0]], axis=1)
    else:
        normals = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    tags = np.ones(len(facets), np.int64) if tagger is None else np.asarray(tagger(centroids, normals), np.int64)
    return Mesh.from_arrays(pts, cells, facets, tags)


def side_tagger(lower, upper, tol=1e-12):
    """Tags 1..2d for the faces of an axis-aligned box (x-, x+, y-, y+, z-, z+)."""
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)

    def tag(centroids, normals):
        out = np.zeros(len(centroids), np.int64)
        for ax in range(len(lower)):
            out[np.abs(centroids[:, ax] - lower[ax]) < tol * max(1.0, abs(upper[ax] - lower[ax])) + 1e-14] = 2 * ax + 1
            out[np.abs(centroids[:, ax] - upper[ax]) < tol * max(1.0, abs(upper[ax] - lower[ax])) + 1e-14] = 2 * ax + 2
        if np.any(out == 0):
            raise ValueError("facet not on a box side")
        return out

    return tag


def box_mesh(n, lower=(0.0, 0.0, 0.0), upper=(1.0, 1.0, 1.0)) -> Mesh:
    """Tetrahedral box, ``n`` cubes per side (or a 3-tuple), 6 tets per cube.

    Sides are tagged 1..6 as x-, x+, y-, y+, z-, z+.
    """
    n = (n, n, n) if np.isscalar(n) else tuple(n)
    axes = [np.linspace(lo, hi, k + 1) for lo, hi, k in zip(lower, upper, n)]
    return grid_mesh(axes, tagger=side_tagger(lower, upper, tol=1e-9))


def rectangle_mesh(nx, ny, lower=(0.0, 0.0), upper=(1.0, 1.0)) -> Mesh:
    """Triangulated rectangle, sides tagged 1..4 as x-, x+, y-, y+."""
    axes = [np.linspace(lower[0], upper[0], nx + 1), np.linspace(lower[1], upper[1], ny + 1)]
    return grid_mesh(axes, tagger=side_tagger(lower, upper, tol=1e-9))


def retag(mesh: Mesh, rule) -> Mesh:
    """Copy of ``mesh`` with facet tags ``rule(centroids, normals, old_tags)``."""
    cent = mesh.vertices[mesh.facets].mean(axis=1)
    tags = np.asarray(rule(cent, mesh.facet_normals, mesh.facet_tags), np.int64)
    return Mesh.from_arrays(mesh.vertices, mesh.cells, mesh.facets, tags, mesh.cell_tags)


def cylinder_mesh(radius, length, n_radial=6, n_axial=8) -> Mesh:
    """Tetrahedral cylinder along z from 0 to ``length``.

    A square grid is mapped onto the disk (elliptical grid mapping) and
    extruded. Tags: 1 lateral wall, 2 bottom cap, 3 top cap.
    """
    base = box_mesh((2 * n_radial, 2 * n_radial, n_axial), (-1, -1, 0), (1, 1, length))
    u, v = base.vertices[:, 0], base.vertices[:, 1]
    x = radius * u * np.sqrt(1.0 - v**2 / 2.0)
    y = radius * v * np.sqrt(1.0 - u**2 / 2.0)
    pts = np.column_stack([x, y, base.vertices[:, 2]])
    cent = base.vertices[base.facets].mean(axis=1)
    tags = np.ones(len(base.facets), np.int64)
    tags[np.abs(cent[:, 2]) < 1e-12] = 2
    tags[np.abs(cent[:, 2] - length) < 1e-12 * max(1.0, length)] = 3
    return Mesh.from_arrays(pts, base.cells, base.facets, tags)


# -- desk geometry ---------------------------------------------------------


@dataclass(frozen=True)
class DeskGeometry:
    """Dimensions (metres) of the idealized left-heart assembly.

    The ventricle is a half-ellipsoid below z = 0 with its axis on z. The
    atrial inflow tube and the aorta rise from the base; two square
    coronary branches leave the aorta along +y and -y.
    """

    h: float = 4e-3
    lv_radius: float = 2.8e-2
    lv_length: float = 5.2e-2
    inflow_x: float = -1.4e-2
    inflow_radius: float = 1.2e-2
    inflow_length: float = 3.2e-2
    aorta_x: float = 1.4e-2
    aorta_radius: float = 1.2e-2
    aorta_length: float = 5.6e-2
    coronary_z: float = 3.0e-2
    coronary_width: float = 1.2e-2
    coronary_length: float = 2.4e-2
    mitral_z: float = 1.2e-2
    aortic_z: float = 1.2e-2
    leaflet_length: float = 1.2e-2
    # perfusion shell
    wall_thickness: float = 1.2e-2
    perfusion_h: float = 4e-3

    # patch tags
    WALL = 1
    PULMONARY_VEINS = 2
    AORTA = 3
    CORONARY_WALL = 4
    CORONARY_OUTLETS = (11, 12)

    def _axes(self, lo, hi, h):
        n = int(round((hi - lo) / h))
        return np.linspace(lo, lo + n * h, n + 1)

    def fluid_mesh(self) -> Mesh:
        h = self.h
        r_a, x_a = self.aorta_radius, self.aorta_x
        y_out = r_a + self.coronary_length
        half_w = self.coronary_width / 2
        xs = self._axes(-self.lv_radius - h, self.lv_radius + h, h)
        ys = self._axes(-(y_out // h + 1) * h, (y_out // h + 1) * h, h)
        zs = self._axes(-np.ceil(self.lv_length / h) * h, np.ceil(self.aorta_length / h) * h, h)
        # round outlet planes to grid lines
        y_out = np.round(y_out / h) * h
        cz = [(a[:-1] + a[1:]) / 2 for a in (xs, ys, zs)]
        X, Y, Z = np.meshgrid(*cz, indexing="ij")
        lv = (X**2 + Y**2) / self.lv_radius**2 + Z**2 / self.lv_length**2 <= 1.0
        lv &= Z < 0
        inflow = ((X - self.inflow_x) ** 2 + Y**2 <= self.inflow_radius**2) & (Z > 0) & (Z < self.inflow_length)
        aorta = ((X - x_a) ** 2 + Y**2 <= r_a**2) & (Z > 0) & (Z < self.aorta_length)
        coronary = (
            (np.abs(X - x_a) < half_w)
            & (np.abs(Z - self.coronary_z) < half_w)
            & (np.abs(Y) > r_a - 2 * h)
            & (np.abs(Y) < y_out)
        )
        active = lv | inflow | aorta | coronary
        z_top_in = zs[np.searchsorted(zs, self.inflow_length - 1e-12)]
        z_top_ao = zs[np.searchsorted(zs, self.aorta_length - 1e-12)]
        tol = 1e-3 * h

        def tag(c, n):
            out = np.full(len(c), self.WALL, np.int64)
            up = n[:, 2] > 0.5
            out[up & (np.abs(c[:, 2] - z_top_in) < tol) & (c[:, 0] < 0)] = self.PULMONARY_VEINS
            out[up & (np.abs(c[:, 2] - z_top_ao) < tol) & (c[:, 0] > 0)] = self.AORTA
            in_cor = (np.abs(c[:, 1]) > r_a + h / 2) & (np.abs(c[:, 2] - self.coronary_z) <= half_w + tol)
            out[in_cor] = self.CORONARY_WALL
            out[(n[:, 1] > 0.5) & (np.abs(c[:, 1] - y_out) < tol)] = self.CORONARY_OUTLETS[0]
            out[(n[:, 1] < -0.5) & (np.abs(c[:, 1] + y_out) < tol)] = self.CORONARY_OUTLETS[1]
            return out

        return grid_mesh([xs, ys, zs], active, tag)

    def perfusion_mesh(self) -> Mesh:
        """Thick half-ellipsoidal shell around the ventricle cavity.

        Tags: 1 epicardium, 2 endocardium, 3 base.
        """
        h = self.perfusion_h
        a_i, c_i = self.lv_radius, self.lv_length
        a_o, c_o = a_i + self.wall_thickness, c_i + self.wall_thickness
        xs = self._axes(-np.ceil(a_o / h) * h, np.ceil(a_o / h) * h, h)
        zs = self._axes(-np.ceil(c_o / h) * h, 0.0, h)
        cz = [(a[:-1] + a[1:]) / 2 for a in (xs, xs, zs)]
        X, Y, Z = np.meshgrid(*cz, indexing="ij")
        outer = (X**2 + Y**2) / a_o**2 + Z**2 / c_o**2 <= 1.0
        inner = (X**2 + Y**2) / a_i**2 + Z**2 / c_i**2 <= 1.0
        active = outer & ~inner

        def tag(c, n):
            out = np.full(len(c), 1, np.int64)
            level = (c[:, 0] ** 2 + c[:, 1] ** 2) / ((a_i + a_o) / 2) ** 2 + c[:, 2] ** 2 / ((c_i + c_o) / 2) ** 2
            out[level < 1.0] = 2
            out[(np.abs(c[:, 2]) < 1e-3 * h) & (n[:, 2] > 0.5)] = 3
            return out

        return grid_mesh([xs, xs, zs], active, tag)

    def region_seeds(self):
        """One seed per coronary outlet: +y (outlet 11) and -y (outlet 12)."""
        r = self.lv_radius + self.wall_thickness / 2
        z = -self.lv_length / 3
        return np.array([[0.0, r, z], [0.0, -r, z]])
