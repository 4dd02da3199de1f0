"""Simplicial meshes with tagged boundary patches.

Meshes are triangles (2D) or tetrahedra (3D). Boundary facets carry an
integer patch tag; the tags must cover the boundary exactly once. Meshes are
read from and written to Gmsh ASCII v2.2 files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Invalid mesh data or file."""


class MeshInversionError(MeshError):
    """A displaced mesh contains a cell with non-positive volume."""

    def __init__(self, cell, volume):
        super().__init__(f"mesh inversion: cell {cell} has volume {volume:.3e}")
        self.cell = cell
        self.volume = volume


# local facets of a simplex, listed so that facet k is opposite vertex k
_FACETS = {
    2: np.array([[1, 2], [2, 0], [0, 1]]),
    3: np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]]),
}


def _readonly(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


def signed_volumes(vertices, cells):
    """Signed simplex volumes (areas in 2D)."""
    x = vertices[cells]
    edges = x[:, 1:, :] - x[:, :1, :]
    d = vertices.shape[1]
    return np.linalg.det(edges) / math.factorial(d)


def _face_keys(faces, n):
    s = np.sort(faces, axis=1).astype(np.int64)
    key = s[:, 0]
    for k in range(1, s.shape[1]):
        key = key * n + s[:, k]
    return key


@dataclass(frozen=True, eq=False)
class Mesh:
    """A validated simplicial mesh.

    Attributes
    ----------
    vertices : (n, d) float array, metres
    cells : (m, d+1) int array, positively oriented
    facets : (f, d) int array of boundary facets, oriented outward
    facet_tags : (f,) int array of patch tags
    facet_cells : (f,) int array, the cell owning each boundary facet
    cell_tags : (m,) int array (physical tags from the file, 0 if absent)
    """

    vertices: np.ndarray
    cells: np.ndarray
    facets: np.ndarray
    facet_tags: np.ndarray
    facet_cells: np.ndarray
    cell_tags: np.ndarray = field(repr=False)

    @classmethod
    def from_arrays(cls, vertices, cells, facets, facet_tags, cell_tags=None):
        """Build and validate a mesh.

        Raises
        ------
        MeshError
            On inconsistent connectivity, untagged or doubly tagged boundary
            facets, or non-positive cell volumes.
        """
        vertices = np.asarray(vertices, dtype=float)
        cells = np.asarray(cells, dtype=np.int64)
        facets = np.asarray(facets, dtype=np.int64).reshape(-1, vertices.shape[1])
        facet_tags = np.asarray(facet_tags, dtype=np.int64).reshape(-1)
        d = vertices.shape[1]
        if d not in (2, 3):
            raise MeshError(f"unsupported dimension {d}")
        if cells.ndim != 2 or cells.shape[1] != d + 1:
            raise MeshError(f"cells must have {d + 1} vertices in {d}D")
        n = len(vertices)
        if cells.size and (cells.min() < 0 or cells.max() >= n):
            raise MeshError("cell references a missing vertex")
        if len(facets) != len(facet_tags):
            raise MeshError("facet and tag counts differ")

        vol = signed_volumes(vertices, cells)
        bad = np.flatnonzero(vol <= 0.0)
        if bad.size:
            raise MeshError(
                f"negative/zero cell volume in cell {bad[0]} ({vol[bad[0]]:.3e})"
            )

        local = _FACETS[d]
        all_faces = cells[:, local].reshape(-1, d)
        keys = _face_keys(all_faces, n)
        uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("inconsistent connectivity: facet shared by more than two cells")
        exterior = counts == 1

        tag_keys = _face_keys(facets, n)
        pos = np.searchsorted(uniq, tag_keys)
        pos = np.minimum(pos, len(uniq) - 1)
        found = uniq[pos] == tag_keys
        if not np.all(found):
            raise MeshError("tagged facet is not a facet of any cell")
        if not np.all(exterior[pos]):
            raise MeshError("tagged facet is interior (shared by two cells)")
        if len(np.unique(pos)) != len(pos):
            raise MeshError("boundary facet tagged more than once")
        if exterior.sum() != len(pos):
            raise MeshError(
                f"{int(exterior.sum()) - len(pos)} boundary facets carry no patch tag"
            )

        # owner cell and outward orientation from the local facet numbering
        owner_of_face = np.empty(len(uniq), dtype=np.int64)
        owner_of_face[inverse] = np.arange(len(all_faces)) // (d + 1)
        local_of_face = np.empty(len(uniq), dtype=np.int64)
        local_of_face[inverse] = np.arange(len(all_faces)) % (d + 1)
        facet_cells = owner_of_face[pos]
        oriented = cells[facet_cells[:, None], local[local_of_face[pos]]]

        if cell_tags is None:
            cell_tags = np.zeros(len(cells), dtype=np.int64)
        return cls(
            _readonly(vertices, float),
            _readonly(cells, np.int64),
            _readonly(oriented, np.int64),
            _readonly(facet_tags, np.int64),
            _readonly(facet_cells, np.int64),
            _readonly(cell_tags, np.int64),
        )

    # -- basic properties -------------------------------------------------
    @property
    def dimension(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def boundary_facets(self):
        return self.facets, self.facet_tags

    @cached_property
    def tags(self) -> tuple[int, ...]:
        return tuple(int(t) for t in np.unique(self.facet_tags))

    @cached_property
    def cell_volumes(self) -> np.ndarray:
        return signed_volumes(self.vertices, self.cells)

    @property
    def volume(self) -> float:
        return float(self.cell_volumes.sum())

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    @cached_property
    def cell_gradients(self) -> np.ndarray:
        """Gradients of the barycentric basis functions, shape (m, d+1, d)."""
        x = self.vertices[self.cells]
        jac = (x[:, 1:, :] - x[:, :1, :]).transpose(0, 2, 1)  # (m, d, d)
        inv = np.linalg.inv(jac)  # rows: gradients of lambda_1..lambda_d
        grads = np.empty((len(self.cells), self.dimension + 1, self.dimension))
        grads[:, 1:, :] = inv
        grads[:, 0, :] = -inv.sum(axis=1)
        return grads

    @cached_property
    def cell_sizes(self) -> np.ndarray:
        """Diameter of the ball with the cell's volume."""
        v = self.cell_volumes
        if self.dimension == 2:
            return 2.0 * np.sqrt(v / np.pi)
        return 2.0 * np.cbrt(3.0 * v / (4.0 * np.pi))

    @cached_property
    def _facet_geometry(self):
        x = self.vertices[self.facets]
        if self.dimension == 2:
            t = x[:, 1] - x[:, 0]
            raw = np.stack([t[:, 1], -t[:, 0]], axis=1)
        else:
            raw = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]) / 2.0
        area = np.linalg.norm(raw, axis=1)
        return area, raw / area[:, None]

    @property
    def facet_areas(self) -> np.ndarray:
        return self._facet_geometry[0]

    @property
    def facet_normals(self) -> np.ndarray:
        """Outward unit normals of the boundary facets."""
        return self._facet_geometry[1]

    def facets_of(self, tag) -> np.ndarray:
        """Indices of boundary facets carrying ``tag`` (int or iterable)."""
        tags = np.atleast_1d(np.asarray(tag, dtype=np.int64))
        unknown = [int(t) for t in tags if t not in self.tags]
        if unknown:
            raise KeyError(f"unknown patch tag(s) {unknown}")
        return np.flatnonzero(np.isin(self.facet_tags, tags))

    def vertices_of(self, tag) -> np.ndarray:
        """Sorted vertex indices touching patches ``tag``."""
        return np.unique(self.facets[self.facets_of(tag)])

    def patch_area(self, tag) -> float:
        return float(self.facet_areas[self.facets_of(tag)].sum())

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.facets)

    def displaced(self, displacement) -> "Mesh":
        """Mesh with vertices moved by ``displacement`` (same topology).

        Raises
        ------
        MeshInversionError
            If a displaced cell has non-positive volume.
        """
        x = self.vertices + np.asarray(displacement, dtype=float).reshape(self.vertices.shape)
        vol = signed_volumes(x, self.cells)
        bad = np.flatnonzero(vol <= 0.0)
        if bad.size:
            raise MeshInversionError(int(bad[0]), float(vol[bad[0]]))
        return Mesh(
            _readonly(x, float),
            self.cells,
            self.facets,
            self.facet_tags,
            self.facet_cells,
            self.cell_tags,
        )


def boundary_flux(mesh: Mesh, velocity, patch) -> float:
    """Volumetric flow rate of a P1 velocity field through a boundary patch.

    Parameters
    ----------
    mesh : Mesh
    velocity : (n_vertices, d) array or Field with multiplicity d
    patch : int or iterable of int

    Returns
    -------
    float
        ``int_patch u . n`` with the outward normal, exact for P1 fields.
    """
    u = np.asarray(getattr(velocity, "values", velocity), dtype=float)
    u = u.reshape(mesh.n_vertices, mesh.dimension)
    idx = mesh.facets_of(patch)
    mean_u = u[mesh.facets[idx]].mean(axis=1)
    normal_flux = np.einsum("fi,fi->f", mean_u, mesh.facet_normals[idx])
    return float(np.dot(normal_flux, mesh.facet_areas[idx]))


def flux_functional(mesh: Mesh, patch) -> np.ndarray:
    """Vector ``b`` with ``b . u = boundary_flux(mesh, u, patch)``.

    ``b`` is laid out like a flattened (n_vertices, d) velocity array.
    """
    d = mesh.dimension
    idx = mesh.facets_of(patch)
    weights = mesh.facet_areas[idx][:, None] * mesh.facet_normals[idx] / d
    b = np.zeros((mesh.n_vertices, d))
    for k in range(d):
        np.add.at(b, mesh.facets[idx, k], weights)
    return b.reshape(-1)


# -- region partition -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegionPartition:
    """Non-overlapping perfusion regions, one per coronary outlet.

    Region indices are 0-based: region ``j`` is fed by outlet ``j``.
    """

    region_of_cell: np.ndarray
    region_volumes: np.ndarray
    mesh: Mesh = field(repr=False)

    @property
    def J(self) -> int:
        return len(self.region_volumes)

    def cells_of(self, j) -> np.ndarray:
        return np.flatnonzero(self.region_of_cell == j)


def build_region_partition(mesh: Mesh, seeds) -> RegionPartition:
    """Assign each cell to the nearest seed (barycentre distance).

    Ties go to the lower seed index.

    Raises
    ------
    MeshError
        If some seed captures no cell.
    """
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    if len(seeds) < 1:
        raise MeshError("at least one seed is required")
    if seeds.shape[1] != mesh.dimension:
        raise MeshError("seed dimension does not match the mesh")
    bary = mesh.barycenters
    dist = ((bary[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
    region = np.argmin(dist, axis=1)
    volumes = np.bincount(region, weights=mesh.cell_volumes, minlength=len(seeds))
    counts = np.bincount(region, minlength=len(seeds))
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        j = int(empty[0])
        raise MeshError(f"empty region {j + 1}: seed {seeds[j].tolist()} captures no cell")
    region = _readonly(region, np.int64)
    return RegionPartition(region, _readonly(volumes, float), mesh)


# -- Gmsh ASCII v2.2 ---------------------------------------------------------

_GMSH_NODES = {1: 2, 2: 3, 4: 4, 15: 1}


def load_mesh(path) -> Mesh:
    """Read a Gmsh ASCII v2.2 ``.msh`` file.

    Top-dimensional elements (tetrahedra, or triangles if there are none)
    become cells; elements one dimension lower become tagged boundary facets,
    with the first (physical) tag as patch tag. Points are ignored.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise MeshError(f"cannot read {path}: {exc}") from exc
    lines = iter(text.splitlines())
    nodes = None
    elements = []
    version_ok = False
    try:
        for line in lines:
            tag = line.strip()
            if tag == "$MeshFormat":
                version, filetype, _ = next(lines).split()
                if not version.startswith("2") or filetype != "0":
                    raise MeshError(f"unsupported Gmsh format {version} (type {filetype})")
                version_ok = True
            elif tag == "$Nodes":
                count = int(next(lines))
                ids = np.empty(count, dtype=np.int64)
                xyz = np.empty((count, 3))
                for k in range(count):
                    parts = next(lines).split()
                    ids[k] = int(parts[0])
                    xyz[k] = [float(v) for v in parts[1:4]]
                nodes = (ids, xyz)
            elif tag == "$Elements":
                count = int(next(lines))
                for _ in range(count):
                    parts = [int(v) for v in next(lines).split()]
                    etype, ntags = parts[1], parts[2]
                    if etype not in _GMSH_NODES:
                        raise MeshError(f"unsupported Gmsh element type {etype}")
                    physical = parts[3] if ntags > 0 else 0
                    conn = parts[3 + ntags:]
                    if len(conn) != _GMSH_NODES[etype]:
                        raise MeshError("element with wrong node count")
                    elements.append((etype, physical, conn))
    except (StopIteration, ValueError, IndexError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"parse failure in {path}: {exc}") from exc
    if not version_ok or nodes is None or not elements:
        raise MeshError(f"parse failure in {path}: missing sections")

    ids, xyz = nodes
    index = {int(i): k for k, i in enumerate(ids)}
    has_tets = any(e[0] == 4 for e in elements)
    dim = 3 if has_tets else 2
    cell_type, facet_type = (4, 2) if dim == 3 else (2, 1)
    try:
        cells = [[index[n] for n in c] for t, _, c in elements if t == cell_type]
        cell_tags = [p for t, p, _ in elements if t == cell_type]
        facets = [[index[n] for n in c] for t, _, c in elements if t == facet_type]
        facet_tags = [p for t, p, _ in elements if t == facet_type]
    except KeyError as exc:
        raise MeshError(f"element references unknown node {exc}") from exc
    if dim == 2:
        if np.any(np.abs(xyz[:, 2]) > 0.0):
            raise MeshError("2D mesh with non-zero z coordinates")
        xyz = xyz[:, :2]
    return Mesh.from_arrays(
        xyz,
        np.array(cells, dtype=np.int64).reshape(-1, dim + 1),
        np.array(facets, dtype=np.int64).reshape(-1, dim),
        np.array(facet_tags, dtype=np.int64),
        np.array(cell_tags, dtype=np.int64),
    )


def write_mesh(mesh: Mesh, path) -> None:
    """Write ``mesh`` as Gmsh ASCII v2.2 (facets first, then cells)."""
    d = mesh.dimension
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$Nodes", str(mesh.n_vertices)]
    for k, x in enumerate(mesh.vertices):
        xyz = [float(v) for v in x] + [0.0] * (3 - d)
        out.append(f"{k + 1} {xyz[0]!r} {xyz[1]!r} {xyz[2]!r}")
    out.append("$EndNodes")
    facet_type, cell_type = (2, 4) if d == 3 else (1, 2)
    out.append("$Elements")
    out.append(str(len(mesh.facets) + mesh.n_cells))
    k = 1
    for f, t in zip(mesh.facets, mesh.facet_tags):
        out.append(f"{k} {facet_type} 2 {t} {t} " + " ".join(str(v + 1) for v in f))
        k += 1
    for c, t in zip(mesh.cells, mesh.cell_tags):
        out.append(f"{k} {cell_type} 2 {t} {t} " + " ".join(str(v + 1) for v in c))
        k += 1
    out.append("$EndElements")
    Path(path).write_text("\n".join(out) + "\n")
