"""Immersed surfaces and signed distances.

Two kinds of surface are supported: analytic level sets (planes, spheres)
and triangulated surfaces. For triangulated surfaces the distance is the
exact point-triangle distance and the sign comes from the angle-weighted
pseudo-normal of the closest feature (face, edge or vertex), which works for
open surfaces such as valve leaflets as well as closed ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class ImmersedSurface:
    """Base class: subclasses implement ``signed_distance(points)``."""

    def signed_distance(self, points) -> np.ndarray:
        raise NotImplementedError

    @property
    def bounding_box(self):
        """``(lower, upper)``; infinite for unbounded surfaces."""
        return np.full(3, -np.inf), np.full(3, np.inf)

    def near(self, points, margin) -> np.ndarray:
        """Mask of points within ``margin`` of the bounding box."""
        lo, hi = self.bounding_box
        p = np.asarray(points, float)
        d = p.shape[1]
        return np.all((p >= lo[:d] - margin) & (p <= hi[:d] + margin), axis=1)


@dataclass(frozen=True)
class PlaneSurface(ImmersedSurface):
    point: tuple
    normal: tuple

    def signed_distance(self, points):
        p = np.atleast_2d(np.asarray(points, float))
        d = p.shape[1]
        n = np.asarray(self.normal, float)[:d]
        n = n / np.linalg.norm(n)
        return (p - np.asarray(self.point, float)[:d]) @ n


@dataclass(frozen=True)
class SphereSurface(ImmersedSurface):
    """Sphere (circle in 2D); negative inside."""

    center: tuple
    radius: float

    def signed_distance(self, points):
        p = np.atleast_2d(np.asarray(points, float))
        c = np.asarray(self.center, float)[: p.shape[1]]
        return np.linalg.norm(p - c, axis=1) - self.radius

    @property
    def bounding_box(self):
        c = np.zeros(3)
        c[: len(self.center)] = self.center
        return c - self.radius, c + self.radius


@dataclass(frozen=True, eq=False)
class TriangulatedSurface(ImmersedSurface):
    """Triangle surface in 3D; orientation of triangles defines the sign."""

    vertices: np.ndarray
    triangles: np.ndarray
    chunk: int = field(default=2048, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, float).reshape(-1, 3)
        t = np.asarray(self.triangles, np.int64).reshape(-1, 3)
        if t.size == 0:
            raise ValueError("surface has no triangles")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @cached_property
    def areas(self) -> np.ndarray:
        x = self.vertices[self.triangles]
        return np.linalg.norm(np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1) / 2

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def _pseudo_normals(self):
        v, t = self.vertices, self.triangles
        x = v[t]
        fn = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
        fn /= np.linalg.norm(fn, axis=1)[:, None]
        # angle-weighted vertex normals
        vn = np.zeros_like(v)
        for k in range(3):
            e1 = x[:, (k + 1) % 3] - x[:, k]
            e2 = x[:, (k + 2) % 3] - x[:, k]
            cos = np.einsum("ij,ij->i", e1, e2) / (np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
            ang = np.arccos(np.clip(cos, -1.0, 1.0))
            np.add.at(vn, t[:, k], ang[:, None] * fn)
        vn /= np.maximum(np.linalg.norm(vn, axis=1), 1e-300)[:, None]
        # edge normals: sum of the adjacent face normals
        edges = np.sort(np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2), axis=1)
        keys = edges[:, 0] * len(v) + edges[:, 1]
        uniq, inv = np.unique(keys, return_inverse=True)
        en = np.zeros((len(uniq), 3))
        np.add.at(en, inv, np.repeat(fn, 3, axis=0))
        en /= np.maximum(np.linalg.norm(en, axis=1), 1e-300)[:, None]
        edge_normal = en[inv].reshape(-1, 3, 3)  # per triangle: ab, bc, ca
        return fn, vn, edge_normal

    def closest(self, points):
        """Closest points, distances and pseudo-normals for each query point."""
        p = np.atleast_2d(np.asarray(points, float))
        out_c = np.empty_like(p)
        out_d = np.empty(len(p))
        out_n = np.empty_like(p)
        for s in range(0, len(p), self.chunk):
            c, d, n = self._closest_chunk(p[s : s + self.chunk])
            out_c[s : s + self.chunk] = c
            out_d[s : s + self.chunk] = d
            out_n[s : s + self.chunk] = n
        return out_c, out_d, out_n

    def _closest_chunk(self, p):
        x = self.vertices[self.triangles]
        a, b, c = x[None, :, 0], x[None, :, 1], x[None, :, 2]
        P = p[:, None, :]
        ab, ac = b - a, c - a
        ap, bp, cp = P - a, P - b, P - c
        dot = lambda u, v: np.einsum("ptk,ptk->pt", *np.broadcast_arrays(u, v))  # noqa: E731
        d1, d2 = dot(ab, ap), dot(ac, ap)
        d3, d4 = dot(ab, bp), dot(ac, bp)
        d5, d6 = dot(ab, cp), dot(ac, cp)
        va = d3 * d6 - d5 * d4
        vb = d5 * d2 - d1 * d6
        vc = d1 * d4 - d3 * d2
        with np.errstate(divide="ignore", invalid="ignore"):
            denom = va + vb + vc
            v = np.where(denom != 0, vb / denom, 0.0)
            w = np.where(denom != 0, vc / denom, 0.0)
            # feature codes: 0 face, 1 ab, 2 bc, 3 ca, 4 a, 5 b, 6 c
            feat = np.zeros(d1.shape, np.int64)
            m_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
            t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            m_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
            t_ac = d2 / (d2 - d6)
            m_c = (d6 >= 0) & (d5 <= d6)
            m_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
            t_ab = d1 / (d1 - d3)
            m_b = (d3 >= 0) & (d4 <= d3)
            m_a = (d1 <= 0) & (d2 <= 0)
        # earlier tests in the classic sequence take precedence: apply in reverse
        for mask, code, vv, ww in (
            (m_bc, 2, 1.0 - np.nan_to_num(t_bc), np.nan_to_num(t_bc)),
            (m_ac, 3, 0.0, np.nan_to_num(t_ac)),
            (m_c, 6, 0.0, 1.0),
            (m_ab, 1, np.nan_to_num(t_ab), 0.0),
            (m_b, 5, 1.0, 0.0),
            (m_a, 4, 0.0, 0.0),
        ):
            feat = np.where(mask, code, feat)
            v = np.where(mask, vv, v)
            w = np.where(mask, ww, w)
        q = a + v[..., None] * ab + w[..., None] * ac
        dist2 = ((P - q) ** 2).sum(axis=2)
        k = np.argmin(dist2, axis=1)
        rows = np.arange(len(p))
        closest = q[rows, k]
        dist = np.sqrt(dist2[rows, k])
        f = feat[rows, k]
        fn, vn, en = self._pseudo_normals
        tri = self.triangles[k]
        normal = fn[k].copy()
        for code, e in ((1, 0), (2, 1), (3, 2)):
            sel = f == code
            normal[sel] = en[k[sel], e]
        for code, corner in ((4, 0), (5, 1), (6, 2)):
            sel = f == code
            normal[sel] = vn[tri[sel, corner]]
        return closest, dist, normal

    def signed_distance(self, points):
        p = np.atleast_2d(np.asarray(points, float))
        if p.shape[1] != 3:
            raise ValueError("triangulated surfaces live in 3D")
        closest, dist, normal = self.closest(p)
        side = np.einsum("ij,ij->i", p - closest, normal)
        return np.where(side < 0, -dist, dist)


def signed_distance(surface: ImmersedSurface, point):
    """Signed distance of one point (scalar) or many points (array)."""
    p = np.asarray(point, float)
    d = surface.signed_distance(np.atleast_2d(p))
    return float(d[0]) if p.ndim == 1 else d


# -- builders ----------------------------------------------------------------


def _frame(normal):
    n = np.asarray(normal, float)
    n = n / np.linalg.norm(n)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(n, e1), n


def disk_surface(center, normal, radius, n_sectors=32, n_rings=4, orifice_fraction=0.0) -> TriangulatedSurface:
    """Flat disk, optionally with a central orifice of the given area fraction.

    The orifice is a regular polygon with the same sector count as the rim,
    so its area is exactly ``orifice_fraction`` times the tessellated disk.
    Triangles are oriented along ``normal``.
    """
    if not 0.0 <= orifice_fraction < 1.0:
        raise ValueError("orifice fraction must lie in [0, 1)")
    e1, e2, n = _frame(normal)
    c = np.asarray(center, float)
    theta = 2 * np.pi * np.arange(n_sectors) / n_sectors
    ring = np.column_stack([np.cos(theta), np.sin(theta)])
    r_in = radius * np.sqrt(orifice_fraction)
    verts, tris = [], []
    if orifice_fraction == 0.0:
        radii = radius * np.arange(1, n_rings + 1) / n_rings
        verts.append(np.zeros(2))
        for k in range(n_sectors):
            tris.append([0, 1 + k, 1 + (k + 1) % n_sectors])
        offset = 1
    else:
        radii = r_in + (radius - r_in) * np.arange(0, n_rings + 1) / n_rings
        offset = 0
    for r in radii:
        verts.extend(r * ring)
    for layer in range(len(radii) - 1):
        base0 = offset + layer * n_sectors
        base1 = base0 + n_sectors
        for k in range(n_sectors):
            k1 = (k + 1) % n_sectors
            tris.append([base0 + k, base1 + k, base1 + k1])
            tris.append([base0 + k, base1 + k1, base0 + k1])
    uv = np.array(verts)
    xyz = c + uv[:, :1] * e1 + uv[:, 1:2] * e2
    return TriangulatedSurface(xyz, np.array(tris))


def cylinder_shell(base_center, axis, radius, height, n_sectors=32, n_layers=4) -> TriangulatedSurface:
    """Open cylindrical shell from ``base_center`` along ``axis`` (outward normals)."""
    e1, e2, n = _frame(axis)
    c = np.asarray(base_center, float)
    theta = 2 * np.pi * np.arange(n_sectors) / n_sectors
    verts = []
    for z in np.linspace(0.0, height, n_layers + 1):
        for t in theta:
            verts.append(c + radius * (np.cos(t) * e1 + np.sin(t) * e2) + z * n)
    tris = []
    for layer in range(n_layers):
        b0, b1 = layer * n_sectors, (layer + 1) * n_sectors
        for k in range(n_sectors):
            k1 = (k + 1) % n_sectors
            tris.append([b0 + k, b0 + k1, b1 + k1])
            tris.append([b0 + k, b1 + k1, b1 + k])
    return TriangulatedSurface(np.array(verts), np.array(tris))


# -- file formats ---------------------------------------------------------------


def read_off(path) -> TriangulatedSurface:
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise ValueError(f"{path} is not an OFF file")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    v = np.array(tokens[pos : pos + 3 * nv], float).reshape(nv, 3)
    pos += 3 * nv
    tris = []
    for _ in range(nf):
        k = int(tokens[pos])
        idx = [int(t) for t in tokens[pos + 1 : pos + 1 + k]]
        pos += 1 + k
        for j in range(1, k - 1):  # fan-triangulate polygons
            tris.append([idx[0], idx[j], idx[j + 1]])
    return TriangulatedSurface(v, np.array(tris))


def write_off(surface: TriangulatedSurface, path) -> None:
    lines = ["OFF", f"{len(surface.vertices)} {len(surface.triangles)} 0"]
    lines += [" ".join(repr(float(c)) for c in v) for v in surface.vertices]
    lines += ["3 " + " ".join(str(int(i)) for i in t) for t in surface.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_stl(path) -> TriangulatedSurface:
    """ASCII STL; duplicate vertices are merged."""
    pts = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if parts and parts[0] == "vertex":
            pts.append([float(x) for x in parts[1:4]])
    if not pts or len(pts) % 3:
        raise ValueError(f"{path} is not an ASCII STL triangle file")
    pts = np.array(pts)
    uniq, inv = np.unique(pts, axis=0, return_inverse=True)
    return TriangulatedSurface(uniq, inv.reshape(-1, 3))


def load_surface(path) -> TriangulatedSurface:
    path = Path(path)
    if path.suffix.lower() == ".off":
        return read_off(path)
    if path.suffix.lower() == ".stl":
        return read_stl(path)
    raise ValueError(f"unsupported surface file {path}")
