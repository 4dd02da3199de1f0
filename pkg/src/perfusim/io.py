"""Snapshot (VTU) and time-series (CSV) output.

VTU files are XML unstructured grids with base64-encoded little-endian
binary arrays, so values round-trip exactly. CSV files follow RFC 4180 with a
header row; floats are written with ``repr`` and read back bit-identically.
"""

from __future__ import annotations

import base64
import csv
import struct
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import Mesh

_VTK_CELL = {2: 5, 3: 10}  # triangle, tetrahedron
_CELL_DIM = {v: k for k, v in _VTK_CELL.items()}
_VTK_TYPES = {
    np.dtype("float64"): "Float64",
    np.dtype("float32"): "Float32",
    np.dtype("int64"): "Int64",
    np.dtype("int32"): "Int32",
    np.dtype("uint8"): "UInt8",
}
_NP_TYPES = {v: k for k, v in _VTK_TYPES.items()}


def _encode(a: np.ndarray) -> str:
    raw = np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
    return base64.b64encode(struct.pack("<I", len(raw)) + raw).decode("ascii")


def _decode(text: str, dtype) -> np.ndarray:
    blob = base64.b64decode(text.strip())
    (n,) = struct.unpack("<I", blob[:4])
    return np.frombuffer(blob[4 : 4 + n], dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)


def _data_array(parent, name, values):
    a = np.asarray(values)
    if a.dtype == np.bool_:
        a = a.astype(np.uint8)
    if a.dtype not in _VTK_TYPES:
        a = a.astype(np.float64 if a.dtype.kind == "f" else np.int64)
    ncomp = 1 if a.ndim == 1 else a.shape[1]
    el = ET.SubElement(
        parent, "DataArray", type=_VTK_TYPES[a.dtype], Name=name, NumberOfComponents=str(ncomp), format="binary"
    )
    el.text = _encode(a.reshape(-1))
    return el


def write_vtu(path, vertices, cells, point_data=None, cell_data=None) -> Path:
    """Write an unstructured grid of triangles or tetrahedra."""
    vertices = np.asarray(vertices, float)
    cells = np.asarray(cells, np.int64)
    dim = cells.shape[1] - 1
    if vertices.shape[1] == 2:
        vertices = np.column_stack([vertices, np.zeros(len(vertices))])
    root = ET.Element("VTKFile", type="UnstructuredGrid", version="1.0", byte_order="LittleEndian", header_type="UInt32")
    grid = ET.SubElement(root, "UnstructuredGrid")
    piece = ET.SubElement(grid, "Piece", NumberOfPoints=str(len(vertices)), NumberOfCells=str(len(cells)))
    pd = ET.SubElement(piece, "PointData")
    for name, values in (point_data or {}).items():
        values = np.asarray(values)
        if values.shape[0] != len(vertices):
            raise ValueError(f"point field {name!r} has {values.shape[0]} rows, mesh has {len(vertices)} vertices")
        _data_array(pd, name, values)
    cd = ET.SubElement(piece, "CellData")
    for name, values in (cell_data or {}).items():
        values = np.asarray(values)
        if values.shape[0] != len(cells):
            raise ValueError(f"cell field {name!r} has {values.shape[0]} rows, mesh has {len(cells)} cells")
        _data_array(cd, name, values)
    pts = ET.SubElement(piece, "Points")
    _data_array(pts, "Points", vertices)
    cl = ET.SubElement(piece, "Cells")
    _data_array(cl, "connectivity", cells.reshape(-1))
    _data_array(cl, "offsets", np.arange(1, len(cells) + 1, dtype=np.int64) * (dim + 1))
    _data_array(cl, "types", np.full(len(cells), _VTK_CELL[dim], np.uint8))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)
    return path


@dataclass
class VtuData:
    vertices: np.ndarray
    cells: np.ndarray
    point_data: dict = field(default_factory=dict)
    cell_data: dict = field(default_factory=dict)


def _read_array(el) -> np.ndarray:
    a = _decode(el.text or "", _NP_TYPES[el.get("type")])
    ncomp = int(el.get("NumberOfComponents", "1"))
    return a.reshape(-1, ncomp) if ncomp > 1 else a


def read_vtu(path) -> VtuData:
    """Read a file written by :func:`write_vtu`."""
    piece = ET.parse(path).getroot().find("UnstructuredGrid/Piece")
    if piece is None:
        raise ValueError(f"{path}: not an unstructured-grid file")
    vertices = _read_array(piece.find("Points/DataArray"))
    arrays = {el.get("Name"): _read_array(el) for el in piece.find("Cells")}
    types = np.unique(arrays["types"])
    if len(types) != 1 or int(types[0]) not in _CELL_DIM:
        raise ValueError(f"{path}: only single-type triangle or tetrahedron grids are supported")
    dim = _CELL_DIM[int(types[0])]
    cells = arrays["connectivity"].reshape(-1, dim + 1)
    if dim == 2 and np.all(vertices[:, 2] == 0.0):
        vertices = vertices[:, :2]
    pd = {el.get("Name"): _read_array(el) for el in piece.find("PointData")}
    cd = {el.get("Name"): _read_array(el) for el in piece.find("CellData")}
    return VtuData(vertices, cells, pd, cd)


def export_snapshot(fields, mesh: Mesh, path, cell_fields=None) -> Path:
    """Write vertex ``fields`` (name -> Field or array) and ``cell_fields`` on ``mesh``."""
    point_data = {}
    for name, f in fields.items():
        vals = np.asarray(getattr(f, "values", f))
        mult = vals.size // mesh.n_vertices
        if vals.size != mult * mesh.n_vertices:
            raise ValueError(f"field {name!r} does not match the mesh vertex count")
        point_data[name] = vals.reshape(mesh.n_vertices, mult) if mult > 1 else vals.reshape(-1)
    return write_vtu(path, mesh.vertices, mesh.cells, point_data, cell_fields)


# -- CSV ----------------------------------------------------------------------


def write_series(path, columns: dict) -> Path:
    """Write equal-length columns to an RFC-4180 CSV file with a header row."""
    names = list(columns)
    data = [np.asarray(columns[k]).reshape(-1) for k in names]
    lengths = {len(c) for c in data}
    if len(lengths) > 1:
        raise ValueError("series columns have different lengths")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(names)
        for row in zip(*data):
            w.writerow([_cell(v) for v in row])
    return path


def _cell(v):
    if isinstance(v, (np.integer, int, np.bool_, bool)):
        return str(int(v))
    return repr(float(v))


def read_series(path) -> dict:
    """Read a CSV written by :func:`write_series` into float arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty series file")
    header, body = rows[0], rows[1:]
    out = {}
    for k, name in enumerate(header):
        out[name] = np.array([float(r[k]) for r in body])
    return out


class SeriesWriter:
    """Append rows to a CSV series as a run progresses."""

    def __init__(self, path, names):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.names = list(names)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\r\n")
        self._w.writerow(self.names)

    def write(self, row: dict):
        self._w.writerow([_cell(row[k]) for k in self.names])

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
