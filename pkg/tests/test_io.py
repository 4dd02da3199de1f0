import numpy as np
import pytest

from perfusim.fem import FeSpace, Field
from perfusim.geometry import box_mesh, rectangle_mesh
from perfusim.io import SeriesWriter, export_snapshot, read_series, read_vtu, write_series, write_vtu


def test_vtu_round_trip_is_exact(tmp_path, rng):
    mesh = box_mesh(2)
    p = rng.normal(size=mesh.n_vertices)
    u = rng.normal(size=(mesh.n_vertices, 3))
    region = np.arange(mesh.n_cells) % 3
    path = write_vtu(tmp_path / "a.vtu", mesh.vertices, mesh.cells, {"p": p, "u": u}, {"region": region})
    back = read_vtu(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.cells, mesh.cells)
    assert np.array_equal(back.point_data["p"], p)
    assert np.array_equal(back.point_data["u"], u)
    assert np.array_equal(back.cell_data["region"], region)


def test_vtu_two_dimensional(tmp_path):
    mesh = rectangle_mesh(3, 2)
    back = read_vtu(write_vtu(tmp_path / "t.vtu", mesh.vertices, mesh.cells))
    assert back.vertices.shape == (mesh.n_vertices, 2)
    assert np.array_equal(back.cells, mesh.cells)


def test_vtu_rejects_mismatched_field(tmp_path):
    mesh = rectangle_mesh(2, 2)
    with pytest.raises(ValueError, match="point field"):
        write_vtu(tmp_path / "x.vtu", mesh.vertices, mesh.cells, {"p": np.zeros(3)})
    with pytest.raises(ValueError, match="cell field"):
        write_vtu(tmp_path / "x.vtu", mesh.vertices, mesh.cells, cell_data={"r": np.zeros(3)})


def test_vtu_is_readable_xml(tmp_path):
    import xml.etree.ElementTree as ET

    mesh = rectangle_mesh(1, 1)
    root = ET.parse(write_vtu(tmp_path / "x.vtu", mesh.vertices, mesh.cells)).getroot()
    assert root.get("type") == "UnstructuredGrid"
    piece = root.find("UnstructuredGrid/Piece")
    assert piece.get("NumberOfPoints") == "4" and piece.get("NumberOfCells") == "2"


def test_export_snapshot_shapes_vector_fields(tmp_path):
    mesh = box_mesh(1)
    u = Field(FeSpace(mesh, 3), np.arange(3.0 * mesh.n_vertices))
    p = Field(FeSpace(mesh), np.ones(mesh.n_vertices))
    back = read_vtu(export_snapshot({"u": u, "p": p}, mesh, tmp_path / "s.vtu", {"region": np.zeros(mesh.n_cells, int)}))
    assert back.point_data["u"].shape == (mesh.n_vertices, 3)
    assert np.array_equal(back.point_data["u"].reshape(-1), u.values)
    assert set(back.cell_data) == {"region"}
    with pytest.raises(ValueError):
        export_snapshot({"bad": np.zeros(5)}, mesh, tmp_path / "b.vtu")


def test_series_round_trip_bitwise(tmp_path, rng):
    cols = {"step": np.arange(5), "t": rng.random(5), "Q_0": rng.normal(size=5) * 1e-7}
    back = read_series(write_series(tmp_path / "s.csv", cols))
    assert list(back) == ["step", "t", "Q_0"]
    for k in cols:
        assert np.array_equal(back[k], cols[k])


def test_series_uses_crlf_and_header(tmp_path):
    path = write_series(tmp_path / "s.csv", {"a": [1], "b": [0.5]})
    assert path.read_bytes() == b"a,b\r\n1,0.5\r\n"


def test_series_rejects_ragged_columns(tmp_path):
    with pytest.raises(ValueError):
        write_series(tmp_path / "s.csv", {"a": [1, 2], "b": [1.0]})


def test_series_writer_matches_write_series(tmp_path):
    rows = [{"a": 1, "b": 0.1}, {"a": 2, "b": 1e-300}]
    with SeriesWriter(tmp_path / "w.csv", ["a", "b"]) as w:
        for r in rows:
            w.write(r)
    write_series(tmp_path / "s.csv", {"a": [1, 2], "b": [0.1, 1e-300]})
    assert (tmp_path / "w.csv").read_bytes() == (tmp_path / "s.csv").read_bytes()


def test_empty_series_file_rejected(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(ValueError):
        read_series(tmp_path / "e.csv")
