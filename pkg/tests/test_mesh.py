import numpy as np
import pytest

from oracles import cube_msh_text
from perfusim.fem import simplex_quadrature
from perfusim.geometry import box_mesh, rectangle_mesh
from perfusim.mesh import (
    Mesh,
    MeshError,
    MeshInversionError,
    boundary_flux,
    build_region_partition,
    flux_functional,
    load_mesh,
    write_mesh,
)
from perfusim.surfaces import PlaneSurface, SphereSurface, TriangulatedSurface, disk_surface, signed_distance


# -- load_mesh -----------------------------------------------------------------


def test_load_cube_of_six_tets(tmp_path):
    path = tmp_path / "cube.msh"
    path.write_text(cube_msh_text())
    mesh = load_mesh(path)
    assert mesh.n_vertices == 8
    assert mesh.n_cells == 6
    assert len(mesh.facets) == 12
    assert mesh.dimension == 3
    assert mesh.volume == pytest.approx(1.0, rel=1e-14)
    assert set(mesh.tags) == {1}


def test_load_degenerate_cell_rejected(tmp_path):
    text = """$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
3
1 0 0 0
2 1 0 0
3 2 0 0
$EndNodes
$Elements
4
1 1 2 1 1 1 2
2 1 2 1 1 2 3
3 1 2 1 1 3 1
4 2 2 5 5 1 2 3
$EndElements
"""
    path = tmp_path / "flat.msh"
    path.write_text(text)
    with pytest.raises(MeshError, match="negative/zero cell volume"):
        load_mesh(path)


def test_load_square_of_two_triangles(tmp_path):
    text = """$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
6
1 1 2 1 1 1 2
2 1 2 2 2 2 3
3 1 2 3 3 3 4
4 1 2 4 4 4 1
5 2 2 9 9 1 2 3
6 2 2 9 9 1 3 4
$EndElements
"""
    path = tmp_path / "square.msh"
    path.write_text(text)
    mesh = load_mesh(path)
    assert mesh.dimension == 2
    assert len(mesh.facets) == 4
    assert mesh.tags == (1, 2, 3, 4)


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.msh"
    path.write_text("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\nnot-a-number\n")
    with pytest.raises(MeshError, match="parse failure"):
        load_mesh(path)


def test_load_rejects_unknown_node(tmp_path):
    text = cube_msh_text().replace("4 2 100 100 1 2 4 8", "4 2 100 100 1 2 4 99")
    path = tmp_path / "bad.msh"
    path.write_text(text)
    with pytest.raises(MeshError):
        load_mesh(path)


def test_write_then_load_round_trip(tmp_path):
    mesh = box_mesh(2)
    write_mesh(mesh, tmp_path / "box.msh")
    back = load_mesh(tmp_path / "box.msh")
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.cells, mesh.cells)
    assert np.array_equal(np.sort(back.facet_tags), np.sort(mesh.facet_tags))


def test_untagged_boundary_rejected():
    v = [[0, 0], [1, 0], [0, 1]]
    with pytest.raises(MeshError, match="carry no patch tag"):
        Mesh.from_arrays(v, [[0, 1, 2]], [[0, 1], [1, 2]], [1, 1])


def test_boundary_facets_belong_to_one_cell_and_point_outward():
    mesh = box_mesh(3)
    owner_bary = mesh.barycenters[mesh.facet_cells]
    centroid = mesh.vertices[mesh.facets].mean(axis=1)
    assert np.all(np.einsum("fi,fi->f", centroid - owner_bary, mesh.facet_normals) > 0)


def test_displaced_raises_on_inversion():
    mesh = rectangle_mesh(2, 2)
    d = np.zeros_like(mesh.vertices)
    centre = np.argmin(np.linalg.norm(mesh.vertices - 0.5, axis=1))
    d[centre] = [2.0, 2.0]
    with pytest.raises(MeshInversionError, match="cell"):
        mesh.displaced(d)


# -- region partition ---------------------------------------------------------


def test_partition_two_seeds_split_cube():
    mesh = box_mesh(4)
    part = build_region_partition(mesh, [[0.25, 0.5, 0.5], [0.75, 0.5, 0.5]])
    assert part.J == 2
    assert np.allclose(part.region_volumes, [0.5, 0.5], rtol=1e-13)
    assert np.all(mesh.barycenters[part.cells_of(0), 0] < 0.5)


def test_partition_single_region_is_whole_mesh():
    mesh = box_mesh(3)
    part = build_region_partition(mesh, [[0.1, 0.2, 0.3]])
    assert part.J == 1
    assert part.region_volumes[0] == pytest.approx(mesh.volume, rel=1e-14)


def test_partition_empty_region_named():
    mesh = box_mesh(2)
    with pytest.raises(MeshError, match="empty region 2"):
        build_region_partition(mesh, [[0.5, 0.5, 0.5], [50.0, 50.0, 50.0]])


def test_partition_completeness(rng):
    mesh = box_mesh(5)
    seeds = rng.random((4, 3))
    part = build_region_partition(mesh, seeds)
    assert part.region_of_cell.shape == (mesh.n_cells,)
    assert part.region_volumes.sum() == pytest.approx(mesh.volume, rel=1e-14)
    assert sum(len(part.cells_of(j)) for j in range(part.J)) == mesh.n_cells


# -- signed distance ------------------------------------------------------------


def test_signed_distance_plane():
    plane = PlaneSurface((0, 0, 0), (0, 0, 1))
    assert signed_distance(plane, [0.0, 0.0, 0.3]) == pytest.approx(0.3)
    assert signed_distance(plane, [0.4, -1.0, 0.0]) == 0.0


def test_signed_distance_sphere_interior_negative():
    sphere = SphereSurface((0, 0, 0), 0.5)
    assert signed_distance(sphere, [0.0, 0.0, 0.0]) == pytest.approx(-0.5)
    assert signed_distance(sphere, [0.0, 0.5, 0.0]) == pytest.approx(0.0, abs=1e-15)


def test_signed_distance_is_1_lipschitz_on_closed_surface(rng):
    box = box_mesh(3)
    surf = TriangulatedSurface(box.vertices, box.facets)
    x = rng.uniform(-0.5, 1.5, (400, 3))
    y = x + rng.normal(scale=0.1, size=x.shape)
    dx, dy = surf.signed_distance(x), surf.signed_distance(y)
    assert np.all(np.abs(dx - dy) <= np.linalg.norm(x - y, axis=1) + 1e-12)
    assert surf.signed_distance([[0.5, 0.5, 0.5]])[0] == pytest.approx(-0.5)


def test_distance_magnitude_is_1_lipschitz_on_open_surface(rng):
    surf = disk_surface([0, 0, 0], [0.3, 0.1, 1.0], 0.4)
    x = rng.uniform(-0.6, 0.6, (400, 3))
    y = x + rng.normal(scale=0.05, size=x.shape)
    dx, dy = np.abs(surf.signed_distance(x)), np.abs(surf.signed_distance(y))
    assert np.all(np.abs(dx - dy) <= np.linalg.norm(x - y, axis=1) + 1e-12)


# -- boundary flux --------------------------------------------------------------


def test_boundary_flux_uniform_through_flat_patch():
    mesh = box_mesh(3, upper=(2.0, 1.5, 1.0))
    u = np.tile([0.0, 0.0, 0.7], (mesh.n_vertices, 1))
    assert boundary_flux(mesh, u, 6) == pytest.approx(0.7 * 3.0, rel=1e-14)
    assert boundary_flux(mesh, u, 5) == pytest.approx(-0.7 * 3.0, rel=1e-14)


def test_boundary_flux_tangential_is_zero():
    mesh = box_mesh(3)
    u = np.tile([1.0, -2.0, 0.0], (mesh.n_vertices, 1))
    assert abs(boundary_flux(mesh, u, 6)) < 1e-15


def test_boundary_flux_linear_profile_against_quadrature_oracle():
    mesh = box_mesh(4)
    v = 3.0
    u = np.zeros((mesh.n_vertices, 3))
    u[:, 2] = v * mesh.vertices[:, 0]
    # independent oracle: degree-3 triangle quadrature of u.n over the patch facets
    pts, w = simplex_quadrature(2, 3)
    total = 0.0
    for f in mesh.facets_of(6):
        x = mesh.vertices[mesh.facets[f]]
        q = pts @ x
        total += mesh.facet_areas[f] * np.dot(w, v * q[:, 0]) / w.sum()
    assert total == pytest.approx(v / 2, rel=1e-13)
    assert boundary_flux(mesh, u, 6) == pytest.approx(total, rel=1e-13)


def test_boundary_flux_unknown_patch():
    with pytest.raises(KeyError):
        boundary_flux(box_mesh(2), np.zeros((27, 3)), 99)


def test_divergence_theorem_for_solenoidal_linear_field():
    mesh = box_mesh(3, upper=(1.0, 2.0, 0.5))
    x = mesh.vertices
    u = np.column_stack([2 * x[:, 0] + x[:, 1], -3 * x[:, 1] + x[:, 2], x[:, 2] + 4 * x[:, 0]])
    fluxes = [boundary_flux(mesh, u, t) for t in mesh.tags]
    scale = sum(abs(f) for f in fluxes)
    assert abs(sum(fluxes)) <= 1e-12 * scale


def test_flux_functional_matches_boundary_flux(rng):
    mesh = box_mesh(3)
    u = rng.normal(size=(mesh.n_vertices, 3))
    b = flux_functional(mesh, [1, 4])
    assert b @ u.reshape(-1) == pytest.approx(boundary_flux(mesh, u, [1, 4]), rel=1e-13)
