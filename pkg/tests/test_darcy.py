import numpy as np
import pytest

from perfusim.darcy import (
    CompartmentParams,
    DarcyError,
    DarcySolver,
    DarcyState,
    SourceData,
    assemble_darcy_system,
    bed_pressure,
    compute_mbf,
    darcy_velocity,
    mass_balance,
    mean_mbf,
    solve_darcy,
)
from perfusim.fem import FeSpace, Field, assemble_operator, l2_error
from perfusim.geometry import DeskGeometry, box_mesh, rectangle_mesh
from perfusim.units import MMHG

DESK = CompartmentParams.chain(1e-7, 1e-8, 1e-8, 2.4e-5, 2.4e-5, 2.4e-5)


# -- bed pressure -------------------------------------------------------------------------


def test_bed_pressure_values():
    assert bed_pressure(0.0) == 1500.0
    assert bed_pressure(16716.0) == pytest.approx(8186.4)
    assert bed_pressure(125.4 * MMHG) / MMHG == pytest.approx(61.4, abs=0.05)
    # inverse of a1 p + a2 = 14.2 mmHg
    p_lv = (14.2 * MMHG - 1500.0) / 0.4
    assert p_lv == pytest.approx(983.0, abs=1.0)
    assert bed_pressure(983.0) == pytest.approx(1893.2)
    assert np.allclose(bed_pressure([0.0, 1000.0], a1=0.5, a2=10.0), [10.0, 510.0])


# -- parameters ----------------------------------------------------------------------------


def test_params_validation():
    with pytest.raises(ValueError, match="symmetric"):
        CompartmentParams((1, 1, 1), [[0, 1, 0], [2, 0, 0], [0, 0, 0]], 1.0)
    with pytest.raises(ValueError, match="diagonal"):
        CompartmentParams((1, 1, 1), np.eye(3), 1.0)
    with pytest.raises(ValueError, match="non-negative"):
        CompartmentParams.chain(1, 1, 1, 1, 1, -1.0)
    with pytest.raises(ValueError):
        CompartmentParams((1, 1), np.zeros((3, 3)), 1.0)


# -- assembled operator ------------------------------------------------------------------------


def test_exchange_block_has_zero_column_sums():
    mesh = box_mesh(2)
    params = CompartmentParams.chain(1.0, 2.0, 3.0, 0.7, 0.4, 0.0, beta13=0.2)
    A = assemble_darcy_system(mesh, params, SourceData.uniform(mesh)).matrix
    n = mesh.n_vertices
    stiff = [assemble_operator(FeSpace(mesh), "stiffness", K=k) for k in (1.0, 2.0, 3.0)]
    exchange = A.toarray()
    for i in range(3):
        exchange[i * n : (i + 1) * n, i * n : (i + 1) * n] -= stiff[i].toarray()
    # roundoff of the subtraction scales with the full operator
    assert np.abs(exchange.sum(axis=0)).max() <= 1e-14 * abs(A).max()


def test_system_symmetric_positive_definite_with_sink():
    mesh = rectangle_mesh(3, 3)
    A = assemble_darcy_system(mesh, DESK, SourceData.uniform(mesh)).matrix.toarray()
    assert np.allclose(A, A.T, rtol=0, atol=1e-14 * np.abs(A).max())
    assert np.linalg.eigvalsh(A)[0] > 0


def test_decoupled_limit_without_exchange_is_singular():
    mesh = box_mesh(2)
    params = CompartmentParams.chain(1.0, 1.0, 1.0, 0.0, 0.0, 1.0)
    with pytest.raises(DarcyError, match="no sink"):
        solve_darcy(mesh, params, SourceData.uniform(mesh, 0.0, 10.0))
    # regularized: p3 equilibrates with the bed, p1 and p2 zero-mean constants
    state = solve_darcy(mesh, params, SourceData.uniform(mesh, 0.0, 10.0), regularize=True)
    assert np.allclose(state.p3.values, 10.0, rtol=1e-12)
    assert np.abs(state.p1.values).max() < 1e-12
    with pytest.raises(DarcyError, match="incompatible"):
        solve_darcy(mesh, params, SourceData.uniform(mesh, 1.0, 10.0), regularize=True)


def test_pure_neumann_with_inflow_and_no_sink():
    mesh = box_mesh(2)
    params = CompartmentParams.chain(1.0, 1.0, 1.0, 1.0, 1.0, 0.0)
    with pytest.raises(DarcyError):
        DarcySolver(mesh, params)


# -- solve_darcy examples ---------------------------------------------------------------------


def test_uniform_source_matches_algebraic_oracle():
    mesh = box_mesh(3)
    b12, b23, g, s, pb = 1e-3, 2e-3, 5e-4, 0.5, 100.0
    params = CompartmentParams.chain(1e-7, 1e-8, 1e-8, b12, b23, g)
    state = solve_darcy(mesh, params, SourceData.uniform(mesh, s, pb))
    A = np.array([[b12, -b12, 0.0], [-b12, b12 + b23, -b23], [0.0, -b23, b23 + g]])
    oracle = np.linalg.solve(A, [s, 0.0, g * pb])
    for field, value in zip(state.pressures, oracle):
        assert np.allclose(field.values, value, rtol=1e-8)


def test_no_inflow_gives_bed_equilibrium():
    mesh = box_mesh(2)
    state = solve_darcy(mesh, DESK, SourceData.uniform(mesh, 0.0, 2000.0))
    for field in state.pressures:
        assert np.allclose(field.values, 2000.0, rtol=1e-10)


def test_linearity_in_the_source(rng):
    mesh = box_mesh(3)
    g1 = rng.uniform(0.0, 0.02, mesh.n_cells)
    solver = DarcySolver(mesh, DESK)
    s1 = solver.solve(SourceData(g1, 1500.0))
    s2 = solver.solve(SourceData(2 * g1, 1500.0))
    for a, b in zip(s1.pressures, s2.pressures):
        assert np.allclose(b.values - 1500.0, 2 * (a.values - 1500.0), rtol=1e-9)


def test_factorized_and_iterative_paths_agree(rng):
    mesh = box_mesh(3)
    src = SourceData(rng.uniform(0.0, 0.02, mesh.n_cells), 1800.0)
    a = DarcySolver(mesh, DESK).solve(src)
    b = solve_darcy(mesh, DESK, src, tol=1e-12)
    for x, y in zip(a.pressures, b.pressures):
        assert np.allclose(x.values, y.values, rtol=1e-9)


def test_desk_balance_inflow_equals_bed_outflow():
    mesh = DeskGeometry().perfusion_mesh()
    g1 = np.where(mesh.barycenters[:, 1] > 0, 1.0, 0.5) * 0.0146
    src = SourceData(g1, 2000.0)
    state = DarcySolver(mesh, DESK).solve(src)
    inflow, outflow = mass_balance(mesh, DESK, src, state)
    assert outflow == pytest.approx(inflow, rel=1e-8)


def test_bed_pressure_monotonicity(rng):
    mesh = box_mesh(3)
    g1 = rng.uniform(0.0, 0.02, mesh.n_cells)
    solver = DarcySolver(mesh, CompartmentParams.chain(1e-5, 1e-6, 1e-6, 1e-4, 1e-4, 1e-4))
    lo = solver.solve(SourceData(g1, 1000.0)).p3.values
    hi = solver.solve(SourceData(g1, 1200.0)).p3.values
    assert hi.min() > lo.min() and hi.max() > lo.max()


def single_compartment_errors(sizes=(8, 16, 32, 64)):
    """L2 errors of the compartment-3 manufactured solution cos(pi x) cos(pi y)."""
    K, gamma = 1.0, 1.0
    exact = lambda x: np.cos(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])  # noqa: E731
    errors = []
    for n in sizes:
        mesh = rectangle_mesh(n, n)
        params = CompartmentParams.chain(1.0, 1.0, K, 0.0, 0.0, gamma)
        body = (None, None, lambda x: (2 * np.pi**2 * K + gamma) * exact(x))
        state = DarcySolver(mesh, params, regularize=True).solve(SourceData.uniform(mesh, 0.0, 0.0, body))
        errors.append(l2_error(state.p3, exact))
    return np.array(errors)


def test_single_compartment_manufactured_order_two():
    errors = single_compartment_errors()
    orders = np.log2(errors[:-1] / errors[1:])
    assert np.all(np.abs(orders - 2.0) <= 0.2), orders


# -- darcy_velocity ----------------------------------------------------------------------------


def test_velocity_of_constant_and_linear_pressure():
    mesh = box_mesh(2)
    space = FeSpace(mesh)
    assert np.abs(darcy_velocity(Field(space, np.full(mesh.n_vertices, 3.0)), 1.0)).max() == 0.0
    u = darcy_velocity(space.interpolate(lambda x: x[:, 0]), np.eye(3))
    assert np.allclose(u, [-1.0, 0.0, 0.0], atol=1e-13)
    u = darcy_velocity(space.interpolate(lambda x: x[:, 0] + 2 * x[:, 2]), np.diag([2.0, 1.0, 3.0]))
    assert np.allclose(u, [-2.0, 0.0, -6.0], atol=1e-12)


def test_velocity_first_order_against_analytic_gradient():
    exact_grad = lambda x: -np.pi * np.column_stack(  # noqa: E731
        [np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]), np.cos(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])]
    )
    errs = []
    for n in (8, 16, 32):
        mesh = rectangle_mesh(n, n)
        p = FeSpace(mesh).interpolate(lambda x: np.cos(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]))
        u = darcy_velocity(p, 1.0)
        errs.append(np.abs(u + exact_grad(mesh.barycenters)).max())
    errs = np.array(errs)
    assert np.all(errs[:-1] / errs[1:] > 1.8)


# -- MBF -------------------------------------------------------------------------------


def test_mbf_examples():
    mesh = box_mesh(2)
    space = FeSpace(mesh)
    p3 = Field(space, np.full(mesh.n_vertices, 1000.0))
    assert np.all(compute_mbf(p3, p3, 2.4e-5).values == 0.0)
    beta = 2.4e-5
    p2 = Field(space, p3.values + 0.0145833 / beta)
    mbf = compute_mbf(p2, p3, beta)
    assert mean_mbf(mbf) == pytest.approx(87.5, abs=0.1)
    p2b = Field(space, p3.values + 2 * 0.0145833 / beta)
    assert np.allclose(compute_mbf(p2b, p3, beta).values, 2 * mbf.values, rtol=1e-12)


def test_mbf_invariant_under_common_shift(rng):
    mesh = box_mesh(2)
    space = FeSpace(mesh)
    p2 = Field(space, rng.normal(size=mesh.n_vertices))
    p3 = Field(space, rng.normal(size=mesh.n_vertices))
    a = compute_mbf(p2, p3, 1e-3).values
    b = compute_mbf(p2 + 500.0, p3 + 500.0, 1e-3).values
    assert np.allclose(a, b, rtol=1e-9, atol=1e-12)


def test_mbf_rejects_mixed_meshes():
    a = Field(FeSpace(box_mesh(1)), np.zeros(8))
    b = Field(FeSpace(box_mesh(1)), np.zeros(8))
    with pytest.raises(ValueError):
        compute_mbf(a, b, 1.0)


def test_uniform_state_helper():
    mesh = box_mesh(1)
    s = DarcyState.uniform(mesh, 7.0, t=0.5)
    assert s.mesh is mesh and s.t == 0.5
    assert all(np.all(f.values == 7.0) for f in s.pressures)
