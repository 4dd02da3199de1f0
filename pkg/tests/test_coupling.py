import numpy as np
import pytest
from oracles import monolithic_coupled_solve

from perfusim.ale import HarmonicLifter
from perfusim.circulation import CirculationParams, integrate_limit_cycle
from perfusim.coupling import (
    CouplingState,
    SplittingError,
    WallMotion,
    distribute_flux_sources,
    region_average_pressure,
    region_averages,
    splitting_iterations,
    splitting_solve,
    wall_displacement,
)
from perfusim.darcy import CompartmentParams, DarcySolver, DarcyState, SourceData, mass_balance
from perfusim.fem import FeSpace, Field
from perfusim.geometry import box_mesh, cylinder_mesh, rectangle_mesh, retag
from perfusim.mesh import build_region_partition
from perfusim.navier_stokes import FluidProperties, FluidSolver, FluidState, OutletBc

P_BED = 0.2
PARAMS = CompartmentParams.chain(1.0, 0.5, 0.5, 1.0, 1.0, 1.0, a1=0.0, a2=P_BED)


# -- interface operators -------------------------------------------------------------


@pytest.fixture(scope="module")
def cube_partition():
    mesh = box_mesh(4)
    return mesh, build_region_partition(mesh, [[0.25, 0.5, 0.5], [0.75, 0.5, 0.5]])


def _darcy_state(mesh, p1):
    f = Field(FeSpace(mesh), p1)
    return DarcyState(f, f, f)


def test_region_average_of_constant(cube_partition):
    mesh, part = cube_partition
    state = _darcy_state(mesh, np.full(mesh.n_vertices, 42.0))
    for j in range(part.J):
        assert region_average_pressure(state, part, j) == pytest.approx(42.0, rel=1e-14)


def test_region_average_of_linear_field(cube_partition):
    mesh, part = cube_partition
    state = _darcy_state(mesh, mesh.vertices[:, 0].copy())
    assert region_average_pressure(state, part, 0) == pytest.approx(0.25, rel=1e-13)
    assert region_average_pressure(state, part, 1) == pytest.approx(0.75, rel=1e-13)


def test_region_average_matches_cell_loop_oracle(cube_partition, rng):
    mesh, part = cube_partition
    p1 = rng.normal(size=mesh.n_vertices)
    sums = np.zeros(part.J)
    vols = np.zeros(part.J)
    for c in range(mesh.n_cells):
        j = part.region_of_cell[c]
        vol = abs(np.linalg.det(mesh.vertices[mesh.cells[c, 1:]] - mesh.vertices[mesh.cells[c, 0]])) / 6.0
        sums[j] += vol * sum(p1[v] for v in mesh.cells[c]) / 4.0
        vols[j] += vol
    oracle = sums / vols
    got = region_averages(p1, part)
    assert np.allclose(got, oracle, rtol=1e-14, atol=1e-14 * np.abs(oracle).max())


def test_region_index_checked(cube_partition):
    mesh, part = cube_partition
    state = _darcy_state(mesh, np.zeros(mesh.n_vertices))
    with pytest.raises(IndexError):
        region_average_pressure(state, part, 2)
    with pytest.raises(IndexError):
        region_average_pressure(state, part, -1)


def test_single_outlet_source(cube_partition):
    mesh, part = cube_partition
    g1 = distribute_flux_sources([3.0, 0.0], part)
    assert np.allclose(g1[part.cells_of(0)], 3.0 / part.region_volumes[0])
    assert np.all(g1[part.cells_of(1)] == 0.0)
    assert np.all(distribute_flux_sources([0.0, 0.0], part) == 0.0)
    with pytest.raises(ValueError):
        distribute_flux_sources([1.0], part)


def test_source_closure(cube_partition, rng):
    mesh, part = cube_partition
    Q = rng.normal(size=2)
    g1 = distribute_flux_sources(Q, part)
    assert np.dot(g1, mesh.cell_volumes) == pytest.approx(Q.sum(), rel=1e-14)


# -- fixed-point machinery ------------------------------------------------------------------


def test_splitting_iterations_scalar_contraction():
    # Q = 2 - p, P = 0.5 Q: fixed point p = 2/3
    state = splitting_iterations(lambda p: 2.0 - p, lambda q: 0.5 * q, [0.0], tol=1e-12, max_iter=100)
    assert state.p_c[0] == pytest.approx(2.0 / 3.0, rel=1e-10)
    assert isinstance(state, CouplingState)
    assert len(state.history) == state.iteration


def test_splitting_error_carries_history():
    with pytest.raises(SplittingError) as err:
        splitting_iterations(lambda p: 2.0 - p, lambda q: 0.5 * q, [0.0], tol=1e-14, max_iter=3)
    assert len(err.value.history) == 3
    assert "residual history" in str(err.value)


def test_splitting_arguments_validated():
    with pytest.raises(ValueError):
        splitting_iterations(lambda p: p, lambda q: q, [0.0], omega=0.0)
    with pytest.raises(ValueError):
        splitting_iterations(lambda p: p, lambda q: q, [0.0], omega=1.5)
    with pytest.raises(ValueError):
        splitting_iterations(lambda p: p, lambda q: q, [0.0], tol=0.0)


def test_divergent_iteration_reports_non_finite():
    with pytest.raises(SplittingError), np.errstate(over="ignore"):
        splitting_iterations(lambda p: np.exp(1e3 * p), lambda q: q, [1.0], omega=1.0)


# -- linear model problem -------------------------------------------------------------------


def model_problem(alpha=0.1):
    """Stokes-like first step on a channel coupled to a two-region Darcy square.

    Channel [0, 2] x [0, 1]: tag 1 inlet at unit pressure, tags 2 and 4 Robin
    outlets, tag 3 wall. Starting from rest the convection vanishes, so the
    step is linear.
    """
    mf = rectangle_mesh(16, 8, upper=(2.0, 1.0))
    mp = rectangle_mesh(12, 12)
    part = build_region_partition(mp, [[0.25, 0.5], [0.75, 0.5]])
    fluid = FluidSolver(
        mf, FluidProperties(1.0, 1.0),
        [OutletBc.neumann(1, 1.0), OutletBc.robin(2, alpha), OutletBc.robin(4, alpha)],
    )
    step = fluid.prepare(FluidState.rest(mf), 1.0)
    return step, DarcySolver(mp, PARAMS), mp, part


def test_model_problem_size():
    step, darcy, mp, _ = model_problem()
    assert step.matrix.shape[0] + 3 * mp.n_vertices <= 5000


def test_splitting_matches_monolithic_oracle():
    step, darcy, mp, part = model_problem()
    _, _, c = splitting_solve(step, darcy, part, P_BED, DarcyState.uniform(mp, P_BED), omega=0.7)
    p_ref, Q_ref, _ = monolithic_coupled_solve(step, mp, PARAMS, part, P_BED)
    assert c.iteration <= 30
    assert np.abs(c.p_c - p_ref).max() <= 1e-6 * np.abs(p_ref).max()
    assert np.allclose(c.Q, Q_ref, rtol=1e-5)
    assert np.all(c.Q > 0)


def test_residual_monotone_at_half_relaxation():
    step, darcy, mp, part = model_problem()
    _, _, c = splitting_solve(step, darcy, part, P_BED, DarcyState.uniform(mp, P_BED), omega=0.5)
    assert np.all(np.diff(c.history) <= 0.0)


def test_interface_conditions_hold_at_convergence():
    step, darcy, mp, part = model_problem()
    tol = 1e-6
    fluid, dstate, c = splitting_solve(step, darcy, part, P_BED, DarcyState.uniform(mp, P_BED), tol=tol)
    # force balance
    avg = region_averages(dstate.p1, part)
    assert np.all(np.abs(c.p_c - avg) <= tol * np.maximum(np.abs(c.p_c), 1.0))
    # mass: sum Q = int g1 = gamma int (p3 - p_bed)
    g1 = distribute_flux_sources(c.Q, part)
    inflow, outflow = mass_balance(mp, PARAMS, SourceData(g1, P_BED), dstate)
    assert inflow == pytest.approx(c.Q.sum(), rel=1e-12)
    assert outflow == pytest.approx(inflow, rel=1e-8)
    # the returned fluid state carries the converged fluxes
    assert np.allclose(step.fluxes(c.p_c), c.Q, rtol=1e-14)
    assert fluid.t == step.t


def test_closed_outlets_decouple():
    step, darcy, mp, part = model_problem(alpha=1e-15)
    _, dstate, c = splitting_solve(step, darcy, part, P_BED, DarcyState.uniform(mp, P_BED))
    assert c.iteration <= 2
    assert np.abs(c.Q).max() < 1e-14
    assert np.allclose(c.p_c, P_BED, rtol=1e-10)
    assert np.allclose(dstate.p3.values, P_BED, rtol=1e-10)


def test_repeated_step_converges_in_one_iteration():
    step, darcy, mp, part = model_problem()
    _, dstate, c = splitting_solve(step, darcy, part, P_BED, DarcyState.uniform(mp, P_BED))
    _, _, again = splitting_solve(step, darcy, part, P_BED, dstate, Q_prev=c.Q)
    assert again.iteration == 1
    assert again.residual <= 1e-6


def test_splitting_is_deterministic():
    runs = []
    for _ in range(2):
        step, darcy, mp, part = model_problem()
        fluid, dstate, c = splitting_solve(step, darcy, part, P_BED, DarcyState.uniform(mp, P_BED))
        runs.append((fluid.u.values, dstate.p1.values, c.p_c, c.Q))
    for a, b in zip(*runs):
        assert np.array_equal(a, b)


# -- wall motion ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trace():
    return integrate_limit_cycle(CirculationParams(), dt=1e-3)


def test_wall_motion_zero_at_reference_and_period(trace):
    mesh = cylinder_mesh(1.0, 2.0, n_radial=2, n_axial=3)
    motion = WallMotion.from_trace(trace, 0.1, z_top=2.0, taper=0.5)
    assert np.all(wall_displacement(motion, mesh, 0.0) == 0.0)
    assert np.abs(wall_displacement(motion, mesh, trace.period)).max() <= 1e-15
    t_es = trace.times[np.argmin(trace.volume_samples)]
    assert np.abs(wall_displacement(motion, mesh, t_es)).max() == pytest.approx(0.1, rel=1e-2)


def test_wall_motion_zero_on_excluded_patches():
    mesh = cylinder_mesh(1.0, 2.0, n_radial=2, n_axial=3)
    motion = WallMotion(lambda t: 0.1, 1.0, z_top=2.0, taper=0.5, wall_tag=1, zero_tags=(2,))
    d = wall_displacement(motion, mesh, 0.3)
    assert np.all(d[mesh.vertices_of(2)] == 0.0)
    off_wall = np.setdiff1d(np.arange(mesh.n_vertices), mesh.vertices_of(1))
    assert np.all(d[off_wall] == 0.0)
    assert np.abs(d).max() > 0


def test_still_motion():
    mesh = box_mesh(1)
    assert np.all(wall_displacement(WallMotion.still(), mesh, 0.4) == 0.0)


def test_squeeze_swept_volume_matches_analytic(trace):
    R, L, taper = 1.0, 2.0, 0.8
    base = cylinder_mesh(R, L, n_radial=8, n_axial=20)
    mesh = retag(base, lambda c, n, old: np.ones(len(c), np.int64))  # every boundary vertex follows the law
    motion = WallMotion.from_trace(trace, 0.1, z_top=L, taper=taper)
    t_es = trace.times[np.argmin(trace.volume_samples)]
    s = 0.1 * trace.squeeze_fraction(t_es)
    d = HarmonicLifter(mesh).lift(wall_displacement(motion, mesh, t_es))
    swept = mesh.volume - mesh.displaced(d).volume
    z = np.linspace(0.0, L, 20001)
    g = motion.taper_weight(z)
    analytic = np.pi * R**2 * np.trapezoid(1.0 - (1.0 - s * g) ** 2, z)
    assert swept == pytest.approx(analytic, rel=0.02)
