"""Fluid-perfusion coupling, wall motion and the coupled time step.

Interface conditions, per coronary outlet ``j`` and perfusion region
``Omega_j`` (0-based indices):

* the outlet pressure ``p_c^j`` equals the mean of ``p1`` over ``Omega_j``;
* the outlet flux ``Q_j`` enters compartment 1 uniformly over ``Omega_j``:
  ``g1 = sum_j chi_j Q_j / |Omega_j|``.

Each time step solves the two conditions by a relaxed fixed point between the
fluid step (``p_c -> Q``) and the Darcy solve (``Q -> p_c``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .circulation import CirculationTrace
from .darcy import DarcySolver, DarcyState, SourceData, bed_pressure
from .fem import integrate
from .mesh import Mesh, RegionPartition
from .navier_stokes import FluidSolver, FluidState

logger = logging.getLogger(__name__)


class SplittingError(RuntimeError):
    """Fixed-point iteration did not converge."""

    def __init__(self, message, history):
        super().__init__(f"{message}; residual history: " + ", ".join(f"{r:.3e}" for r in history))
        self.history = list(history)


# -- interface operators ---------------------------------------------------


def region_averages(p1, partition: RegionPartition) -> np.ndarray:
    """Means of a P1 field over every region (exact for P1)."""
    mesh = partition.mesh
    vals = np.asarray(getattr(p1, "values", p1), float)
    cell_int = vals[mesh.cells].mean(axis=1) * mesh.cell_volumes
    sums = np.bincount(partition.region_of_cell, weights=cell_int, minlength=partition.J)
    return sums / partition.region_volumes


def region_average_pressure(darcy: DarcyState, partition: RegionPartition, j: int) -> float:
    """Mean of ``p1`` over region ``j`` (0-based)."""
    if not 0 <= j < partition.J:
        raise IndexError(f"region index {j} outside 0..{partition.J - 1}")
    return float(region_averages(darcy.p1, partition)[j])


def distribute_flux_sources(Q, partition: RegionPartition) -> np.ndarray:
    """Cellwise source ``g1`` (1/s) spreading ``Q_j`` uniformly over region ``j``."""
    Q = np.asarray(Q, float).reshape(-1)
    if len(Q) != partition.J:
        raise ValueError(f"expected {partition.J} fluxes, got {len(Q)}")
    return (Q / partition.region_volumes)[partition.region_of_cell]


# -- fixed point --------------------------------------------------------------


@dataclass(frozen=True)
class CouplingState:
    """Converged interface data of one time step."""

    p_c: np.ndarray
    Q: np.ndarray
    iteration: int
    residual: float
    history: tuple = ()


def splitting_residual(p_old, p_new, Q_old, Q_new) -> float:
    dp = np.max(np.abs(p_new - p_old)) / max(np.max(np.abs(p_old)), 1.0)
    if Q_old is None:
        dq = 0.0 if not np.any(Q_new) else 1.0
    else:
        dq = np.max(np.abs(Q_new - Q_old)) / max(np.max(np.abs(Q_new)), 1e-12)
    return float(max(dp, dq))


def splitting_iterations(fluid_flux, darcy_pressure, p_c0, Q_prev=None, tol=1e-6, max_iter=50, omega=0.7):
    """Relaxed fixed point between ``Q = fluid_flux(p_c)`` and ``p_c = darcy_pressure(Q)``.

    Iteration ``k`` evaluates ``Q^k = fluid_flux(p_c^k)`` and
    ``P^k = darcy_pressure(Q^k)``; it stops when
    ``max(|P^k - p_c^k|_inf / max(|p_c^k|_inf, 1 Pa), |Q^k - Q^{k-1}|_inf / max(|Q^k|_inf, 1e-12))``
    is at most ``tol`` and otherwise sets ``p_c^{k+1} = omega P^k + (1 - omega) p_c^k``.
    ``Q^0`` is ``Q_prev`` (typically the previous step's fluxes).

    Returns
    -------
    CouplingState
        ``p_c`` is the pressure fed to the fluid in the last iteration and
        ``Q`` the fluxes it produced.

    Raises
    ------
    SplittingError
        After ``max_iter`` iterations without convergence.
    """
    if not 0.0 < omega <= 1.0:
        raise ValueError("relaxation must lie in (0, 1]")
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    p_c = np.array(p_c0, float)
    Q_old = None if Q_prev is None else np.asarray(Q_prev, float)
    history = []
    for k in range(1, max_iter + 1):
        Q = np.asarray(fluid_flux(p_c), float)
        P = np.asarray(darcy_pressure(Q), float)
        res = splitting_residual(p_c, P, Q_old, Q)
        history.append(res)
        if not np.isfinite(res):
            raise SplittingError("non-finite splitting residual", history)
        if res <= tol:
            return CouplingState(p_c, Q, k, res, tuple(history))
        p_c = omega * P + (1.0 - omega) * p_c
        Q_old = Q
    raise SplittingError(f"splitting did not converge in {max_iter} iterations", history)


def splitting_solve(fluid_step, darcy: DarcySolver, partition: RegionPartition, p_bed, darcy_state: DarcyState,
                    Q_prev=None, tol=1e-6, max_iter=50, omega=0.7):
    """Solve one time step of the coupled problem by relaxed fixed-point splitting.

    Parameters
    ----------
    fluid_step : FluidStep
        Prepared fluid step (affine in the Robin pressures).
    darcy : DarcySolver
    partition : RegionPartition
    p_bed : float
        Bed pressure at the new time level (Pa).
    darcy_state : DarcyState
        Previous perfusion state; its region averages start the iteration.
    Q_prev : array, optional
        Previous converged fluxes.

    Returns
    -------
    fluid_state, darcy_state, coupling : FluidState, DarcyState, CouplingState
    """
    last = {}

    def darcy_pressure(Q):
        g1 = distribute_flux_sources(Q, partition)
        last["state"] = darcy.solve(SourceData(g1, p_bed), fluid_step.t)
        return region_averages(last["state"].p1, partition)

    p_c0 = region_averages(darcy_state.p1, partition)
    coupling = splitting_iterations(fluid_step.fluxes, darcy_pressure, p_c0, Q_prev, tol, max_iter, omega)
    return fluid_step.solve(coupling.p_c), last["state"], coupling


# -- wall motion ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WallMotion:
    """Radial squeeze of the ventricle wall towards the z axis.

    ``d(x, t) = -s(t) g(z) (x - x0, y - y0, 0)`` where ``s(t)`` is the
    squeeze fraction and ``g`` a cosine taper: 1 for ``z <= z_top - taper``,
    0 for ``z >= z_top``.
    """

    squeeze: object  # callable t -> fraction
    period: float
    axis: tuple = (0.0, 0.0)
    z_top: float = 0.0
    taper: float = 1.2e-2
    wall_tag: int = 1
    zero_tags: tuple = ()

    @classmethod
    def from_trace(cls, trace: CirculationTrace, s_max, **kw):
        return cls(lambda t: s_max * trace.squeeze_fraction(t), trace.period, **kw)

    @classmethod
    def still(cls, period=1.0, **kw):
        return cls(lambda t: 0.0, period, **kw)

    def taper_weight(self, z):
        z = np.asarray(z, float)
        rel = np.clip((self.z_top - z) / self.taper, 0.0, 1.0)
        return 0.5 * (1.0 - np.cos(np.pi * rel))

    def __call__(self, points, t):
        x = np.asarray(points, float)
        s = float(self.squeeze(t))
        g = self.taper_weight(x[:, 2])
        d = np.zeros_like(x)
        d[:, 0] = -s * g * (x[:, 0] - self.axis[0])
        d[:, 1] = -s * g * (x[:, 1] - self.axis[1])
        return d


def wall_displacement(motion: WallMotion, mesh: Mesh, t) -> np.ndarray:
    """Nodal wall displacement (n_vertices, 3); zero off the wall and on ``zero_tags``."""
    out = np.zeros((mesh.n_vertices, mesh.dimension))
    wall = mesh.vertices_of(motion.wall_tag)
    if motion.zero_tags:
        wall = np.setdiff1d(wall, mesh.vertices_of(motion.zero_tags))
    out[wall] = motion(mesh.vertices[wall], t)
    return out


# -- coupled step -------------------------------------------------------------


@dataclass
class StepRecord:
    """Per-step diagnostics of the coupled model."""

    t: float
    p_c: np.ndarray
    Q: np.ndarray
    p_lv: float
    outlet_pressures: dict
    p_bed: float
    iterations: int
    residual: float
    inflow: float  # int g1
    outflow: float  # gamma int (p3 - p_bed)
    mbf_mean: float
    fluid_info: dict = field(default_factory=dict)


class CoupledModel:
    """Fluid and perfusion solvers tied by the interface conditions.

    Parameters
    ----------
    fluid : FluidSolver
        Its Robin outlets, in order, feed regions ``0..J-1``.
    darcy : DarcySolver
    partition : RegionPartition
    trace : CirculationTrace
        Supplies ``p_LV(t)`` for the bed pressure.
    motion : WallMotion
    lifter : HarmonicLifter
        Extends the wall displacement into the fluid mesh.
    """

    def __init__(self, fluid: FluidSolver, darcy: DarcySolver, partition: RegionPartition, trace, motion, lifter,
                 tol=1e-6, max_iter=50, omega=0.7):
        if len(fluid.robin) != partition.J:
            raise ValueError(f"{len(fluid.robin)} Robin outlets but {partition.J} perfusion regions")
        self.fluid = fluid
        self.darcy = darcy
        self.partition = partition
        self.trace = trace
        self.motion = motion
        self.lifter = lifter
        self.tol, self.max_iter, self.omega = tol, max_iter, omega

    def p_bed(self, t) -> float:
        a1, a2 = self.darcy.params.a1, self.darcy.params.a2
        return bed_pressure(float(self.trace.p_lv(t)), a1, a2)

    def darcy_solve(self, Q, p_bed, t=0.0) -> DarcyState:
        g1 = distribute_flux_sources(Q, self.partition)
        return self.darcy.solve(SourceData(g1, p_bed), t)

    def initial_darcy(self, t=0.0) -> DarcyState:
        return DarcyState.uniform(self.darcy.mesh, self.p_bed(t), t)

    def step(self, fluid_state: FluidState, darcy_state: DarcyState, dt, Q_prev=None):
        """Advance both models by ``dt`` with the splitting iteration.

        Returns
        -------
        fluid_state, darcy_state, coupling : FluidState, DarcyState, CouplingState
        record : StepRecord
        """
        t_new = fluid_state.t + dt
        d_wall = wall_displacement(self.motion, self.fluid.mesh, t_new)
        d_new = self.lifter.lift(d_wall)
        fstep = self.fluid.prepare(fluid_state, dt, d_new=d_new, t_new=t_new)
        p_bed = self.p_bed(t_new)
        new_fluid, new_darcy, coupling = splitting_solve(
            fstep, self.darcy, self.partition, p_bed, darcy_state, Q_prev, self.tol, self.max_iter, self.omega
        )
        g1 = distribute_flux_sources(coupling.Q, self.partition)
        mesh = self.darcy.mesh
        inflow = float(np.dot(g1, mesh.cell_volumes))
        outflow = self.darcy.params.gamma * (integrate(mesh, new_darcy.p3.values) - p_bed * mesh.volume)
        beta23 = self.darcy.params.beta[1, 2]
        mbf_mean = beta23 * (integrate(mesh, new_darcy.p2.values) - integrate(mesh, new_darcy.p3.values)) / mesh.volume
        record = StepRecord(
            t=t_new,
            p_c=coupling.p_c.copy(),
            Q=coupling.Q.copy(),
            p_lv=float(self.trace.p_lv(t_new)),
            outlet_pressures={o.patch: o.pressure_at(t_new) for o in self.fluid.neumann},
            p_bed=p_bed,
            iterations=coupling.iteration,
            residual=coupling.residual,
            inflow=inflow,
            outflow=outflow,
            mbf_mean=mbf_mean * 6000.0,
            fluid_info=fstep.info,
        )
        return new_fluid, new_darcy, coupling, record
