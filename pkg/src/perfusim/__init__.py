"""Coupled ventricle hemodynamics and myocardial perfusion on desk-scale meshes.

Modules
-------
mesh, geometry, surfaces
    Simplicial meshes with their generators and immersed surfaces.
fem, linalg
    P1 spaces with assembly and sparse solvers.
ale, riis, navier_stokes
    Mesh motion and the stabilized ALE Navier-Stokes step with immersed valves.
darcy
    Three-compartment Darcy perfusion and MBF.
circulation, coupling
    Lumped circulation driver and the fluid-perfusion splitting.
scenario, io, cli
    Scenario files and the ``perfusim`` command.
"""

from .coupling import (
    CoupledModel,
    CouplingState,
    SplittingError,
    WallMotion,
    distribute_flux_sources,
    region_average_pressure,
    splitting_iterations,
    splitting_solve,
    wall_displacement,
)
from .darcy import CompartmentParams, DarcyState, SourceData, bed_pressure, compute_mbf, solve_darcy
from .fem import FeSpace, Field, SparseSystem, assemble_operator, l2_error
from .mesh import Mesh, RegionPartition, boundary_flux, build_region_partition, load_mesh
from .navier_stokes import FluidProperties, FluidSolver, FluidState, OutletBc, ns_step
from .riis import ValveModel, riis_term, valve_phase
from .scenario import RunReport, ScenarioConfig, apply_ar_modifications, run_scenario
from .surfaces import signed_distance

__version__ = "0.1.0"
