"""Resistive immersed implicit surfaces (valves).

A valve adds the reaction term ``sigma(x) (u - u_ALE)`` to the momentum
equation with ``sigma = (R / eps) * delta_eps(phi(x))``, where ``phi`` is
the signed distance to the valve surface of the current phase and
``delta_eps(phi) = (1 + cos(pi phi / eps)) / (2 eps)`` for ``|phi| <= eps``.
``R`` has units kg/(m s): the pressure jump across a closed surface at
normal velocity ``u`` is about ``R u / eps``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import Field
from .mesh import Mesh
from .surfaces import ImmersedSurface

OPEN = "open"
CLOSED = "closed"


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Left-closed phase intervals ``(start, end, phase)`` covering one period."""

    period: float
    intervals: tuple

    def __post_init__(self):
        iv = tuple((float(a), float(b), str(p)) for a, b, p in self.intervals)
        for a, b, p in iv:
            if p not in (OPEN, CLOSED):
                raise ScheduleError(f"unknown phase {p!r}")
            if not (0.0 <= a < b <= self.period):
                raise ScheduleError(f"interval [{a}, {b}) outside [0, {self.period}]")
        object.__setattr__(self, "intervals", tuple(sorted(iv)))

    @classmethod
    def from_switches(cls, period, t_open, t_close):
        """Open on ``[t_open, t_close)`` (wrapping around the period)."""
        t_open, t_close = t_open % period, t_close % period
        if t_open < t_close:
            iv = [(0.0, t_open, CLOSED), (t_open, t_close, OPEN), (t_close, period, CLOSED)]
        else:
            iv = [(0.0, t_close, OPEN), (t_close, t_open, CLOSED), (t_open, period, OPEN)]
        return cls(period, tuple((a, b, p) for a, b, p in iv if b > a))

    def transitions(self):
        """Times in [0, period) where the phase changes."""
        out = []
        for k, (a, _, p) in enumerate(self.intervals):
            prev = self.intervals[k - 1][2]
            if p != prev:
                out.append(a)
        return out


def valve_phase(t: float, schedule: Schedule) -> str:
    """Phase at time ``t`` (periodic wrap; intervals are left-closed)."""
    tau = float(t) % schedule.period
    for a, b, p in schedule.intervals:
        if a <= tau < b:
            return p
    raise ScheduleError(f"time {t} (phase {tau}) is not covered by the schedule")


@dataclass(frozen=True)
class ValveModel:
    """Immersed valve with an open and a closed configuration.

    ``open_surface`` may be ``None`` (no resistance while open).
    """

    name: str
    closed_surface: ImmersedSurface | None
    open_surface: ImmersedSurface | None
    R: float
    epsilon: float
    schedule: Schedule

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("valve half-thickness must be positive")
        if self.R < 0:
            raise ValueError("valve resistance must be non-negative")

    def surface(self, phase: str):
        return self.open_surface if phase == OPEN else self.closed_surface


def smoothed_delta(phi, epsilon):
    """Compactly supported cosine kernel with unit integral."""
    phi = np.asarray(phi, float)
    out = (1.0 + np.cos(np.pi * phi / epsilon)) / (2.0 * epsilon)
    return np.where(np.abs(phi) <= epsilon, out, 0.0)


def check_resolution(valve: ValveModel, mesh: Mesh, coefficient=None):
    """Warn when eps is below half the local mesh size near the surface."""
    h = mesh.cell_sizes
    if coefficient is not None:
        active = coefficient[mesh.cells].max(axis=1) > 0
        if not active.any():
            return
        h = h[active]
    if valve.epsilon < 0.5 * float(np.max(h)):
        msg = f"valve {valve.name!r}: eps={valve.epsilon:g} m under-resolved (local h up to {np.max(h):g} m)"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)


def riis_coefficient(valve: ValveModel, phase: str, points) -> np.ndarray:
    """Nodal reaction coefficient ``sigma`` (kg/(m^3 s)) at ``points``."""
    points = np.asarray(points, float)
    sigma = np.zeros(len(points))
    surf = valve.surface(phase)
    if surf is None or valve.R == 0.0:
        return sigma
    near = np.flatnonzero(surf.near(points, valve.epsilon))
    if near.size:
        phi = surf.signed_distance(points[near])
        sigma[near] = valve.R / valve.epsilon * smoothed_delta(phi, valve.epsilon)
    return sigma


def reaction_local(vertices, cells, volumes, sigma_nodal):
    """Cell matrices of ``int sigma phi_a phi_b`` with P1-interpolated sigma.

    Exact for the cubic integrand via the element-moment formula.
    """
    dim = cells.shape[1] - 1
    s = sigma_nodal[cells]  # (m, nb)
    nb = dim + 1
    # int lam_a lam_b lam_c = |K| d! (1 + [a=b] + [b=c] + [a=c] + 2[a=b=c]) / (d+3)!
    fact = {2: 2.0 / 120.0, 3: 6.0 / 720.0}[dim]
    total = s.sum(axis=1)
    eye = np.eye(nb)
    # sum_c s_c * mult(a,b,c)
    base = total[:, None, None] * (1.0 + eye[None])  # 1 + [a=b] terms with c summed
    extra = s[:, :, None] + s[:, None, :]  # [b=c] + [a=c]
    diag = 2.0 * s[:, :, None] * eye[None]  # 2 [a=b=c]
    return fact * volumes[:, None, None] * (base + extra + diag)


@dataclass(frozen=True)
class RiisContribution:
    """Matrix ``S`` (vector layout) and right-hand side ``S u_ALE``."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    sigma: np.ndarray

    def residual(self, u) -> np.ndarray:
        u = np.asarray(getattr(u, "values", u), float)
        return self.matrix @ u - self.rhs


def riis_term(u: Field, u_ale: Field, valve: ValveModel, phase: str) -> RiisContribution:
    """Momentum contribution of one valve in the given phase.

    The residual ``S (u - u_ALE)`` is returned through
    :meth:`RiisContribution.residual`.
    """
    space = u.space
    mesh = space.mesh
    sigma = riis_coefficient(valve, phase, mesh.vertices)
    check_resolution(valve, mesh, sigma)
    local = reaction_local(mesh.vertices, mesh.cells, mesh.cell_volumes, sigma)
    nb = mesh.dimension + 1
    rows = np.repeat(mesh.cells, nb, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, nb)).ravel()
    S = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_vertices,) * 2).tocsr()
    S = sp.kron(S, sp.identity(space.multiplicity), format="csr")
    return RiisContribution(S, S @ u_ale.values, sigma)

