"""Stabilized P1-P1 ALE Navier-Stokes with immersed resistive valves.

One time step solves, on the mesh configuration at the new time level,

    rho (alpha0 u - h) / dt + rho (a . grad) u - mu lap u + grad p
        + sigma (u - u_ALE) = f,        div u = 0,

with BDF1 on the first step and BDF2 afterwards, the advection velocity
``a = u* - u_ALE`` built from the extrapolated velocity ``u*``, SUPG/PSPG
and grad-div stabilization, and the boundary conditions

* ``u = u_ALE`` on wall patches (strong),
* traction ``-P(t) n`` on Neumann patches,
* ``-(sigma n) . n = p_c + Q / alpha`` with ``Q = int u . n`` and zero
  tangential traction on Robin patches (the ``Q / alpha`` part is an
  implicit rank-one term),
* inflow backflow stabilization on Neumann and Robin patches.

The traction is the one natural to the ``mu grad u : grad v`` form.

For fixed data the discrete step is affine in the Robin pressures ``p_c``.
:meth:`FluidSolver.prepare` assembles and solves once for ``p_c = 0`` and
once per Robin outlet for a unit ``p_c``; :meth:`FluidStep.solve` then
superposes. Coupling iterations that only change ``p_c`` cost no further
linear solves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .fem import AssemblyPattern, FeSpace, Field, local_mass, simplex_quadrature
from .linalg import ReusedFactorization, SolverError
from .mesh import Mesh, MeshInversionError
from .riis import ValveModel, check_resolution, reaction_local, riis_coefficient, valve_phase

logger = logging.getLogger(__name__)

ROBIN = "robin"
NEUMANN = "neumann"


@dataclass(frozen=True)
class FluidProperties:
    """Blood density (kg/m^3) and dynamic viscosity (kg/(m s))."""

    rho: float = 1.06e3
    mu: float = 3.5e-3

    def __post_init__(self):
        if not (self.rho > 0 and self.mu > 0):
            raise ValueError("density and viscosity must be positive")


@dataclass(frozen=True, eq=False)
class PressureSeries:
    """Sampled pressure transient (s, Pa) with linear interpolation.

    With ``period`` set, time is wrapped into ``[0, period)``.
    """

    times: np.ndarray
    values: np.ndarray
    period: float | None = None

    def __post_init__(self):
        t = np.asarray(self.times, float)
        v = np.asarray(self.values, float)
        if t.ndim != 1 or t.shape != v.shape or len(t) == 0:
            raise ValueError("pressure series needs matching 1-D times and values")
        if np.any(np.diff(t) <= 0):
            raise ValueError("pressure series times must increase")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value):
        return cls(np.array([0.0]), np.array([float(value)]))

    def __call__(self, t):
        if self.period is not None:
            t = np.mod(t, self.period)
        return np.interp(t, self.times, self.values)


@dataclass(frozen=True)
class OutletBc:
    """Natural boundary condition on one patch.

    ``robin``: conductance ``alpha`` (m^3/(Pa s)) and interface pressure
    ``p_c`` (Pa). ``neumann``: pressure ``pressure`` (Pa, a number or a
    :class:`PressureSeries`).
    """

    patch: int
    kind: str
    alpha: float | None = None
    p_c: float = 0.0
    pressure: object = 0.0

    def __post_init__(self):
        if self.kind == ROBIN:
            if self.alpha is None or not self.alpha > 0:
                raise ValueError(f"robin outlet {self.patch} needs alpha > 0")
        elif self.kind != NEUMANN:
            raise ValueError(f"unknown outlet kind {self.kind!r}")

    @classmethod
    def robin(cls, patch, alpha, p_c=0.0):
        return cls(int(patch), ROBIN, alpha=float(alpha), p_c=float(p_c))

    @classmethod
    def neumann(cls, patch, pressure):
        return cls(int(patch), NEUMANN, pressure=pressure)

    def pressure_at(self, t) -> float:
        p = self.pressure
        return float(p(t)) if callable(p) else float(p)


@dataclass(frozen=True, eq=False)
class FluidState:
    """Velocity, pressure, domain displacement and domain velocity at time ``t``.

    ``previous`` holds the preceding level (without its own history) for
    BDF2 and velocity extrapolation.
    """

    u: Field
    p: Field
    d: Field
    w: Field
    t: float = 0.0
    previous: "FluidState | None" = field(default=None, repr=False)

    @classmethod
    def rest(cls, mesh: Mesh, t=0.0, d=None, pressure=0.0):
        dim = mesh.dimension
        vs, ss = FeSpace(mesh, dim), FeSpace(mesh, 1)
        zero = np.zeros(vs.ndofs)
        disp = zero if d is None else np.asarray(d, float).reshape(-1)
        return cls(
            Field(vs, zero, "m/s"),
            Field(ss, np.full(ss.ndofs, float(pressure)), "Pa"),
            Field(vs, disp, "m"),
            Field(vs, zero, "m/s"),
            float(t),
        )

    @property
    def mesh(self) -> Mesh:
        return self.u.space.mesh

    def stripped(self) -> "FluidState":
        return replace(self, previous=None)

    def current_mesh(self) -> Mesh:
        return self.mesh.displaced(self.d.values)


def _geometry(x, cells):
    xc = x[cells]
    jac = (xc[:, 1:, :] - xc[:, :1, :]).transpose(0, 2, 1)
    det = np.linalg.det(jac)
    d = x.shape[1]
    vol = det / (2.0 if d == 2 else 6.0)
    bad = np.flatnonzero(vol <= 0.0)
    if bad.size:
        raise MeshInversionError(int(bad[0]), float(vol[bad[0]]))
    inv = np.linalg.inv(jac)
    G = np.empty((len(cells), d + 1, d))
    G[:, 1:, :] = inv
    G[:, 0, :] = -inv.sum(axis=1)
    return vol, G


def _facet_geometry(x, facets):
    xf = x[facets]
    if x.shape[1] == 2:
        t = xf[:, 1] - xf[:, 0]
        raw = np.stack([t[:, 1], -t[:, 0]], axis=1)
    else:
        raw = np.cross(xf[:, 1] - xf[:, 0], xf[:, 2] - xf[:, 0]) / 2.0
    area = np.linalg.norm(raw, axis=1)
    return area, raw / area[:, None]


class FluidSolver:
    """Reusable time-step operator for one fluid mesh.

    Parameters
    ----------
    mesh : Mesh
        Reference configuration.
    props : FluidProperties
    outlets : list of OutletBc
        Natural conditions; all other patches are walls (``u = u_ALE``).
    valves : list of ValveModel
    body_force : callable ``f(x, t)`` -> (N, d), optional
    boundary_velocity : callable ``g(x, t)`` -> (N, d), optional
        Dirichlet data on walls instead of ``u_ALE``.
    linear_tol : float
        Relative residual of the linear solves.
    backflow : bool
        Add inflow stabilization on natural-boundary patches.
    """

    def __init__(
        self,
        mesh: Mesh,
        props: FluidProperties = FluidProperties(),
        outlets=(),
        valves=(),
        body_force=None,
        boundary_velocity=None,
        linear_tol=1e-10,
        backflow=True,
        max_lagged_iterations=25,
        refactor_sweeps=4,
    ):
        self.mesh = mesh
        self.props = props
        self.outlets = list(outlets)
        self.valves = list(valves)
        self.body_force = body_force
        self.boundary_velocity = boundary_velocity
        self.backflow = backflow
        d = mesh.dimension
        self.dim = d
        self.B = d + 1
        n = mesh.n_vertices
        self.vdofs = (np.arange(n)[:, None] * self.B + np.arange(d)).reshape(-1)
        self.pdofs = np.arange(n) * self.B + d
        natural = [o.patch for o in self.outlets]
        if len(set(natural)) != len(natural):
            raise ValueError("patch listed twice among outlets")
        for tag in natural:
            mesh.facets_of(tag)  # KeyError on unknown tag
        self.wall_tags = tuple(t for t in mesh.tags if t not in natural)
        self.robin = [o for o in self.outlets if o.kind == ROBIN]
        self.neumann = [o for o in self.outlets if o.kind == NEUMANN]
        self._robin_facets = [mesh.facets_of(o.patch) for o in self.robin]
        self._natural_facets = mesh.facets_of(natural) if natural else np.zeros(0, np.int64)
        # rank-one outlet couplings need their cliques in the pattern
        er, ec = [], []
        for o in self.robin:
            vd = (mesh.vertices_of(o.patch)[:, None] * self.B + np.arange(d)).reshape(-1)
            er.append(np.repeat(vd, len(vd)))
            ec.append(np.tile(vd, len(vd)))
        extra = (np.concatenate(er), np.concatenate(ec)) if er else None
        self.pattern = AssemblyPattern(mesh.cells, n, self.B, extra)
        # strong conditions
        wall_vertices = mesh.vertices_of(self.wall_tags) if self.wall_tags else np.zeros(0, np.int64)
        self.wall_vertices = wall_vertices
        cons = [(wall_vertices[:, None] * self.B + np.arange(d)).reshape(-1)]
        self.pinned = not self.outlets
        if self.pinned:
            cons.append(np.array([self.pdofs[0]]))
        self.constrained = np.concatenate(cons)
        mask = np.zeros(self.pattern.n, bool)
        mask[self.constrained] = True
        rows, cols = self.pattern.rows, self.pattern.cols
        self._zero_entries = (mask[rows] | mask[cols]) & (rows != cols)
        self._cons_diag = self.pattern.diag_slot[self.constrained]
        self._cons_mask = mask
        self.linsolver = ReusedFactorization(tol=linear_tol, max_lagged_iterations=max_lagged_iterations)
        self._factor_key = None
        self.refactor_sweeps = refactor_sweeps
        self._last_responses = []
        self._robin_slots = []
        for o in self.robin:
            vd = (mesh.vertices_of(o.patch)[:, None] * self.B + np.arange(d)).reshape(-1)
            self._robin_slots.append((vd, self.pattern.slots(np.repeat(vd, len(vd)), np.tile(vd, len(vd)))))
        for v in self.valves:
            sig = riis_coefficient(v, "closed", mesh.vertices)
            check_resolution(v, mesh, sig)

    # -- public API --------------------------------------------------------

    def phases_at(self, t):
        return {v.name: valve_phase(t, v.schedule) for v in self.valves}

    def prepare(self, state: FluidState, dt: float, d_new=None, phases=None, t_new=None):
        """Assemble and solve the step from ``state`` to ``state.t + dt``.

        Parameters
        ----------
        d_new : (n, d) array, optional
            Domain displacement at the new level (default: unchanged).
        phases : dict valve name -> phase, optional
            Default: the valve schedules evaluated at the new time.

        Returns
        -------
        FluidStep
        """
        if dt <= 0:
            raise ValueError("dt must be positive")
        mesh, props = self.mesh, self.props
        d, n, B = self.dim, mesh.n_vertices, self.B
        t_new = state.t + dt if t_new is None else float(t_new)
        d_old = state.d.nodal
        d_new = d_old if d_new is None else np.asarray(d_new, float).reshape(n, d)
        x = mesh.vertices + d_new
        vol, G = _geometry(x, mesh.cells)
        prev = state.previous
        u_n = state.u.nodal
        if prev is None:
            alpha0, hist = 1.0, u_n
            w = (d_new - d_old) / dt
            u_star = u_n
        else:
            alpha0, hist = 1.5, 2.0 * u_n - 0.5 * prev.u.nodal
            w = (3.0 * d_new - 4.0 * d_old + prev.d.nodal) / (2.0 * dt)
            u_star = 2.0 * u_n - prev.u.nodal
        adv = u_star - w
        phases = self.phases_at(t_new) if phases is None else dict(phases)
        sigma = np.zeros(n)
        for v in self.valves:
            sigma += riis_coefficient(v, phases[v.name], x)

        A_data, rhs = self._assemble(x, vol, G, alpha0, hist, w, adv, sigma, dt, t_new)
        # Neumann data
        for o, in_p in ((o, o.pressure_at(t_new)) for o in self.neumann):
            rhs[self.vdofs] -= in_p * self._flux_vector(x, mesh.facets_of(o.patch))
        # Robin rank-one terms and unit responses
        robin_b = []
        for o, fac, (vd, slots) in zip(self.robin, self._robin_facets, self._robin_slots):
            b = self._flux_vector(x, fac)
            robin_b.append(b)
            bv = b.reshape(n, d)[vd // B, vd % B]
            A_data[slots] += np.outer(bv, bv).ravel() / o.alpha
        # strong conditions
        g = w if self.boundary_velocity is None else np.asarray(self.boundary_velocity(x, t_new), float)
        x_c = np.zeros(self.pattern.n)
        xv = x_c[self.vdofs].reshape(n, d)
        xv[self.wall_vertices] = g.reshape(n, d)[self.wall_vertices]
        x_c[self.vdofs] = xv.reshape(-1)
        A_full = self.pattern.matrix(A_data)
        rhs0 = rhs - A_full @ x_c
        rhs0[self.constrained] = x_c[self.constrained]
        A_data = A_data.copy()
        A_data[self._zero_entries] = 0.0
        A_data[self._cons_diag] = 1.0
        A = self.pattern.matrix(A_data)

        key = tuple(sorted(phases.items()))
        before = self.linsolver.factorizations
        self.linsolver.set_matrix(A, refactor=key != self._factor_key)
        self._factor_key = key
        x0 = np.zeros(self.pattern.n)
        x0[self.vdofs] = u_n.reshape(-1)
        x0[self.pdofs] = state.p.values
        rhs_all = [rhs0]
        for b in robin_b:
            r = np.zeros(self.pattern.n)
            r[self.vdofs] = -b
            r[self._cons_mask] = 0.0
            rhs_all.append(r)
        guesses = self._last_responses
        if len(guesses) != len(robin_b):
            guesses = [np.zeros_like(x0)] * len(robin_b)
        X0 = np.column_stack([x0] + guesses)
        try:
            X = self.linsolver.solve_many(np.column_stack(rhs_all), X0)
        except SolverError as exc:
            raise SolverError(f"fluid step to t={t_new:.6g} failed: {exc}", exc.residual, exc.iterations) from exc
        iters = self.linsolver.last_iterations
        if iters > self.refactor_sweeps:
            self._factor_key = None  # refresh the factorization next step
        base = X[:, 0]
        responses = [X[:, k + 1].copy() for k in range(len(robin_b))]
        self._last_responses = responses
        info = {
            "iterations": iters,
            "refactored": self.linsolver.factorizations > before,
            "phases": phases,
        }
        return FluidStep(self, state, t_new, d_new, w, base, responses, robin_b, info, A, rhs0, rhs_all[1:])

    def step(self, state: FluidState, dt: float, p_c=None, **kwargs) -> FluidState:
        """Advance with fixed Robin pressures (default: the outlets' ``p_c``)."""
        if p_c is None:
            p_c = [o.p_c for o in self.robin]
        return self.prepare(state, dt, **kwargs).solve(p_c)

    # -- internals ----------------------------------------------------------

    def _flux_vector(self, x, facet_idx):
        area, normal = _facet_geometry(x, self.mesh.facets[facet_idx])
        w = area[:, None] * normal / self.dim
        b = np.zeros((self.mesh.n_vertices, self.dim))
        for k in range(self.dim):
            np.add.at(b, self.mesh.facets[facet_idx, k], w)
        return b.reshape(-1)

    def _assemble(self, x, vol, G, alpha0, hist, w, adv, sigma, dt, t):
        mesh, props = self.mesh, self.props
        rho, mu = props.rho, props.mu
        d, B = self.dim, self.B
        nb = d + 1
        cells = mesh.cells
        m = len(cells)
        aK = adv[cells].mean(axis=1)
        speed = np.linalg.norm(aK, axis=1)
        h = 2.0 * (np.sqrt(vol / np.pi) if d == 2 else np.cbrt(3.0 * vol / (4.0 * np.pi)))
        sigK = sigma[cells].mean(axis=1)
        c_t = rho * alpha0 / dt
        tau = 1.0 / np.sqrt((2.0 * c_t) ** 2 + (2.0 * rho * speed / h) ** 2 + (12.0 * mu / h**2) ** 2 + sigK**2)
        tau_c = h**2 / (12.0 * tau)

        a_dot_g = np.einsum("md,mbd->mb", aK, G)  # a . grad phi_b
        M = local_mass(vol, d)
        S = reaction_local(x, cells, vol, sigma)
        GG = np.einsum("mad,mbd->mab", G, G)
        vn = (vol / nb)[:, None, None]
        # residual operator of the trial function phi_b (scalar part)
        res_b = (c_t + sigK)[:, None] * (vol / nb)[:, None] + rho * vol[:, None] * a_dot_g

        VV = (
            c_t * M
            + rho * vn * a_dot_g[:, None, :]
            + mu * vol[:, None, None] * GG
            + S
            + (tau * rho)[:, None, None] * a_dot_g[:, :, None] * res_b[:, None, :]
        )
        local = np.zeros((m, nb, B, nb, B))
        for c in range(d):
            local[:, :, c, :, c] = VV
        # grad-div
        local[:, :, :d, :, :d] += (tau_c * vol)[:, None, None, None, None] * G[:, :, :, None, None] * G[:, None, None, :, :]
        # velocity-pressure: -int p div v + SUPG pressure gradient
        VP = -(vol / nb)[:, None, None, None] * G[:, :, :, None] * np.ones((1, 1, 1, nb))  # (m, a, c, b)
        VP += (tau * rho * vol)[:, None, None, None] * a_dot_g[:, :, None, None] * G.transpose(0, 2, 1)[:, None, :, :]
        local[:, :, :d, :, d] = VP
        # pressure-velocity: int q div u + PSPG
        PV = (vol / nb)[:, None, None, None] * np.ones((1, nb, 1, 1)) * G[:, None, :, :]  # (m, a, b, c)
        PV += tau[:, None, None, None] * G[:, :, None, :] * res_b[:, None, :, None]
        local[:, :, d, :, :d] = PV
        local[:, :, d, :, d] = (tau * vol)[:, None, None] * GG

        A_data = self.pattern.data(local.reshape(m, nb * B, nb * B))

        # right-hand side
        n = mesh.n_vertices
        rhs_v = np.zeros((n, d))
        hc, wc = hist[cells], w[cells]  # (m, nb, d)
        gal = c_t / alpha0 * np.einsum("mab,mbc->mac", M, hc) + np.einsum("mab,mbc->mac", S, wc)
        rK = rho / dt * hc.mean(axis=1) + sigK[:, None] * wc.mean(axis=1)
        if self.body_force is not None:
            bary, wq = simplex_quadrature(d, 2)
            xq = np.einsum("qa,mad->mqd", bary, x[cells])
            f = np.asarray(self.body_force(xq.reshape(-1, d), t), float).reshape(m, len(wq), d)
            gal += np.einsum("m,q,qa,mqc->mac", vol, wq, bary, f)
            rK = rK + np.einsum("q,mqc->mc", wq, f)
        gal += (tau * rho * vol)[:, None, None] * a_dot_g[:, :, None] * rK[:, None, :]
        for a in range(nb):
            np.add.at(rhs_v, cells[:, a], gal[:, a, :])
        rhs_p = np.zeros(n)
        pspg = (tau * vol)[:, None] * np.einsum("mad,md->ma", G, rK)
        for a in range(nb):
            np.add.at(rhs_p, cells[:, a], pspg[:, a])
        rhs = np.zeros(self.pattern.n)
        rhs[self.vdofs] = rhs_v.reshape(-1)
        rhs[self.pdofs] = rhs_p

        # backflow stabilization on natural boundaries
        if self.backflow and self._natural_facets.size:
            fac = mesh.facets[self._natural_facets]
            area, normal = _facet_geometry(x, fac)
            an = np.einsum("fd,fd->f", adv[fac].mean(axis=1), normal)
            wgt = -0.5 * rho * np.minimum(an, 0.0)
            active = wgt > 0
            if active.any():
                loc = local_mass(area[active], d - 1, wgt[active])
                fa = fac[active]
                k = d
                rows = (fa[:, :, None] * B + np.arange(d)).reshape(len(fa), k * d)
                # component-diagonal blocks
                Ml = np.zeros((len(fa), k, d, k, d))
                for c in range(d):
                    Ml[:, :, c, :, c] = loc
                r = np.repeat(rows, k * d, axis=1).ravel()
                cc = np.tile(rows, (1, k * d)).ravel()
                slots = self.pattern.slots(r, cc)
                A_data += np.bincount(slots, weights=Ml.reshape(-1), minlength=self.pattern.nnz)
        return A_data, rhs


@dataclass(eq=False)
class FluidStep:
    """Solved step, affine in the Robin interface pressures."""

    solver: FluidSolver
    state: FluidState
    t: float
    d: np.ndarray
    w: np.ndarray
    base: np.ndarray
    responses: list
    robin_b: list
    info: dict
    matrix: object = None  # constrained step matrix
    rhs: np.ndarray = None  # right-hand side at p_c = 0
    robin_rhs: list = None  # d rhs / d p_c^j

    @property
    def n_robin(self) -> int:
        return len(self.responses)

    def vector(self, p_c) -> np.ndarray:
        p_c = np.asarray(p_c, float).reshape(-1)
        if len(p_c) != self.n_robin:
            raise ValueError(f"expected {self.n_robin} interface pressures, got {len(p_c)}")
        out = self.base.copy()
        for pj, r in zip(p_c, self.responses):
            out += pj * r
        return out

    def fluxes(self, p_c) -> np.ndarray:
        """Outward Robin-outlet fluxes ``Q_j`` (m^3/s) for interface pressures ``p_c``."""
        z = self.vector(p_c)
        u = z[self.solver.vdofs]
        return np.array([b @ u for b in self.robin_b])

    def solve(self, p_c=()) -> FluidState:
        s = self.solver
        z = self.vector(p_c)
        mesh = s.mesh
        vs, ss = FeSpace(mesh, s.dim), FeSpace(mesh, 1)
        return FluidState(
            Field(vs, z[s.vdofs], "m/s"),
            Field(ss, z[s.pdofs], "Pa"),
            Field(vs, self.d.reshape(-1), "m"),
            Field(vs, self.w.reshape(-1), "m/s"),
            self.t,
            self.state.stripped(),
        )


def ns_step(state: FluidState, props: FluidProperties, bcs, valves, dt, d_new=None, **kwargs) -> FluidState:
    """One stabilized ALE Navier-Stokes step (convenience wrapper).

    Builds a :class:`FluidSolver` for ``state.mesh``; for time loops keep a
    solver and call :meth:`FluidSolver.step` to reuse its pattern and
    factorization.
    """
    solver = FluidSolver(state.mesh, props, bcs, valves, **kwargs)
    return solver.step(state, dt, d_new=d_new)
