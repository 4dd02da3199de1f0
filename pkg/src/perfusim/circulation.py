"""Closed-loop lumped circulation with time-varying elastances.

Four compartments: left ventricle and left atrium (elastance chambers), a
systemic arterial compliance and a venous pool. Flows through the mitral and
aortic valves are diodes (resistance ``R_min`` open, ``R_max`` closed);
the systemic and venous resistances are linear. Volumes advance by implicit
Euler with an active-set iteration on the valve states.

The driver is integrated offline to a limit cycle; the resulting
:class:`CirculationTrace` supplies ``p_LV(t)``, the aortic pressure, valve
schedules and the ventricular volume used by the wall-motion law. Trace time
is shifted so that mitral closure (end of filling) is ``t = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.interpolate import PchipInterpolator

from .riis import Schedule
from .units import ML, MMHG

_E = MMHG / ML  # mmHg/ml -> Pa/m^3
_R = MMHG / ML  # mmHg s/ml -> Pa s/m^3
_C = ML / MMHG  # ml/mmHg -> m^3/Pa

LV, AR, VEN, LA = range(4)


class CirculationError(RuntimeError):
    pass


def activation(t, onset, t_contract, t_relax, period):
    """Cosine activation in [0, 1]: rise over ``t_contract``, decay over ``t_relax``."""
    tau = np.mod(np.asarray(t, float) - onset, period)
    rise = 0.5 * (1.0 - np.cos(np.pi * tau / t_contract))
    fall = 0.5 * (1.0 + np.cos(np.pi * (tau - t_contract) / t_relax))
    return np.where(tau < t_contract, rise, np.where(tau < t_contract + t_relax, fall, 0.0))


@dataclass(frozen=True)
class CirculationParams:
    """Parameters in SI units (Pa, m^3, s)."""

    period: float = 0.8
    E_max_lv: float = 2.0 * _E
    E_min_lv: float = 0.08 * _E
    V0_lv: float = 10.0 * ML
    t_contract_lv: float = 0.30
    t_relax_lv: float = 0.15
    E_max_la: float = 0.25 * _E
    E_min_la: float = 0.15 * _E
    V0_la: float = 4.0 * ML
    onset_la: float = 0.68
    t_contract_la: float = 0.08
    t_relax_la: float = 0.08
    R_ar: float = 1.0 * _R
    C_ar: float = 1.3 * _C
    V0_ar: float = 600.0 * ML
    R_ven: float = 0.03 * _R
    C_ven: float = 60.0 * _C
    V0_ven: float = 2800.0 * ML
    R_min: float = 0.006 * _R
    R_max: float = 1.0e4 * _R
    total_volume: float = 4500.0 * ML

    def __post_init__(self):
        for name in ("period", "E_max_lv", "E_min_lv", "C_ar", "C_ven", "R_ar", "R_ven", "R_min", "R_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"circulation parameter {name} must be positive")
        if self.t_contract_lv + self.t_relax_lv >= self.period:
            raise ValueError("ventricular activation longer than the period")

    def elastances(self, t):
        e_lv = activation(t, 0.0, self.t_contract_lv, self.t_relax_lv, self.period)
        e_la = activation(t, self.onset_la, self.t_contract_la, self.t_relax_la, self.period)
        E_lv = self.E_min_lv + (self.E_max_lv - self.E_min_lv) * e_lv
        E_la = self.E_min_la + (self.E_max_la - self.E_min_la) * e_la
        return float(E_lv), float(E_la)

    def initial_volumes(self):
        """Volumes at rest distributed by pressure-free compliances."""
        V = np.array([120.0 * ML, 0.0, 0.0, 50.0 * ML])
        V[AR] = self.V0_ar + 80.0 * MMHG * self.C_ar
        V[VEN] = self.total_volume - V[LV] - V[AR] - V[LA]
        return V


@dataclass(frozen=True)
class CirculationDriver:
    """Driver state: compartment volumes (m^3) at time ``t``."""

    params: CirculationParams
    volumes: np.ndarray
    t: float = 0.0
    mitral_open: bool = True
    aortic_open: bool = False

    @classmethod
    def initial(cls, params: CirculationParams = CirculationParams(), t=0.0):
        return cls(params, params.initial_volumes(), t)

    def pressures(self, volumes=None, t=None):
        p = self.params
        V = self.volumes if volumes is None else volumes
        E_lv, E_la = p.elastances(self.t if t is None else t)
        return np.array(
            [
                E_lv * (V[LV] - p.V0_lv),
                (V[AR] - p.V0_ar) / p.C_ar,
                (V[VEN] - p.V0_ven) / p.C_ven,
                E_la * (V[LA] - p.V0_la),
            ]
        )

    @property
    def p_lv(self) -> float:
        return float(self.pressures()[LV])

    @property
    def p_aorta(self) -> float:
        return float(self.pressures()[AR])


def _implicit_step(p: CirculationParams, V, t_new, dt, mv_open, av_open):
    E_lv, E_la = p.elastances(t_new)
    R_mv = p.R_min if mv_open else p.R_max
    R_av = p.R_min if av_open else p.R_max
    # pressures are affine in V: P = D V + c
    D = np.diag([E_lv, 1.0 / p.C_ar, 1.0 / p.C_ven, E_la])
    c = np.array([-E_lv * p.V0_lv, -p.V0_ar / p.C_ar, -p.V0_ven / p.C_ven, -E_la * p.V0_la])
    # flows F = G P with rows mv, av, sys, ven (each downstream minus upstream sign)
    G = np.zeros((4, 4))
    G[0, LA], G[0, LV] = 1 / R_mv, -1 / R_mv  # mitral LA -> LV
    G[1, LV], G[1, AR] = 1 / R_av, -1 / R_av  # aortic LV -> AR
    G[2, AR], G[2, VEN] = 1 / p.R_ar, -1 / p.R_ar  # systemic
    G[3, VEN], G[3, LA] = 1 / p.R_ven, -1 / p.R_ven  # venous return
    # dV/dt = T F
    T = np.array([[1, -1, 0, 0], [0, 1, -1, 0], [0, 0, 1, -1], [-1, 0, 0, 1]], float)
    L = T @ G
    A = np.eye(4) - dt * L @ D
    b = V + dt * L @ c
    V_new = np.linalg.solve(A, b)
    P = D @ V_new + c
    return V_new, P


def circulation_step(driver: CirculationDriver, dt: float):
    """Advance the driver by one implicit-Euler step.

    Returns
    -------
    driver : CirculationDriver
        Updated state.
    outputs : dict
        ``p_lv``, ``p_aorta``, ``p_la`` (Pa), ``q_mitral``, ``q_aortic``
        (m^3/s) and ``events``: list of valve-state changes at the new time.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    p = driver.params
    t_new = driver.t + dt
    mv, av = driver.mitral_open, driver.aortic_open
    for _ in range(8):
        V, P = _implicit_step(p, driver.volumes, t_new, dt, mv, av)
        mv_new = bool(P[LA] > P[LV])
        av_new = bool(P[LV] > P[AR])
        if (mv_new, av_new) == (mv, av):
            break
        mv, av = mv_new, av_new
    if np.any(V < 0.0):
        k = int(np.flatnonzero(V < 0.0)[0])
        raise CirculationError(f"negative volume in compartment {['LV', 'AR', 'VEN', 'LA'][k]} at t={t_new:.4f}")
    events = []
    if mv != driver.mitral_open:
        events.append("mv_open" if mv else "mv_close")
    if av != driver.aortic_open:
        events.append("av_open" if av else "av_close")
    R_mv = p.R_min if mv else p.R_max
    R_av = p.R_min if av else p.R_max
    out = {
        "p_lv": float(P[LV]),
        "p_aorta": float(P[AR]),
        "p_la": float(P[LA]),
        "q_mitral": float((P[LA] - P[LV]) / R_mv),
        "q_aortic": float((P[LV] - P[AR]) / R_av),
        "events": events,
    }
    return replace(driver, volumes=V, t=t_new, mitral_open=mv, aortic_open=av), out


@dataclass(frozen=True, eq=False)
class CirculationTrace:
    """One limit-cycle period sampled at the driver step, shifted so that
    mitral closure is at ``t = 0``."""

    times: np.ndarray
    p_lv_samples: np.ndarray
    p_aorta_samples: np.ndarray
    volume_samples: np.ndarray
    period: float
    events: dict = field(default_factory=dict)

    def _interp(self, samples, t):
        tt = np.append(self.times, self.period)
        vv = np.append(samples, samples[0])
        return np.interp(np.mod(t, self.period), tt, vv)

    def p_lv(self, t):
        return self._interp(self.p_lv_samples, t)

    def p_aorta(self, t):
        return self._interp(self.p_aorta_samples, t)

    @cached_property
    def _volume_curve(self):
        # C1 and monotone between samples: the wall velocity is a time
        # derivative of the volume and must not see sampling kinks
        tt = np.append(self.times, self.period)
        return PchipInterpolator(tt, np.append(self.volume_samples, self.volume_samples[0]))

    def volume(self, t):
        return self._volume_curve(np.mod(t, self.period))

    @property
    def end_diastolic_volume(self) -> float:
        return float(self.volume_samples.max())

    @property
    def end_systolic_volume(self) -> float:
        return float(self.volume_samples.min())

    def squeeze_fraction(self, t):
        """``(V(0) - V(t)) / (V(0) - V_es)``; zero at mitral closure (``t = 0``)."""
        v0, ves = self.volume_samples[0], self.end_systolic_volume
        return (v0 - self.volume(t)) / (v0 - ves)

    def mitral_schedule(self) -> Schedule:
        return Schedule.from_switches(self.period, self.events["mv_open"], self.events["mv_close"])

    def aortic_schedule(self) -> Schedule:
        return Schedule.from_switches(self.period, self.events["av_open"], self.events["av_close"])

    def is_ejection(self, t):
        tau = np.mod(t, self.period)
        return (tau >= self.events["av_open"]) & (tau < self.events["av_close"])

    def is_diastole(self, t):
        """Between aortic closure and mitral closure (relaxation and filling)."""
        return np.mod(t, self.period) >= self.events["av_close"]


def integrate_limit_cycle(params: CirculationParams = CirculationParams(), dt=1e-3, max_cycles=60, tol=1e-9):
    """Run the driver to a periodic state and return the shifted trace.

    ``tol`` bounds the change of compartment volumes (m^3) between
    consecutive cycles.
    """
    n = int(round(params.period / dt))
    if abs(n * dt - params.period) > 1e-9 * params.period:
        raise ValueError("the driver step must divide the period")
    drv = CirculationDriver.initial(params)
    for cycle in range(max_cycles):
        start = drv.volumes.copy()
        rec = {"p_lv": [], "p_aorta": [], "V": [], "mv": [], "av": []}
        for _ in range(n):
            drv, out = circulation_step(drv, dt)
            rec["p_lv"].append(out["p_lv"])
            rec["p_aorta"].append(out["p_aorta"])
            rec["V"].append(drv.volumes[LV])
            rec["mv"].append(drv.mitral_open)
            rec["av"].append(drv.aortic_open)
        if np.max(np.abs(drv.volumes - start)) < tol:
            break
    else:
        raise CirculationError(f"no limit cycle after {max_cycles} cycles")
    mv = np.array(rec["mv"])
    av = np.array(rec["av"])
    # sample k is at time (k + 1) dt within the cycle
    def switches(state, opening):
        prev = np.roll(state, 1)
        idx = np.flatnonzero(state & ~prev) if opening else np.flatnonzero(~state & prev)
        if len(idx) != 1:
            raise CirculationError(f"expected one valve {'opening' if opening else 'closure'} per cycle, found {len(idx)}")
        return int(idx[0])

    k0 = switches(mv, opening=False)
    shift = lambda k: ((k - k0) % n) * dt  # noqa: E731
    events = {
        "mv_close": 0.0,
        "av_open": shift(switches(av, True)),
        "av_close": shift(switches(av, False)),
        "mv_open": shift(switches(mv, True)),
    }
    if not (0.0 < events["av_open"] < events["av_close"] < events["mv_open"] < params.period):
        raise CirculationError(f"phase events out of order: {events}")
    order = (np.arange(n) + k0) % n
    times = np.arange(n) * dt
    return CirculationTrace(
        times,
        np.array(rec["p_lv"])[order],
        np.array(rec["p_aorta"])[order],
        np.array(rec["V"])[order],
        params.period,
        events,
    )


def calibrate_peak_pressure(params: CirculationParams, target=125.4 * MMHG, dt=1e-3, rtol=1e-3, max_iter=30):
    """Scale ``E_max_lv`` by bisection until the peak ``p_LV`` matches ``target``."""
    lo, hi = 0.3 * params.E_max_lv, 3.0 * params.E_max_lv
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        trial = replace(params, E_max_lv=mid)
        peak = float(integrate_limit_cycle(trial, dt).p_lv_samples.max())
        if abs(peak - target) <= rtol * target:
            return trial
        if peak < target:
            lo = mid
        else:
            hi = mid
    return trial
