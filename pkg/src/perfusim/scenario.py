"""Scenario configuration, the coupled time loop and run reports.

A scenario is a TOML file. Shared physical constants can live in separate
files pulled in with a top-level ``include`` list (paths relative to the
including file); keys of the including file win. Quantities may be plain SI
numbers or strings with a unit, such as ``"10 mmHg"`` or ``"0.5 ms"``.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .ale import HarmonicLifter
from .circulation import CirculationParams, CirculationTrace, integrate_limit_cycle
from .coupling import CoupledModel, SplittingError, WallMotion
from .darcy import CompartmentParams, DarcySolver, compute_mbf
from .geometry import DeskGeometry
from .io import SeriesWriter, export_snapshot, read_series
from .linalg import SolverError
from .mesh import MeshError, MeshInversionError, build_region_partition, load_mesh
from .navier_stokes import FluidProperties, FluidSolver, FluidState, OutletBc, PressureSeries
from .riis import Schedule, ScheduleError, ValveModel
from .surfaces import PlaneSurface, SphereSurface, cylinder_shell, disk_surface, load_surface
from .units import ML, to_si

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid scenario configuration."""


class SimulationError(RuntimeError):
    """A sub-solver failed during the time loop."""

    def __init__(self, message, step, history=()):
        super().__init__(message)
        self.step = step
        self.history = list(history)


class ConservationError(SimulationError):
    """A converged step violated the interface mass balance."""


# -- loading -------------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _load_toml(path: Path, seen=()) -> dict:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    includes = data.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        merged = _merge(merged, _load_toml(path.parent / inc, seen + (path,)))
    return _merge(merged, data)


def _si(value, what):
    try:
        return to_si(value)
    except ValueError as exc:
        raise ConfigError(f"{what}: {exc}") from exc


def _positive(value, what):
    v = _si(value, what)
    if not (isinstance(v, float) and v > 0 and math.isfinite(v)):
        raise ConfigError(f"{what} must be a positive number, got {value!r}")
    return v


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """Validated scenario.

    ``data`` keeps the merged TOML tables (with includes resolved) so that a
    modified configuration can be written back; all other attributes are SI.
    """

    data: dict
    base_dir: Path
    dt: float
    heartbeats: int
    driver_dt: float
    fluid: FluidProperties
    circulation: CirculationParams
    lv_pressure: float | None
    darcy: CompartmentParams
    alpha: tuple
    pulmonary_vein_pressure: float
    aortic_pressure: dict
    wall: dict
    coupling: dict
    output: dict
    source: Path | None = None

    # -- construction --------------------------------------------------------

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        return cls.from_dict(_load_toml(path), path.resolve().parent, path)

    @classmethod
    def from_dict(cls, data: dict, base_dir=".", source=None) -> "ScenarioConfig":
        data = copy.deepcopy(data)
        data.pop("include", None)
        base_dir = Path(base_dir)
        run = data.get("run", {})
        dt = _positive(run.get("dt", 5e-4), "run.dt")
        beats = run.get("heartbeats", 2)
        if not isinstance(beats, int) or beats < 1:
            raise ConfigError("run.heartbeats must be a positive integer")
        driver_dt = _positive(run.get("driver_dt", 1e-3), "run.driver_dt")

        fl = data.get("fluid", {})
        try:
            fluid = FluidProperties(_si(fl.get("rho", 1.06e3), "fluid.rho"), _si(fl.get("mu", 3.5e-3), "fluid.mu"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

        circ = dict(data.get("circulation", {}))
        lv_pressure = circ.pop("lv_pressure", "driver")
        lv_pressure = None if lv_pressure == "driver" else _si(lv_pressure, "circulation.lv_pressure")
        names = {f.name for f in fields(CirculationParams)}
        unknown = set(circ) - names
        if unknown:
            raise ConfigError(f"unknown circulation parameters: {sorted(unknown)}")
        try:
            circulation = CirculationParams(**{k: _si(v, f"circulation.{k}") for k, v in circ.items()})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        period = circulation.period
        n_driver = period / driver_dt
        if abs(n_driver - round(n_driver)) > 1e-9 * n_driver:
            raise ConfigError("run.driver_dt must divide the heartbeat period")
        n_steps = period / dt
        if abs(n_steps - round(n_steps)) > 1e-9 * n_steps:
            raise ConfigError("run.dt must divide the heartbeat period")

        dc = data.get("darcy", {})
        try:
            K = [_positive(k, "darcy.K") for k in dc.get("K", [1e-7, 1e-8, 1e-8])]
            if len(K) != 3:
                raise ConfigError("darcy.K needs three permeabilities")
            darcy = CompartmentParams.chain(
                *K,
                beta12=_si(dc.get("beta12", 2.4e-5), "darcy.beta12"),
                beta23=_si(dc.get("beta23", 2.4e-5), "darcy.beta23"),
                gamma=_si(dc.get("gamma", 2.4e-5), "darcy.gamma"),
                beta13=_si(dc.get("beta13", 0.0), "darcy.beta13"),
                a1=_si(dc.get("a1", 0.4), "darcy.a1"),
                a2=_si(dc.get("a2", 1500.0), "darcy.a2"),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

        cor = data.get("coronary", {})
        alpha = cor.get("alpha", 1.15e-10)
        alpha = tuple(_positive(a, "coronary.alpha") for a in (alpha if isinstance(alpha, list) else [alpha]))

        pv = _si(data.get("pulmonary_veins", {}).get("pressure", "10 mmHg"), "pulmonary_veins.pressure")
        ap = dict(data.get("aortic_pressure", {}))
        ap.setdefault("source", "driver")
        if ap["source"] not in ("driver", "constant", "file"):
            raise ConfigError("aortic_pressure.source must be 'driver', 'constant' or 'file'")
        ap["systolic_scale"] = _positive(ap.get("systolic_scale", 1.0), "aortic_pressure.systolic_scale")
        ap["diastolic_scale"] = _positive(ap.get("diastolic_scale", 1.0), "aortic_pressure.diastolic_scale")
        if ap["source"] == "constant":
            ap["value"] = _si(ap.get("value", 0.0), "aortic_pressure.value")
        if ap["source"] == "file":
            if "path" not in ap:
                raise ConfigError("aortic_pressure.path is required for source = 'file'")
            ap["path"] = str(base_dir / ap["path"])

        wl = data.get("wall", {})
        wall = {
            "squeeze": _si(wl.get("squeeze", 0.1), "wall.squeeze"),
            "taper": _positive(wl.get("taper", 1.2e-2), "wall.taper"),
            "z_top": _si(wl.get("z_top", 0.0), "wall.z_top"),
            "axis": tuple(_si(wl.get("axis", [0.0, 0.0]), "wall.axis")),
        }
        if not 0.0 <= wall["squeeze"] < 1.0:
            raise ConfigError("wall.squeeze must lie in [0, 1)")

        cp = data.get("coupling", {})
        coupling = {
            "omega": _si(cp.get("omega", 0.7), "coupling.omega"),
            "tol": _positive(cp.get("tol", 1e-6), "coupling.tol"),
            "max_iter": int(cp.get("max_iter", 50)),
            "balance_tol": _positive(cp.get("balance_tol", 1e-6), "coupling.balance_tol"),
        }
        if not 0.0 < coupling["omega"] <= 1.0:
            raise ConfigError("coupling.omega must lie in (0, 1]")

        out = data.get("output", {})
        output = {
            "directory": str(out.get("directory", "output")),
            "snapshot_every": int(out.get("snapshot_every", 10)),
            "snapshots": bool(out.get("snapshots", True)),
        }
        if output["snapshot_every"] < 1:
            raise ConfigError("output.snapshot_every must be at least 1")

        cfg = cls(
            data, base_dir, dt, beats, driver_dt, fluid, circulation, lv_pressure, darcy, alpha, pv, ap,
            wall, coupling, output, None if source is None else Path(source),
        )
        cfg._check_structure()
        return cfg

    def _check_structure(self):
        geo = self.geometry
        kind = geo.get("kind", "desk")
        if kind not in ("desk", "files"):
            raise ConfigError("geometry.kind must be 'desk' or 'files'")
        if kind == "files":
            for key in ("fluid_mesh", "perfusion_mesh"):
                if key not in geo:
                    raise ConfigError(f"geometry.{key} is required for kind = 'files'")
                p = self.base_dir / geo[key]
                if not p.is_file():
                    raise ConfigError(f"geometry.{key}: file {p} does not exist")
        if self.aortic_pressure["source"] == "file" and not Path(self.aortic_pressure["path"]).is_file():
            raise ConfigError(f"aortic_pressure.path: file {self.aortic_pressure['path']} does not exist")
        J = len(self.outlet_tags)
        if len(self.alpha) not in (1, J):
            raise ConfigError(f"coronary.alpha has {len(self.alpha)} entries for {J} coronary outlets")
        if len(self.region_seeds) != J:
            raise ConfigError(f"{len(self.region_seeds)} region seeds for {J} coronary outlets")
        valves = self.data.get("valves", {})
        for name, spec in valves.items():
            if not isinstance(spec, dict):
                raise ConfigError(f"valves.{name} must be a table")
            _positive(spec.get("epsilon", 4e-3), f"valves.{name}.epsilon")
            if _si(spec.get("R", 1e5), f"valves.{name}.R") < 0:
                raise ConfigError(f"valves.{name}.R must be non-negative")
            for part in ("closed", "open"):
                s = spec.get(part, {"kind": "none"})
                if s.get("kind", "none") == "file" and not (self.base_dir / s.get("path", "")).is_file():
                    raise ConfigError(f"valves.{name}.{part}: surface file {s.get('path')} does not exist")
            sched = spec.get("schedule", name)
            if isinstance(sched, str) and sched not in ("mitral", "aortic"):
                raise ConfigError(f"valves.{name}.schedule must be 'mitral', 'aortic' or a table of intervals")

    # -- derived views ---------------------------------------------------------

    @property
    def geometry(self) -> dict:
        return self.data.get("geometry", {"kind": "desk"})

    def desk(self) -> DeskGeometry:
        geo = dict(self.geometry)
        names = {f.name for f in fields(DeskGeometry)}
        kw = {k: _si(v, f"geometry.{k}") for k, v in geo.items() if k in names}
        return DeskGeometry(**kw)

    @property
    def outlet_tags(self) -> tuple:
        if self.geometry.get("kind", "desk") == "desk":
            return DeskGeometry.CORONARY_OUTLETS
        return tuple(int(t) for t in self.geometry.get("coronary_outlet_tags", []))

    @property
    def region_seeds(self) -> np.ndarray:
        if self.geometry.get("kind", "desk") == "desk" and "region_seeds" not in self.geometry:
            return self.desk().region_seeds()
        return np.asarray(_si(self.geometry.get("region_seeds", []), "geometry.region_seeds"), float).reshape(-1, 3)

    def tags(self) -> dict:
        geo = self.geometry
        if geo.get("kind", "desk") == "desk":
            D = DeskGeometry
            return {
                "wall": (D.WALL,),
                "pulmonary_veins": D.PULMONARY_VEINS,
                "aorta": D.AORTA,
                "coronary_walls": (D.CORONARY_WALL,),
                "coronary_outlets": D.CORONARY_OUTLETS,
            }
        return {
            "wall": tuple(int(t) for t in geo.get("wall_tags", [1])),
            "pulmonary_veins": int(geo.get("pulmonary_vein_tag", 2)),
            "aorta": int(geo.get("aorta_tag", 3)),
            "coronary_walls": tuple(int(t) for t in geo.get("coronary_wall_tags", [])),
            "coronary_outlets": self.outlet_tags,
        }

    def with_data(self, data: dict) -> "ScenarioConfig":
        return ScenarioConfig.from_dict(data, self.base_dir, self.source)


def load_config(path) -> ScenarioConfig:
    return ScenarioConfig.load(path)


def write_config(config: ScenarioConfig, path) -> Path:
    """Write the merged tables of ``config`` as a standalone TOML file."""
    import tomli_w

    path = Path(path)
    data = copy.deepcopy(config.data)
    # file references are rewritten relative to the new location
    base = config.base_dir.resolve()
    target = path.resolve().parent

    def rebase(p):
        return str(Path(os.path.relpath(base / p, target)))

    geo = data.get("geometry", {})
    for key in ("fluid_mesh", "perfusion_mesh"):
        if key in geo:
            geo[key] = rebase(geo[key])
    ap = data.get("aortic_pressure", {})
    if "path" in ap:
        ap["path"] = rebase(ap["path"])
    for spec in data.get("valves", {}).values():
        for part in ("closed", "open"):
            if isinstance(spec.get(part), dict) and "path" in spec[part]:
                spec[part]["path"] = rebase(spec[part]["path"])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        tomli_w.dump(data, fh)
    return path


# -- AR protocol ------------------------------------------------------------------


def apply_ar_modifications(config: ScenarioConfig, orifice_fraction, systolic_scale=1.2, diastolic_scale=0.8,
                           valve="aortic") -> ScenarioConfig:
    """Regurgitant variant of a scenario.

    The closed surface of ``valve`` (a disk) gets a central orifice of
    ``orifice_fraction`` of its area, and the aortic pressure is multiplied
    by ``systolic_scale`` during ejection and ``diastolic_scale`` otherwise.
    """
    f = float(orifice_fraction)
    if f >= 1.0:
        raise ConfigError("orifice larger than the leaflet surface")
    if not f > 0.0:
        raise ConfigError(f"orifice fraction must be positive, got {orifice_fraction}")
    data = copy.deepcopy(config.data)
    spec = data.get("valves", {}).get(valve)
    if spec is None:
        raise ConfigError(f"scenario has no valve named {valve!r}")
    closed = dict(spec.get("closed", {}))
    if closed.get("kind") != "disk":
        raise ConfigError("the regurgitant orifice needs a disk-shaped closed valve surface")
    # replaces any previous orifice
    closed["orifice_fraction"] = f
    spec["closed"] = closed
    ap = data.setdefault("aortic_pressure", {})
    ap["systolic_scale"] = float(_si(ap.get("systolic_scale", 1.0), "systolic_scale")) * float(systolic_scale)
    ap["diastolic_scale"] = float(_si(ap.get("diastolic_scale", 1.0), "diastolic_scale")) * float(diastolic_scale)
    return config.with_data(data)


# -- model construction --------------------------------------------------------------


def build_surface(spec: dict | None, base_dir: Path, what: str):
    """Immersed surface from a valve-surface table (``kind`` = none/disk/plane/sphere/cylinder/file)."""
    spec = spec or {"kind": "none"}
    kind = spec.get("kind", "none")
    vec = lambda key: np.asarray(_si(spec[key], f"{what}.{key}"), float)  # noqa: E731
    try:
        if kind == "none":
            return None
        if kind == "disk":
            return disk_surface(
                vec("center"), vec("normal"), _positive(spec["radius"], f"{what}.radius"),
                n_sectors=int(spec.get("n_sectors", 32)), n_rings=int(spec.get("n_rings", 4)),
                orifice_fraction=float(spec.get("orifice_fraction", 0.0)),
            )
        if kind == "plane":
            return PlaneSurface(tuple(vec("point")), tuple(vec("normal")))
        if kind == "sphere":
            return SphereSurface(tuple(vec("center")), _positive(spec["radius"], f"{what}.radius"))
        if kind == "cylinder":
            return cylinder_shell(
                vec("base_center"), vec("axis"), _positive(spec["radius"], f"{what}.radius"),
                _positive(spec["height"], f"{what}.height"), int(spec.get("n_sectors", 32)), int(spec.get("n_layers", 4)),
            )
        if kind == "file":
            return load_surface(base_dir / spec["path"])
    except KeyError as exc:
        raise ConfigError(f"{what}: missing key {exc}") from exc
    raise ConfigError(f"{what}: unknown surface kind {kind!r}")


def _schedule(spec, name, trace: CirculationTrace) -> Schedule:
    sched = spec.get("schedule", name)
    if sched == "mitral":
        return trace.mitral_schedule()
    if sched == "aortic":
        return trace.aortic_schedule()
    try:
        return Schedule(_si(sched.get("period", trace.period), "schedule.period"), tuple(tuple(iv) for iv in sched["intervals"]))
    except (KeyError, TypeError, ScheduleError) as exc:
        raise ConfigError(f"valves.{name}.schedule: {exc}") from exc


@dataclass(frozen=True, eq=False)
class ScaledPressure:
    """Pressure transient multiplied by one factor during ejection and another otherwise."""

    base: object
    trace: CirculationTrace
    systolic_scale: float = 1.0
    diastolic_scale: float = 1.0

    def __call__(self, t):
        scale = self.systolic_scale if bool(self.trace.is_ejection(t)) else self.diastolic_scale
        return float(self.base(t)) * scale


def aortic_pressure_law(config: ScenarioConfig, trace: CirculationTrace):
    ap = config.aortic_pressure
    if ap["source"] == "driver":
        base = PressureSeries(trace.times, trace.p_aorta_samples, trace.period)
    elif ap["source"] == "constant":
        base = PressureSeries.constant(ap["value"])
    else:
        series = read_series(ap["path"])
        try:
            base = PressureSeries(series["time"], series["pressure"], trace.period)
        except KeyError as exc:
            raise ConfigError(f"aortic pressure file needs 'time' and 'pressure' columns (missing {exc})") from exc
    return ScaledPressure(base, trace, ap["systolic_scale"], ap["diastolic_scale"])


@dataclass(eq=False)
class ScenarioModel:
    """Everything a run needs, built from a configuration."""

    config: ScenarioConfig
    trace: CirculationTrace
    fluid_mesh: object
    perfusion_mesh: object
    partition: object
    valves: list
    outlets: list
    coupled: CoupledModel


class _ConstantTrace:
    """Trace wrapper replacing ``p_LV`` by a constant (schedules unchanged)."""

    def __init__(self, trace, value):
        self._trace, self._value = trace, value

    def __getattr__(self, name):
        return getattr(self._trace, name)

    def p_lv(self, t):
        return self._value


def build_model(config: ScenarioConfig, trace: CirculationTrace | None = None) -> ScenarioModel:
    """Meshes, partition, valves, boundary conditions and solvers of a scenario."""
    if trace is None:
        trace = integrate_limit_cycle(config.circulation, dt=config.driver_dt)
    tags = config.tags()
    geo = config.geometry
    try:
        if geo.get("kind", "desk") == "desk":
            desk = config.desk()
            fluid_mesh, perfusion_mesh = desk.fluid_mesh(), desk.perfusion_mesh()
        else:
            fluid_mesh = load_mesh(config.base_dir / geo["fluid_mesh"])
            perfusion_mesh = load_mesh(config.base_dir / geo["perfusion_mesh"])
        for tag in (tags["pulmonary_veins"], tags["aorta"], *tags["coronary_outlets"], *tags["wall"]):
            fluid_mesh.facets_of(tag)
        partition = build_region_partition(perfusion_mesh, config.region_seeds)
    except (MeshError, KeyError, ValueError) as exc:
        raise ConfigError(f"geometry: {exc}") from exc

    valves = []
    for name, spec in config.data.get("valves", {}).items():
        valves.append(
            ValveModel(
                name,
                build_surface(spec.get("closed"), config.base_dir, f"valves.{name}.closed"),
                build_surface(spec.get("open"), config.base_dir, f"valves.{name}.open"),
                _si(spec.get("R", 1e5), f"valves.{name}.R"),
                _si(spec.get("epsilon", 4e-3), f"valves.{name}.epsilon"),
                _schedule(spec, name, trace),
            )
        )
    J = len(tags["coronary_outlets"])
    alpha = config.alpha * J if len(config.alpha) == 1 else config.alpha
    outlets = [
        OutletBc.neumann(tags["pulmonary_veins"], PressureSeries.constant(config.pulmonary_vein_pressure)),
        OutletBc.neumann(tags["aorta"], aortic_pressure_law(config, trace)),
    ] + [OutletBc.robin(tag, a) for tag, a in zip(tags["coronary_outlets"], alpha)]
    fluid = FluidSolver(fluid_mesh, config.fluid, outlets, valves)
    darcy = DarcySolver(perfusion_mesh, config.darcy)
    w = config.wall
    bed_trace = trace if config.lv_pressure is None else _ConstantTrace(trace, config.lv_pressure)
    if w["squeeze"] > 0:
        motion = WallMotion.from_trace(trace, w["squeeze"], axis=w["axis"], z_top=w["z_top"], taper=w["taper"],
                                       wall_tag=tags["wall"], zero_tags=tags["coronary_walls"])
    else:
        motion = WallMotion.still(trace.period, wall_tag=tags["wall"], zero_tags=tags["coronary_walls"])
    non_wall = tuple(t for t in fluid_mesh.tags if t not in tags["wall"])
    lifter = HarmonicLifter(fluid_mesh, wall_tags=tags["wall"], zero_tags=non_wall)
    c = config.coupling
    coupled = CoupledModel(fluid, darcy, partition, bed_trace, motion, lifter, c["tol"], c["max_iter"], c["omega"])
    return ScenarioModel(config, trace, fluid_mesh, perfusion_mesh, partition, valves, outlets, coupled)


def validate(config: ScenarioConfig) -> ScenarioModel:
    """Full validation: builds the model (meshes, tags, partition, valves)."""
    try:
        return build_model(config)
    except (ScheduleError, MeshError) as exc:
        raise ConfigError(str(exc)) from exc


# -- running -----------------------------------------------------------------------


def series_columns(J: int) -> list:
    return (
        ["step", "t", "beat", "diastole", "p_lv", "p_aorta", "p_pulmonary_veins", "p_bed"]
        + [f"p_c_{j}" for j in range(J)]
        + [f"Q_{j}" for j in range(J)]
        + ["Q_total", "mbf_mean", "iterations", "residual", "inflow", "outflow", "closure_error", "balance_error"]
    )


def summarize(series: dict, period: float, events: dict, heartbeats: int) -> dict:
    """Summary statistics of the last (reported) heartbeat.

    Beat ``k`` holds the steps with ``t`` in ``(k T, (k + 1) T]``; systole is
    ``[0, av_close)`` and diastole ``[av_close, T)`` in the wrapped time.
    """
    beat = np.asarray(series["beat"])
    if len(beat) == 0:
        raise ValueError("empty series")
    rep = min(heartbeats - 1, int(beat.max()))
    sel = beat == rep
    t = np.asarray(series["t"])[sel]
    q = np.asarray(series["Q_total"])[sel]
    mbf = np.asarray(series["mbf_mean"])[sel]
    dia = np.asarray(series["diastole"])[sel] > 0
    tau = np.mod(t, period)
    ejection = (tau >= events["av_open"]) & (tau < events["av_close"])
    def peak(mask):
        if not mask.any():
            return float("nan"), float("nan"), None
        k = int(np.argmax(np.where(mask, q, -np.inf)))
        return float(q[k]), float(t[k]), k

    def mean(mask):
        return float(q[mask].mean()) if mask.any() else float("nan")

    q_sys, t_sys, _ = peak(~dia)
    q_dia, t_dia, k_dia = peak(dia)
    out = {
        "reported_beat": rep,
        "systolic_peak_flux": q_sys,
        "t_systolic_peak": t_sys,
        "diastolic_peak_flux": q_dia,
        "t_diastolic_peak": t_dia,
        "systolic_mean_flux": mean(~dia),
        "ejection_mean_flux": mean(ejection),
        "diastolic_mean_flux": mean(dia),
        "mean_mbf": float(mbf.mean()),
        "diastolic_peak_mbf": float(mbf[k_dia]) if k_dia is not None else float("nan"),
        "max_iterations": int(np.max(np.asarray(series["iterations"])[sel])),
    }
    return out


@dataclass
class RunReport:
    """Time series (one entry per step), summary of the reported beat and status."""

    series: dict
    summary: dict
    status: str = "ok"
    output_dir: Path | None = None
    n_steps: int = 0
    elapsed: float = 0.0
    events: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def run_scenario(config: ScenarioConfig, output_dir=None, heartbeats=None, serial=True, progress=None,
                 snapshots=None, max_steps=None) -> RunReport:
    """Integrate the driver offline, then run the coupled time loop.

    Writes ``series.csv``, ``summary.json`` and (every
    ``output.snapshot_every`` steps) ``snapshots/fluid_NNNNNN.vtu`` and
    ``snapshots/perfusion_NNNNNN.vtu`` into the output directory.

    Parameters
    ----------
    serial : bool
        Accepted for interface compatibility; assembly is always serial and
        deterministic.
    progress : callable ``f(step, n_steps, record)``, optional
    max_steps : int, optional
        Stop early (summaries then cover the last beat reached).

    Raises
    ------
    SimulationError
        With the failing step index and, for splitting failures, the residual
        history.
    """
    del serial
    beats = config.heartbeats if heartbeats is None else int(heartbeats)
    if beats < 1:
        raise ConfigError("heartbeats must be at least 1")
    out = Path(output_dir if output_dir is not None else config.output["directory"])
    if not out.is_absolute() and output_dir is None:
        out = config.base_dir / out
    write_snaps = config.output["snapshots"] if snapshots is None else bool(snapshots)
    every = config.output["snapshot_every"]
    start = time.perf_counter()
    model = build_model(config)
    trace, cm = model.trace, model.coupled
    period, dt = trace.period, config.dt
    n = int(round(beats * period / dt))
    if max_steps is not None:
        n = min(n, int(max_steps))
    J = model.partition.J
    names = series_columns(J)
    series = {k: [] for k in names}
    mesh_p = model.perfusion_mesh
    region_col = {"region": model.partition.region_of_cell}
    out.mkdir(parents=True, exist_ok=True)
    fstate = FluidState.rest(model.fluid_mesh)
    dstate = cm.initial_darcy(0.0)
    Q = None
    balance_tol = config.coupling["balance_tol"]
    beta23 = config.darcy.beta[1, 2]
    with SeriesWriter(out / "series.csv", names) as writer:
        for k in range(1, n + 1):
            try:
                fstate, dstate, cs, rec = cm.step(fstate, dstate, dt, Q)
            except SplittingError as exc:
                raise SimulationError(f"step {k} (t={k * dt:.6g} s): {exc}", k, exc.history) from exc
            except (SolverError, MeshInversionError, np.linalg.LinAlgError) as exc:
                raise SimulationError(f"step {k} (t={k * dt:.6g} s): {exc}", k) from exc
            Q = cs.Q
            t = k * dt
            q_sum = float(np.sum(cs.Q))
            scale = max(abs(q_sum), abs(rec.inflow), abs(rec.outflow))
            closure = abs(q_sum - rec.inflow) / scale if scale > 0 else 0.0
            balance = abs(rec.inflow - rec.outflow) / scale if scale > 0 else 0.0
            if closure > 1e-12:
                raise ConservationError(f"step {k}: flux closure error {closure:.3e}", k, cs.history)
            if balance > balance_tol:
                raise ConservationError(f"step {k}: bed balance error {balance:.3e}", k, cs.history)
            row = {
                "step": k,
                "t": t,
                "beat": int(math.floor(t / period - 1e-9)),
                "diastole": int(bool(trace.is_diastole(t))),
                "p_lv": rec.p_lv,
                "p_aorta": rec.outlet_pressures[model.outlets[1].patch],
                "p_pulmonary_veins": rec.outlet_pressures[model.outlets[0].patch],
                "p_bed": rec.p_bed,
                "Q_total": q_sum,
                "mbf_mean": rec.mbf_mean,
                "iterations": rec.iterations,
                "residual": rec.residual,
                "inflow": rec.inflow,
                "outflow": rec.outflow,
                "closure_error": closure,
                "balance_error": balance,
            }
            for j in range(J):
                row[f"p_c_{j}"] = float(cs.p_c[j])
                row[f"Q_{j}"] = float(cs.Q[j])
            writer.write(row)
            for key in names:
                series[key].append(row[key])
            if write_snaps and k % every == 0:
                mbf = compute_mbf(dstate.p2, dstate.p3, beta23)
                export_snapshot({"u": fstate.u, "p": fstate.p, "d": fstate.d, "u_ale": fstate.w},
                                fstate.current_mesh(), out / "snapshots" / f"fluid_{k:06d}.vtu")
                export_snapshot({"p1": dstate.p1, "p2": dstate.p2, "p3": dstate.p3, "mbf": mbf},
                                mesh_p, out / "snapshots" / f"perfusion_{k:06d}.vtu", region_col)
            if progress is not None:
                progress(k, n, rec)
    arrays = {k: np.asarray(v) for k, v in series.items()}
    summary = summarize(arrays, period, trace.events, beats)
    summary["flux_unit"] = "m^3/s"
    summary["mbf_unit"] = "ml/min/100ml"
    summary["systolic_peak_flux_ml_s"] = summary["systolic_peak_flux"] / ML
    summary["diastolic_peak_flux_ml_s"] = summary["diastolic_peak_flux"] / ML
    summary["events"] = dict(trace.events)
    summary["heartbeats"] = beats
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return RunReport(arrays, summary, "ok", out, n, time.perf_counter() - start, dict(trace.events))
