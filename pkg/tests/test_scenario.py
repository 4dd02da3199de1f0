import json

import numpy as np
import pytest
from conftest import SCENARIOS

from perfusim.cli import EXIT_INVALID, EXIT_OK, EXIT_SOLVER, main
from perfusim.io import read_series, read_vtu
from perfusim.scenario import (
    ConfigError,
    ScenarioConfig,
    apply_ar_modifications,
    build_surface,
    load_config,
    run_scenario,
    summarize,
    write_config,
)
from perfusim.units import MMHG


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def _with_physics(tmp_path, text):
    # a scenario in tmp_path that includes the shipped desk scenario
    return _write(tmp_path, "s.toml", f'include = ["{(SCENARIOS / "ph_desk.toml").as_posix()}"]\n' + text)


# -- configuration ------------------------------------------------------------------


def test_ph_config_in_si(ph_config):
    assert ph_config.dt == pytest.approx(5e-4)
    assert ph_config.pulmonary_vein_pressure == pytest.approx(10 * MMHG)
    assert ph_config.darcy.a2 == pytest.approx(1500.0)
    assert ph_config.fluid.rho == 1060.0
    assert ph_config.alpha == (1.15e-10,)
    assert ph_config.wall["taper"] == pytest.approx(0.012)


def test_include_later_tables_override(tmp_path):
    path = _with_physics(tmp_path, '[fluid]\nmu = 4e-3\n[pulmonary_veins]\npressure = "8 mmHg"\n')
    cfg = load_config(path)
    assert cfg.fluid.mu == 4e-3
    assert cfg.fluid.rho == 1060.0
    assert cfg.pulmonary_vein_pressure == pytest.approx(8 * MMHG)


def test_include_cycle_rejected(tmp_path):
    _write(tmp_path, "a.toml", 'include = ["b.toml"]\n')
    _write(tmp_path, "b.toml", 'include = ["a.toml"]\n')
    with pytest.raises(ConfigError, match="include cycle"):
        load_config(tmp_path / "a.toml")


@pytest.mark.parametrize(
    "text, match",
    [
        ('[run]\ndt = "0.7 ms"\n', "divide"),
        ("[run]\ndt = -1.0\n", "positive"),
        ('[fluid]\nmu = "3 furlongs"\n', "unit"),
        ("[coupling]\nomega = 1.5\n", "omega"),
        ("[wall]\nsqueeze = 1.2\n", "squeeze"),
        ("[darcy]\nK = [1e-7, 1e-8]\n", "three"),
        ("[coronary]\nalpha = [1e-10, 1e-10, 1e-10]\n", "alpha"),
        ('[geometry]\nkind = "files"\nfluid_mesh = "nope.msh"\nperfusion_mesh = "nope.msh"\n', "does not exist"),
        ('[aortic_pressure]\nsource = "tape"\n', "source"),
        ("[valves.aortic]\nR = -1.0\n", "non-negative"),
        ("[circulation]\nbogus = 1.0\n", "unknown"),
    ],
)
def test_invalid_configurations(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(_with_physics(tmp_path, text))


def test_malformed_toml(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "bad.toml", "[run\n"))
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.toml")


def test_write_config_round_trip(tmp_path, ph_config):
    path = write_config(ph_config, tmp_path / "sub" / "copy.toml")
    back = load_config(path)
    assert back.data == ph_config.data
    assert back.darcy.K == ph_config.darcy.K


# -- AR protocol ------------------------------------------------------------------


def test_ar_identity_limit(ph_config):
    ar = apply_ar_modifications(ph_config, 1e-12, 1.0, 1.0)
    assert ar.aortic_pressure["systolic_scale"] == 1.0
    assert ar.aortic_pressure["diastolic_scale"] == 1.0
    spec = dict(ar.data["valves"]["aortic"]["closed"])
    ref = dict(ph_config.data["valves"]["aortic"]["closed"])
    assert spec.pop("orifice_fraction") == 1e-12
    assert spec == ref


def test_ar_orifice_area(ph_config):
    ar = apply_ar_modifications(ph_config, 0.045)
    spec = ar.data["valves"]["aortic"]["closed"]
    leaflet = build_surface(spec, ar.base_dir, "closed")
    full = build_surface(ph_config.data["valves"]["aortic"]["closed"], ar.base_dir, "closed")
    r = spec["radius"]
    n = 32
    polygon = 0.5 * n * r**2 * np.sin(2 * np.pi / n)  # tessellated disk area
    assert full.area == pytest.approx(polygon, rel=1e-12)
    assert full.area - leaflet.area == pytest.approx(0.045 * polygon, rel=0.01)


def test_ar_scaling_and_repeat(ph_config):
    ar = apply_ar_modifications(ph_config, 0.045, 1.2, 0.8)
    assert ar.aortic_pressure["systolic_scale"] == pytest.approx(1.2)
    assert ar.aortic_pressure["diastolic_scale"] == pytest.approx(0.8)
    again = apply_ar_modifications(ar, 0.02, 1.0, 1.0)
    assert again.data["valves"]["aortic"]["closed"]["orifice_fraction"] == 0.02


@pytest.mark.parametrize("f", [1.0, 1.5, 0.0, -0.1])
def test_ar_orifice_out_of_range(ph_config, f):
    with pytest.raises(ConfigError):
        apply_ar_modifications(ph_config, f)


def test_ar_unknown_valve(ph_config):
    with pytest.raises(ConfigError, match="no valve"):
        apply_ar_modifications(ph_config, 0.05, valve="tricuspid")


# -- summaries -----------------------------------------------------------------------


def test_summarize_synthetic_series():
    period = 1.0
    t = np.arange(1, 201) * 0.01
    q = np.sin(2 * np.pi * t) + 2.0
    dia = (np.mod(t, period) >= 0.3).astype(int)
    series = {"t": t, "beat": np.floor(t / period - 1e-9), "Q_total": q, "mbf_mean": q * 10,
              "diastole": dia, "iterations": np.full(200, 4)}
    s = summarize(series, period, {"av_open": 0.1, "av_close": 0.3}, 2)
    sel = (t > 1.0) & (t <= 2.0)
    assert s["reported_beat"] == 1
    assert s["systolic_peak_flux"] == pytest.approx(q[sel & (dia == 0)].max())
    assert s["diastolic_peak_flux"] == pytest.approx(q[sel & (dia == 1)].max())
    assert s["mean_mbf"] == pytest.approx(10 * q[sel].mean())
    assert s["max_iterations"] == 4


# -- short runs ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def short_run(ph_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("short")
    cfg = ph_config.with_data({**ph_config.data, "output": {"snapshot_every": 2}})
    return run_scenario(cfg, output_dir=out, max_steps=4, snapshots=True)


def test_rest_state_has_no_flux(tmp_path):
    rest = load_config(SCENARIOS / "rest_desk.toml")
    report = run_scenario(rest, output_dir=tmp_path, max_steps=3, snapshots=False)
    assert np.abs(report.series["Q_total"]).max() < 1e-20
    assert np.abs(report.series["mbf_mean"]).max() < 1e-10


def test_short_run_outputs(short_run):
    out = short_run.output_dir
    assert short_run.ok and short_run.n_steps == 4
    csv = read_series(out / "series.csv")
    for k in csv:
        assert np.array_equal(csv[k], np.asarray(short_run.series[k], float))
    summary = json.loads((out / "summary.json").read_text())
    assert summary["flux_unit"] == "m^3/s"
    assert np.all(csv["closure_error"] <= 1e-12)
    assert np.all(np.isfinite(csv["mbf_mean"]))
    assert np.allclose(csv["Q_total"], csv["Q_0"] + csv["Q_1"], rtol=1e-14)


def test_snapshot_schema(short_run, ph_config):
    snaps = short_run.output_dir / "snapshots"
    assert sorted(p.name for p in snaps.iterdir()) == [
        "fluid_000002.vtu", "fluid_000004.vtu", "perfusion_000002.vtu", "perfusion_000004.vtu"]
    fluid = read_vtu(snaps / "fluid_000004.vtu")
    assert set(fluid.point_data) == {"u", "p", "d", "u_ale"}
    assert fluid.point_data["u"].shape[1] == 3
    perf = read_vtu(snaps / "perfusion_000004.vtu")
    assert set(perf.point_data) == {"p1", "p2", "p3", "mbf"}
    assert np.all(np.isfinite(perf.point_data["mbf"]))
    from perfusim.mesh import build_region_partition

    mesh = ph_config.desk().perfusion_mesh()
    part = build_region_partition(mesh, ph_config.region_seeds)
    assert np.array_equal(perf.cell_data["region"], part.region_of_cell)


def test_short_run_deterministic(short_run, ph_config, tmp_path):
    again = run_scenario(ph_config, output_dir=tmp_path, max_steps=4, snapshots=False)
    for k in short_run.series:
        assert np.array_equal(short_run.series[k], again.series[k])


# -- CLI ----------------------------------------------------------------------------------


def test_cli_check_ok(capsys):
    assert main(["check", str(SCENARIOS / "ph_desk.toml")]) == EXIT_OK
    assert "perfusion regions" in capsys.readouterr().out


def test_cli_invalid_exit_code(tmp_path, capsys):
    path = _with_physics(tmp_path, '[run]\ndt = "0.7 ms"\n')
    assert main(["check", str(path)]) == EXIT_INVALID
    assert main(["run", str(path)]) == EXIT_INVALID
    assert "invalid scenario" in capsys.readouterr().err


def test_cli_solver_failure_exit_code(tmp_path, capsys):
    path = _with_physics(tmp_path, "[coupling]\nmax_iter = 1\n")
    code = main(["run", str(path), "--output", str(tmp_path / "out"), "--heartbeats", "1", "--no-snapshots"])
    assert code == EXIT_SOLVER
    err = capsys.readouterr().err
    assert "step 1" in err and "residual history" in err


def test_cli_ar_variant(tmp_path):
    out = tmp_path / "ar.toml"
    code = main(["ar-variant", str(SCENARIOS / "ph_desk.toml"), "--orifice", "0.045",
                 "--sys-scale", "1.2", "--dia-scale", "0.8", "-o", str(out)])
    assert code == EXIT_OK
    cfg = load_config(out)
    assert cfg.aortic_pressure["systolic_scale"] == pytest.approx(1.2)
    assert cfg.data["valves"]["aortic"]["closed"]["orifice_fraction"] == 0.045
    assert main(["ar-variant", str(SCENARIOS / "ph_desk.toml"), "--orifice", "1.0", "-o", str(out)]) == EXIT_INVALID


def test_from_dict_defaults():
    cfg = ScenarioConfig.from_dict({})
    assert cfg.heartbeats == 2 and cfg.coupling["omega"] == 0.7
