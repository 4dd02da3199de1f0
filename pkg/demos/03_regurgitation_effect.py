"""Coronary flux with a competent and a regurgitant aortic valve.

Runs the desk scenario and its regurgitant variant for the requested number
of heartbeats and prints the summary of the last beat of each. Two beats
take roughly 15 minutes per run on one core; pass a smaller count, for
example ``python demos/03_regurgitation_effect.py 1``, for a quicker look.
"""

import sys
from pathlib import Path

from perfusim.scenario import apply_ar_modifications, load_config, run_scenario

beats = int(sys.argv[1]) if len(sys.argv) > 1 else 2
root = Path(__file__).resolve().parents[1]
base = load_config(root / "scenarios" / "ph_desk.toml")
variants = {"competent": base, "regurgitant": apply_ar_modifications(base, 0.045, 1.2, 0.8)}

summaries = {}
for name, cfg in variants.items():
    report = run_scenario(cfg, output_dir=root / "output" / "demo" / name, heartbeats=beats, snapshots=False)
    summaries[name] = report.summary
    print(f"{name}: {report.n_steps} steps in {report.elapsed:.0f} s")

keys = ["systolic_peak_flux_ml_s", "diastolic_peak_flux_ml_s", "systolic_mean_flux", "diastolic_peak_mbf", "mean_mbf"]
print(f"{'':28s}{'competent':>14s}{'regurgitant':>14s}")
for k in keys:
    a, b = summaries["competent"][k], summaries["regurgitant"][k]
    print(f"{k:28s}{a:14.5g}{b:14.5g}")
