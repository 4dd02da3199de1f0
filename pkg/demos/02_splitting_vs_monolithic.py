"""Fluid-perfusion splitting on a small linear model problem.

A two-outlet channel is coupled to a two-region Darcy square. The fixed-point
splitting is compared with a single block solve of the same equations for
several relaxation factors.

Run from the repository root with ``python demos/02_splitting_vs_monolithic.py``.
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracles import monolithic_coupled_solve  # noqa: E402
from test_coupling import P_BED, PARAMS, model_problem  # noqa: E402

from perfusim.coupling import splitting_solve  # noqa: E402
from perfusim.darcy import DarcyState  # noqa: E402

step, darcy, mesh_p, part = model_problem(alpha=0.1)
p_ref, Q_ref, _ = monolithic_coupled_solve(step, mesh_p, PARAMS, part, P_BED)
print("block solve: p_c =", p_ref, " Q =", Q_ref)

for omega in (1.0, 0.7, 0.5, 0.3):
    _, _, c = splitting_solve(step, darcy, part, P_BED, DarcyState.uniform(mesh_p, P_BED), omega=omega)
    err = np.abs(c.p_c - p_ref).max() / np.abs(p_ref).max()
    print(f"omega {omega:.1f}: {c.iteration:2d} iterations, discrepancy {err:.1e}, "
          f"residuals {' '.join(f'{r:.1e}' for r in c.history)}")
