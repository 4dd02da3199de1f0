"""Lumped ventricle driver, valve timing and the coronary-bed pressure it implies.

Run with ``python demos/01_driver_and_bed_pressure.py``.
"""

import numpy as np

from perfusim.circulation import CirculationParams, integrate_limit_cycle
from perfusim.darcy import bed_pressure
from perfusim.units import ML, MMHG

trace = integrate_limit_cycle(CirculationParams(), dt=1e-3)
print("valve events (s):", {k: round(v, 4) for k, v in trace.events.items()})

p_lv = trace.p_lv_samples / MMHG
v = trace.volume_samples / ML
print(f"peak LV pressure {p_lv.max():.1f} mmHg, EDV {v.max():.1f} ml, ESV {v.min():.1f} ml")

# the bed pressure follows the ventricle: high in systole, low in filling
p_bed = bed_pressure(trace.p_lv_samples) / MMHG
print(f"bed pressure range [{p_bed.min():.1f}, {p_bed.max():.1f}] mmHg")

for t in np.linspace(0.0, trace.period, 9)[:-1]:
    phase = "diastole" if trace.is_diastole(t) else "systole"
    print(f"t = {t:.2f} s  {phase:8s}  p_LV = {trace.p_lv(t) / MMHG:6.1f} mmHg  "
          f"squeeze = {trace.squeeze_fraction(t):.3f}")
