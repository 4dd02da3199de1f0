"""Fixed unit conversions. Everything inside the package is SI."""

from __future__ import annotations

import re

MMHG = 133.322  # Pa
ML = 1e-6  # m^3
MINUTE = 60.0  # s

_UNITS = {
    "pa": 1.0,
    "kpa": 1e3,
    "mmhg": MMHG,
    "m": 1.0,
    "cm": 1e-2,
    "mm": 1e-3,
    "m3": 1.0,
    "ml": ML,
    "s": 1.0,
    "ms": 1e-3,
    "m3/s": 1.0,
    "ml/s": ML,
    "ml/min": ML / MINUTE,
    "ml/mmhg": ML / MMHG,
    "mmhg/ml": MMHG / ML,
    "mmhg*s/ml": MMHG / ML,
    "m3/(pa*s)": 1.0,
    "ml/(mmhg*s)": ML / MMHG,
}

_QUANTITY = re.compile(r"^\s*([-+0-9.eE]+)\s*(.*?)\s*$")


def to_si(value):
    """Convert a config value to SI.

    Plain numbers are taken as SI already. Strings such as ``"10 mmHg"`` or
    ``"2.5 ml/s"`` are parsed with the fixed conversion table above.
    """
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, (list, tuple)):
        return [to_si(v) for v in value]
    match = _QUANTITY.match(str(value))
    if match is None:
        raise ValueError(f"cannot parse quantity {value!r}")
    number, unit = match.groups()
    unit = unit.replace(" ", "").lower()
    if not unit:
        return float(number)
    if unit not in _UNITS:
        raise ValueError(f"unknown unit {unit!r} in {value!r}")
    return float(number) * _UNITS[unit]


def pa_to_mmhg(p):
    return p / MMHG


def mmhg_to_pa(p):
    return p * MMHG
