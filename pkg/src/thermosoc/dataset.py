"""Discharge-cycle data: CSV ingest, coulomb counting and a Thevenin simulator.

Stored current follows the benchmark convention (negative = discharge).
:func:`coulomb_count` and the simulator internals use the opposite,
discharge-positive convention.
"""
from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

CSV_COLUMNS = ("cycle_id", "time_s", "current_A", "voltage_V", "soc_pct", "temperature_C")
PROFILE_COLUMNS = ("time_s", "current_A")
NOMINAL_DT_S = 1.0


class SamplingWarning(UserWarning):
    """Sampling interval deviates from the nominal 1 Hz rate."""


def _readonly(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class DischargeCycle:
    """One timestamped discharge record at a fixed ambient temperature."""

    cycle_id: str
    temperature_C: float
    time_s: np.ndarray
    current_A: np.ndarray
    voltage_V: np.ndarray
    soc_pct: np.ndarray

    def __post_init__(self):
        for name in ("time_s", "current_A", "voltage_V", "soc_pct"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        n = len(self.time_s)
        if n < 2:
            raise ValueError(f"cycle {self.cycle_id!r}: need at least 2 samples, got {n}")
        for name in ("current_A", "voltage_V", "soc_pct"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"cycle {self.cycle_id!r}: {name} length differs from time_s")
        if np.any(np.diff(self.time_s) <= 0):
            k = int(np.argmax(np.diff(self.time_s) <= 0)) + 1
            raise ValueError(f"cycle {self.cycle_id!r}: timestamps not strictly increasing at sample {k}")
        if np.any(self.voltage_V <= 0):
            raise ValueError(f"cycle {self.cycle_id!r}: non-positive voltage")
        if np.any((self.soc_pct < 0) | (self.soc_pct > 100)):
            raise ValueError(f"cycle {self.cycle_id!r}: SoC outside [0, 100]")

    def __len__(self) -> int:
        return len(self.time_s)

    def __eq__(self, other):
        if not isinstance(other, DischargeCycle):
            return NotImplemented
        return (
            self.cycle_id == other.cycle_id
            and self.temperature_C == other.temperature_C
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("time_s", "current_A", "voltage_V", "soc_pct")
            )
        )

    __hash__ = None


# --------------------------------------------------------------------------- #
# CSV ingest
# --------------------------------------------------------------------------- #

def _parse_float(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"row {row}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ValueError(f"row {row}: non-finite value in column {column!r}")
    return value


def load_csv(path, schema: dict | None = None, nominal_dt_s: float = NOMINAL_DT_S,
             dt_tolerance: float = 0.10) -> list[DischargeCycle]:
    """Read discharge cycles from a CSV file.

    Parameters
    ----------
    path : path-like
        CSV file with a header row.
    schema : dict, optional
        Maps canonical column names (``CSV_COLUMNS``) to the header names used
        in the file. Unmapped names are looked up verbatim.
    nominal_dt_s, dt_tolerance
        Sampling intervals further than ``dt_tolerance`` (relative) from the
        nominal interval raise a :class:`SamplingWarning`.

    Returns
    -------
    list of DischargeCycle
        One per ``cycle_id``, in order of first appearance.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    schema = dict(schema or {})
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: no data rows") from None
        index = {}
        for col in CSV_COLUMNS:
            name = schema.get(col, col)
            if name not in header:
                raise ValueError(f"{path}: missing column {name!r}")
            index[col] = header.index(name)

        groups: dict[str, dict[str, list]] = {}
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            cid = row[index["cycle_id"]].strip()
            g = groups.setdefault(cid, {c: [] for c in CSV_COLUMNS[1:]} | {"rows": []})
            for col in CSV_COLUMNS[1:]:
                g[col].append(_parse_float(row[index[col]], row_no, col))
            g["rows"].append(row_no)

    if not groups:
        raise ValueError(f"{path}: no data rows")

    cycles = []
    for cid, g in groups.items():
        t = np.asarray(g["time_s"])
        bad = np.flatnonzero(np.diff(t) <= 0)
        if bad.size:
            raise ValueError(
                f"{path}: non-monotone timestamps in cycle {cid!r} at row {g['rows'][bad[0] + 1]}")
        temps = set(g["temperature_C"])
        if len(temps) != 1:
            raise ValueError(f"{path}: cycle {cid!r} mixes ambient temperatures {sorted(temps)}")
        dt = np.diff(t)
        if dt.size and np.any(np.abs(dt - nominal_dt_s) > dt_tolerance * nominal_dt_s):
            warnings.warn(
                f"cycle {cid!r}: sampling interval in [{dt.min():g}, {dt.max():g}] s deviates "
                f"from the nominal {nominal_dt_s:g} s", SamplingWarning, stacklevel=2)
        cycles.append(DischargeCycle(cid, temps.pop(), t, g["current_A"], g["voltage_V"], g["soc_pct"]))
    return cycles


def write_csv(cycles: Iterable[DischargeCycle], path) -> None:
    """Write cycles in the canonical schema; floats use shortest round-trip repr."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for c in cycles:
            temp = repr(float(c.temperature_C))
            for t, i, v, s in zip(c.time_s, c.current_A, c.voltage_V, c.soc_pct):
                fh.write(f"{c.cycle_id},{float(t)!r},{float(i)!r},{float(v)!r},{float(s)!r},{temp}\n")


# --------------------------------------------------------------------------- #
# Coulomb counting
# --------------------------------------------------------------------------- #

class CoulombCount(NamedTuple):
    soc_pct: np.ndarray
    clamped_at: np.ndarray  # sample indices where the integrator saturated


def coulomb_count(current_A, dt_s, capacity_Ah_eff: float, soc0_pct: float = 100.0) -> CoulombCount:
    """Integrate discharge-positive current into SoC (percent).

    ``soc[0] = soc0``; ``soc[k] = soc[k-1] - 100 * I[k] * dt[k] / (3600 * C)``.
    The integrator saturates at 0 and 100; saturated samples are reported.
    ``dt_s`` is a scalar or the ``len(current) - 1`` sample intervals.
    """
    i = np.asarray(current_A, dtype=float)
    if capacity_Ah_eff <= 0:
        raise ValueError("capacity must be positive")
    if not np.all(np.isfinite(i)):
        raise ValueError(f"non-finite current at sample {int(np.argmin(np.isfinite(i)))}")
    dt = np.broadcast_to(np.asarray(dt_s, dtype=float), (max(len(i) - 1, 0),))
    if not np.all(np.isfinite(dt)) or np.any(dt <= 0):
        raise ValueError("dt must be positive and finite")
    if not math.isfinite(soc0_pct):
        raise ValueError("non-finite initial SoC")

    delta = 100.0 * i[1:] * dt / (3600.0 * capacity_Ah_eff)
    raw = soc0_pct - np.concatenate([[0.0], np.cumsum(delta)])
    if raw.min() >= 0.0 and raw.max() <= 100.0:
        return CoulombCount(raw, np.empty(0, dtype=int))

    soc = np.empty_like(raw)
    clamped = []
    level = min(max(soc0_pct, 0.0), 100.0)
    if level != soc0_pct:
        clamped.append(0)
    soc[0] = level
    for k in range(1, len(i)):
        nxt = level - delta[k - 1]
        if nxt < 0.0 or nxt > 100.0:
            clamped.append(k)
            nxt = min(max(nxt, 0.0), 100.0)
        soc[k] = level = nxt
    return CoulombCount(soc, np.asarray(clamped, dtype=int))


# --------------------------------------------------------------------------- #
# Equivalent-circuit simulator
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class TempMap:
    """Piecewise-linear map from ambient temperature (deg C) to a parameter value."""

    temps: tuple
    values: tuple

    def __post_init__(self):
        t = tuple(float(x) for x in np.atleast_1d(self.temps))
        v = tuple(float(x) for x in np.atleast_1d(self.values))
        if len(t) != len(v) or not t:
            raise ValueError("temps and values must be non-empty and equally long")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("temps must be strictly increasing")
        object.__setattr__(self, "temps", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value: float) -> "TempMap":
        return cls((25.0,), (value,))

    def __call__(self, temperature_C: float) -> float:
        return float(np.interp(temperature_C, self.temps, self.values))

    def to_dict(self) -> dict:
        return {"temps": list(self.temps), "values": list(self.values)}


_TEMPS = (-20.0, -10.0, 0.0, 10.0, 25.0)


def _default_ocv():
    soc = (0, 5, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
    volts = (3.00, 3.25, 3.38, 3.50, 3.58, 3.65, 3.72, 3.80, 3.89, 3.98, 4.08, 4.18)
    return tuple(float(s) for s in soc), volts


@dataclass(frozen=True)
class EcmParams:
    """First-order Thevenin cell with temperature-dependent elements.

    Defaults loosely follow a 2.9 Ah NCA 18650 cell; the temperature maps are
    chosen so that cold ambient conditions lose capacity, raise resistance and
    depress the open-circuit voltage.
    """

    capacity_Ah_ref: float = 2.9
    capacity_temp_factor: TempMap = TempMap(_TEMPS, (0.70, 0.80, 0.90, 0.96, 1.0))
    r0_ohm: TempMap = TempMap(_TEMPS, (0.080, 0.050, 0.032, 0.022, 0.015))
    r1_ohm: TempMap = TempMap(_TEMPS, (0.060, 0.035, 0.022, 0.015, 0.010))
    c1_farad: TempMap = TempMap(_TEMPS, (1000.0, 1500.0, 2000.0, 2500.0, 3000.0))
    ocv_shift_V: TempMap = TempMap(_TEMPS, (-0.070, -0.045, -0.025, -0.010, 0.0))
    ocv_curve: tuple = field(default_factory=_default_ocv)
    cutoff_V: float = 2.5
    noise_std: tuple = (0.01, 0.002)

    def __post_init__(self):
        soc, volts = (np.asarray(a, dtype=float) for a in self.ocv_curve)
        if soc.shape != volts.shape or soc.size < 2:
            raise ValueError("ocv_curve needs matching SoC and voltage arrays")
        if np.any(np.diff(soc) <= 0) or np.any(np.diff(volts) <= 0):
            raise ValueError("ocv_curve must be strictly increasing in SoC")
        if self.capacity_Ah_ref <= 0:
            raise ValueError("capacity must be positive")
        for name in ("r0_ohm", "r1_ohm", "c1_farad"):
            if min(getattr(self, name).values) <= 0:
                raise ValueError(f"{name} must be positive")
        f = self.capacity_temp_factor.values
        if min(f) <= 0 or max(f) > 1:
            raise ValueError("capacity factors must lie in (0, 1]")
        if len(self.noise_std) != 2 or min(self.noise_std) < 0:
            raise ValueError("noise_std is (current_std, voltage_std), both >= 0")

    def ocv(self, soc_pct, temperature_C: float = 25.0):
        soc, volts = self.ocv_curve
        return np.interp(soc_pct, soc, volts) + self.ocv_shift_V(temperature_C)

    def capacity_Ah(self, temperature_C: float) -> float:
        return self.capacity_Ah_ref * self.capacity_temp_factor(temperature_C)

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, TempMap):
                out[k] = v.to_dict()
            elif k == "ocv_curve":
                out[k] = [list(map(float, v[0])), list(map(float, v[1]))]
            elif isinstance(v, tuple):
                out[k] = list(v)
            else:
                out[k] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EcmParams":
        kw = {}
        for k, v in d.items():
            if isinstance(v, dict):
                kw[k] = TempMap(v["temps"], v["values"])
            elif k == "ocv_curve":
                kw[k] = (tuple(v[0]), tuple(v[1]))
            elif isinstance(v, list):
                kw[k] = tuple(v)
            else:
                kw[k] = v
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class CurrentProfile:
    """Current-vs-time schedule in the stored sign convention (negative = discharge)."""

    time_s: np.ndarray
    current_A: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "time_s", _readonly(self.time_s))
        object.__setattr__(self, "current_A", _readonly(self.current_A))
        if self.time_s.size == 0 or self.time_s.shape != self.current_A.shape:
            raise ValueError("profile must be non-empty with matching time and current")
        if np.any(np.diff(self.time_s) <= 0):
            raise ValueError("profile time step must be positive")

    def __len__(self):
        return len(self.time_s)

    @classmethod
    def constant(cls, current_A: float, duration_s: float, dt_s: float = 1.0) -> "CurrentProfile":
        t = np.arange(0.0, duration_s + dt_s / 2, dt_s)
        return cls(t, np.full_like(t, current_A))


def load_profile(path) -> CurrentProfile:
    """Read a ``time_s,current_A`` profile CSV."""
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=float)
    missing = [c for c in PROFILE_COLUMNS if c not in (data.dtype.names or ())]
    if missing:
        raise ValueError(f"{path}: missing column(s) {missing}")
    return CurrentProfile(np.atleast_1d(data["time_s"]), np.atleast_1d(data["current_A"]))


def drive_profile(duration_s: float = 1800.0, seed: int = 0, mean_A: float = -9.0,
                  spread_A: float = 6.0, limits_A: tuple = (-20.0, 10.0),
                  segment_s: tuple = (4, 25)) -> CurrentProfile:
    """Random piecewise-constant drive-cycle-like current at 1 Hz.

    Segments draw a level from a normal distribution clipped to ``limits_A``;
    the first segment is always a discharge and regenerative segments are
    flipped whenever they would push net charge above the starting point.
    """
    rng = np.random.default_rng(seed)
    n = int(duration_s) + 1
    current = np.empty(n)
    k, net = 0, 0.0
    while k < n:
        length = int(rng.integers(segment_s[0], segment_s[1] + 1))
        level = float(np.clip(rng.normal(mean_A, spread_A), *limits_A))
        if k == 0:
            level = -abs(level) - 1.0
        if level > 0 and net + level * length > 0:
            level = -level
        seg = slice(k, min(k + length, n))
        current[seg] = level
        net += level * (seg.stop - seg.start)
        k = seg.stop
    return CurrentProfile(np.arange(n, dtype=float), current)


def simulate_cycle(params: EcmParams, profile: CurrentProfile, temperature_C: float,
                   seed: int = 0, cycle_id: str = "sim") -> DischargeCycle:
    """Run the Thevenin model over ``profile`` starting from a full, rested cell.

    The run ends at the profile end, at the first sample whose terminal voltage
    reaches ``cutoff_V`` (kept), or just before the cell would be over-drained.
    Measurement noise is added to the recorded current and voltage only; the
    SoC column is the noise-free coulomb count.
    """
    t = profile.time_s
    i_dis = -profile.current_A  # discharge-positive
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise ValueError("non-positive time step in profile")
    cap = params.capacity_Ah(temperature_C)
    delta = 100.0 * i_dis[1:] * dt / (3600.0 * cap)
    soc = 100.0 - np.concatenate([[0.0], np.cumsum(delta)])

    tol = 1e-9
    over = np.flatnonzero(soc > 100.0 + tol)
    end = len(t)
    under = np.flatnonzero(soc < -tol)
    if under.size:
        end = int(under[0])
    if over.size and over[0] < end:
        raise ValueError(f"profile charges the cell above 100% SoC at sample {int(over[0])}")
    soc = np.clip(soc[:end], 0.0, 100.0)
    i_dis, t = i_dis[:end], t[:end]
    if end < 2:
        raise ValueError("profile drains the cell within the first sample")

    r0, r1, c1 = params.r0_ohm(temperature_C), params.r1_ohm(temperature_C), params.c1_farad(temperature_C)
    decay = np.exp(-np.diff(t) / (r1 * c1))
    v_rc = np.zeros(end)
    for k in range(1, end):
        v_rc[k] = v_rc[k - 1] * decay[k - 1] + r1 * (1.0 - decay[k - 1]) * i_dis[k]
    voltage = params.ocv(soc, temperature_C) - i_dis * r0 - v_rc

    hit = np.flatnonzero(voltage <= params.cutoff_V)
    if hit.size:
        stop = max(int(hit[0]) + 1, 2)
        t, i_dis, soc, voltage = t[:stop], i_dis[:stop], soc[:stop], voltage[:stop]

    rng = np.random.default_rng(seed)
    i_std, v_std = params.noise_std
    current_meas = -i_dis + (rng.normal(0.0, i_std, len(t)) if i_std > 0 else 0.0)
    voltage_meas = voltage + (rng.normal(0.0, v_std, len(t)) if v_std > 0 else 0.0)
    voltage_meas = np.maximum(voltage_meas, 1e-3)
    return DischargeCycle(cycle_id, float(temperature_C), t, current_meas, voltage_meas, soc)


def simulate_campaign(params: EcmParams, temperature_C: float, n_cycles: int, seed: int = 0,
                      duration_s: float = 1800.0, prefix: str | None = None,
                      profile_kw: dict | None = None) -> list[DischargeCycle]:
    """Simulate ``n_cycles`` discharge cycles with independent drive profiles."""
    prefix = prefix or f"T{temperature_C:g}"
    ss = np.random.SeedSequence([seed, int(round(temperature_C * 10)) + 10_000])
    out = []
    for n, child in enumerate(ss.spawn(n_cycles)):
        s_profile, s_noise = (int(x) for x in child.generate_state(2))
        prof = drive_profile(duration_s, seed=s_profile, **(profile_kw or {}))
        out.append(simulate_cycle(params, prof, temperature_C, seed=s_noise, cycle_id=f"{prefix}_c{n:02d}"))
    return out


def split_cycles(cycles: Sequence, n_test: int = 1, n_val: int = 1):
    """Last ``n_test`` cycles test, the preceding ``n_val`` validation, the rest training."""
    cycles = list(cycles)
    if len(cycles) < n_test + n_val + 1:
        raise ValueError(f"need at least {n_test + n_val + 1} cycles, got {len(cycles)}")
    n_train = len(cycles) - n_test - n_val
    return cycles[:n_train], cycles[n_train:n_train + n_val], cycles[n_train + n_val:]
