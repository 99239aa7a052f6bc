"""Synthetic hourly observations shaped like the real station network.

The processes are intentionally simple so tests can reason about them:

* sunlight is a half-sine over local daytime hours and zero at night;
* O3 at each station is ``base + o3_sunlight * sunlight(t - o3_lag) + noise``;
* SO2, CO and NO2 are AR(1) processes around station-specific means, scaled
  by a slow regional factor shared by every station;
* PM10 mixes the primaries, a regional dust AR(1) term and a wind-speed
  dispersion term; PM2.5 is a noisy fraction of PM10.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TypeVar

import numpy as np

from .ingest import (
    CLIMATE_VARS,
    HOUR,
    POLLUTANTS,
    ClimateRecord,
    PollutantRecord,
    as_utc_hour,
    write_climate_csv,
    write_pollutant_csv,
)

R = TypeVar("R", PollutantRecord, ClimateRecord)

# decimals kept per variable, roughly instrument resolution
_POLLUTANT_DECIMALS = {"so2": 5, "co": 3, "no2": 5, "o3": 5, "pm10": 1, "pm25": 1}
_CLIMATE_DECIMALS = {
    "wind_speed": 2, "humidity": 1, "vapor_pressure": 2, "dew_point": 2,
    "surface_pressure": 1, "sunlight": 3, "visibility": 0, "surface_temp": 2,
}


@dataclass(frozen=True)
class SynthConfig:
    n_hours: int = 2000
    seed: int = 0
    n_stations: int = 39
    noise_std: float = 1.0
    o3_sunlight: float = 0.03  # ppm of O3 per unit sunlight
    o3_lag: int = 2  # hours between sunlight and the O3 response
    pm_wind: float = 6.0  # µg/m³ of PM10 removed per m/s of extra wind
    start: str = "2017-01-01T00:00"
    utc_offset: int = 9  # local solar time = UTC + offset

    def __post_init__(self):
        if self.n_hours < 72:
            raise ValueError("n_hours must be at least 72")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.n_stations < 1:
            raise ValueError("n_stations must be positive")
        if self.o3_lag < 0:
            raise ValueError("o3_lag must be non-negative")


def sunlight_curve(local_hour: np.ndarray) -> np.ndarray:
    """Half-sine between 06:00 and 18:00 local time, zero otherwise."""
    return np.maximum(0.0, np.sin(np.pi * (local_hour - 6.0) / 12.0))


def _ar1(rng: np.random.Generator, n: int, phi: float, sigma: float, size: tuple = ()) -> np.ndarray:
    """Zero-mean AR(1) started from its stationary distribution."""
    shape = (n, *size)
    eps = rng.standard_normal(shape)
    out = np.empty(shape)
    out[0] = eps[0] * sigma / np.sqrt(1.0 - phi * phi)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + sigma * eps[t]
    return out


def generate_arrays(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Raw grids ``(n_hours, n_stations, 6)`` and ``(n_hours, 9)``, already rounded."""
    rng = np.random.default_rng(config.seed)
    n, S, k = config.n_hours, config.n_stations, config.noise_std
    start = as_utc_hour(config.start)
    hours = np.arange(n)
    local_hour = (hours + start.hour + config.utc_offset) % 24
    sun = sunlight_curve(local_hour)
    sun_lagged = np.concatenate([np.zeros(config.o3_lag), sun[: n - config.o3_lag]]) if config.o3_lag else sun

    # climate
    wind_speed = np.maximum(0.1, 2.5 + 0.8 * sun + _ar1(rng, n, 0.9, 0.35 * k))
    steps = rng.choice([-1, 0, 1], size=n, p=[0.15, 0.7, 0.15])
    wind_dir = (rng.integers(16) + np.cumsum(steps)) % 16
    surface_temp = 8.0 + 6.0 * np.roll(sun, 2) + _ar1(rng, n, 0.95, 0.5 * k)
    humidity = np.clip(70.0 - 25.0 * sun + _ar1(rng, n, 0.9, 3.0 * k), 5.0, 100.0)
    dew_point = surface_temp - (100.0 - humidity) / 5.0
    vapor_pressure = 6.112 * np.exp(17.67 * dew_point / (dew_point + 243.5))
    surface_pressure = 1013.0 + _ar1(rng, n, 0.98, 0.4 * k)

    # pollutants
    mu = np.stack([
        rng.uniform(0.003, 0.007, S),  # so2, ppm
        rng.uniform(0.3, 0.7, S),  # co, ppm
        rng.uniform(0.02, 0.04, S),  # no2, ppm
    ], axis=1)
    regional = 1.0 + _ar1(rng, n, 0.97, 0.05 * k)  # shared scaling of primaries
    local = _ar1(rng, n, 0.9, 0.08 * k, size=(S, 3))
    primaries = np.maximum(0.05, regional[:, None, None] + local) * mu[None]
    o3_base = rng.uniform(0.01, 0.02, S)
    o3 = np.maximum(0.0, o3_base[None] + config.o3_sunlight * sun_lagged[:, None]
                    + 0.002 * k * rng.standard_normal((n, S)))
    dust = _ar1(rng, n, 0.97, 2.0 * k)
    pm_base = rng.uniform(25.0, 45.0, S)
    rel = primaries / mu[None]  # relative deviation of each primary from its mean
    pm10 = (pm_base[None] + 8.0 * (rel[..., 0] - 1) + 6.0 * (rel[..., 1] - 1) + 10.0 * (rel[..., 2] - 1)
            + dust[:, None] - config.pm_wind * (wind_speed[:, None] - 2.5)
            + 1.5 * k * rng.standard_normal((n, S)))
    pm10 = np.maximum(1.0, pm10)
    pm25 = np.maximum(0.5, 0.55 * pm10 + 1.0 * k * rng.standard_normal((n, S)))
    visibility = np.clip(20000.0 - 150.0 * pm10.mean(axis=1), 200.0, 20000.0)

    pol = np.empty((n, S, len(POLLUTANTS)))
    pol[..., 0], pol[..., 1], pol[..., 2] = primaries[..., 0], primaries[..., 1], primaries[..., 2]
    pol[..., 3], pol[..., 4], pol[..., 5] = o3, pm10, pm25
    for j, name in enumerate(POLLUTANTS):
        pol[..., j] = np.round(pol[..., j], _POLLUTANT_DECIMALS[name])

    columns = {
        "wind_speed": wind_speed, "wind_dir": wind_dir.astype(float), "humidity": humidity,
        "vapor_pressure": vapor_pressure, "dew_point": dew_point, "surface_pressure": surface_pressure,
        "sunlight": sun, "visibility": visibility, "surface_temp": surface_temp,
    }
    clim = np.stack([
        columns[name] if name == "wind_dir" else np.round(columns[name], _CLIMATE_DECIMALS[name])
        for name in CLIMATE_VARS
    ], axis=1)
    return pol, clim


def generate(config: SynthConfig) -> tuple[list[PollutantRecord], list[ClimateRecord]]:
    """Records matching the pollutant and climate CSV schemas, hour-major order."""
    pol, clim = generate_arrays(config)
    start = as_utc_hour(config.start)
    pollutants, climate = [], []
    for t in range(config.n_hours):
        ts = start + t * HOUR
        for s in range(config.n_stations):
            pollutants.append(PollutantRecord(s, ts, *(float(v) for v in pol[t, s])))
        values = [float(v) for v in clim[t]]
        values[1] = int(values[1])
        climate.append(ClimateRecord(ts, *values))
    return pollutants, climate


def inject_gaps(rows: Sequence[R], gap_fraction: float, seed: int) -> list[R]:
    """Blank a uniformly random ``gap_fraction`` of the value cells.

    A column (one variable of one station) is never blanked entirely; if the
    draw would do so, one of its cells is kept.
    """
    if not 0 <= gap_fraction < 0.5:
        raise ValueError(f"gap_fraction must lie in [0, 0.5), got {gap_fraction}")
    rows = list(rows)
    if gap_fraction == 0 or not rows:
        return rows
    names = POLLUTANTS if isinstance(rows[0], PollutantRecord) else CLIMATE_VARS
    rng = np.random.default_rng(seed)
    n_cells = len(rows) * len(names)
    chosen = rng.choice(n_cells, size=round(gap_fraction * n_cells), replace=False)
    blank = np.zeros((len(rows), len(names)), dtype=bool)
    blank[chosen // len(names), chosen % len(names)] = True

    def column_key(rec, j):
        return (getattr(rec, "station_id", None), j)

    present: dict[tuple, list[int]] = {}
    for r, rec in enumerate(rows):
        for j, name in enumerate(names):
            if getattr(rec, name) is not None and not blank[r, j]:
                present.setdefault(column_key(rec, j), []).append(r)
    for r, rec in enumerate(rows):
        for j, name in enumerate(names):
            key = column_key(rec, j)
            if blank[r, j] and key not in present and getattr(rec, name) is not None:
                blank[r, j] = False  # keep one value so the column survives
                present[key] = [r]

    out = []
    for r, rec in enumerate(rows):
        if blank[r].any():
            rec = dataclasses.replace(rec, **{names[j]: None for j in np.flatnonzero(blank[r])})
        out.append(rec)
    return out


def write_dataset(
    config: SynthConfig, out_dir: str | Path, gap_fraction: float = 0.0
) -> tuple[Path, Path]:
    """Generate, optionally punch gaps, and write ``pollutants.csv`` / ``climate.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pollutants, climate = generate(config)
    if gap_fraction:
        pollutants = inject_gaps(pollutants, gap_fraction, config.seed + 1)
        climate = inject_gaps(climate, gap_fraction, config.seed + 2)
    pol_path, clim_path = out_dir / "pollutants.csv", out_dir / "climate.csv"
    write_pollutant_csv(pollutants, pol_path)
    write_climate_csv(climate, clim_path)
    return pol_path, clim_path
