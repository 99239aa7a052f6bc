"""Parsing, hourly alignment and gap filling of station observations.

Two CSV sources feed the pipeline: a long-format pollutant file (one row per
station and hour) and a climate file from the single weather station.  Both
are merged into an :class:`ObservationTable`, a dense hourly grid where a
missing measurement is ``NaN`` until :func:`impute_missing` fills it.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone, tzinfo
from pathlib import Path
from typing import Iterable, Sequence
from zoneinfo import ZoneInfo

import numpy as np

log = logging.getLogger(__name__)

N_STATIONS = 39
POLLUTANTS = ("so2", "co", "no2", "o3", "pm10", "pm25")
CLIMATE_VARS = (
    "wind_speed",
    "wind_dir",
    "humidity",
    "vapor_pressure",
    "dew_point",
    "surface_pressure",
    "sunlight",
    "visibility",
    "surface_temp",
)
WIND_SECTORS = (
    "N", "NNE", "NE", "ENE", "E", "ESE", "SE", "SSE",
    "S", "SSW", "SW", "WSW", "W", "WNW", "NW", "NNW",
)
POLLUTANT_HEADER = ("station_id", "timestamp") + POLLUTANTS
CLIMATE_HEADER = (
    "timestamp", "wind_speed", "wind_dir", "humidity", "vapor_pressure",
    "dew_point", "surface_pressure", "sunlight", "visibility", "surface_temp",
)
HOUR = timedelta(hours=1)
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M"

_SECTOR_INDEX = {code: i for i, code in enumerate(WIND_SECTORS)}
_WIND_DIR_COL = CLIMATE_VARS.index("wind_dir")


class IngestError(ValueError):
    """Raised for malformed input files or unusable observation tables."""


@dataclass(frozen=True)
class PollutantRecord:
    station_id: int
    timestamp: datetime
    so2: float | None = None
    co: float | None = None
    no2: float | None = None
    o3: float | None = None
    pm10: float | None = None
    pm25: float | None = None

    def values(self) -> tuple[float | None, ...]:
        return tuple(getattr(self, name) for name in POLLUTANTS)


@dataclass(frozen=True)
class ClimateRecord:
    timestamp: datetime
    wind_speed: float | None = None
    wind_dir: int | None = None  # sector index 0..15, 0 = N, clockwise
    humidity: float | None = None
    vapor_pressure: float | None = None
    dew_point: float | None = None
    surface_pressure: float | None = None
    sunlight: float | None = None
    visibility: float | None = None
    surface_temp: float | None = None

    def values(self) -> tuple[float | None, ...]:
        return tuple(getattr(self, name) for name in CLIMATE_VARS)


# ---------------------------------------------------------------------------
# timestamps

def _resolve_tz(source_tz: str | tzinfo | None) -> tzinfo:
    if source_tz is None:
        return timezone.utc
    if isinstance(source_tz, str):
        return timezone.utc if source_tz.upper() == "UTC" else ZoneInfo(source_tz)
    return source_tz


def parse_timestamp(text: str, source_tz: str | tzinfo | None = None) -> datetime:
    """Parse an ISO-8601 hour into an aware UTC datetime.

    Naive timestamps are interpreted in ``source_tz`` (UTC by default).
    """
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError as exc:
        raise IngestError(f"malformed timestamp {text!r}") from exc
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=_resolve_tz(source_tz))
    ts = ts.astimezone(timezone.utc)
    if ts.minute or ts.second or ts.microsecond:
        raise IngestError(f"timestamp {text!r} is not on an hour boundary")
    return ts


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime(TIMESTAMP_FORMAT)


def as_utc_hour(value: datetime | str) -> datetime:
    if isinstance(value, str):
        return parse_timestamp(value)
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    value = value.astimezone(timezone.utc)
    if value.minute or value.second or value.microsecond:
        raise IngestError(f"{value} is not on an hour boundary")
    return value


# ---------------------------------------------------------------------------
# CSV parsing / writing

def _parse_value(text: str, name: str, where: str) -> float | None:
    text = text.strip()
    if not text:
        return None
    try:
        value = float(text)
    except ValueError:
        log.warning("%s: unparseable %s value %r treated as missing", where, name, text)
        return None
    if not math.isfinite(value):
        log.warning("%s: non-finite %s value treated as missing", where, name)
        return None
    return value


def _check_header(header: Sequence[str] | None, expected: Sequence[str], path: Path) -> None:
    if header is None:
        raise IngestError(f"{path}: empty file")
    got = tuple(h.strip().lstrip("﻿") for h in header)
    if got != tuple(expected):
        raise IngestError(f"{path}: malformed header {','.join(got)!r}, expected {','.join(expected)!r}")


def parse_pollutant_csv(
    path: str | Path,
    source_tz: str | tzinfo | None = None,
    n_stations: int = N_STATIONS,
) -> list[PollutantRecord]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    records = []
    seen = set()
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), POLLUTANT_HEADER, path)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            where = f"{path}:{lineno}"
            if len(row) != len(POLLUTANT_HEADER):
                raise IngestError(f"{where}: expected {len(POLLUTANT_HEADER)} fields, got {len(row)}")
            try:
                station = int(row[0])
            except ValueError as exc:
                raise IngestError(f"{where}: bad station_id {row[0]!r}") from exc
            if not 0 <= station < n_stations:
                raise IngestError(f"{where}: station_id {station} out of range [0, {n_stations - 1}]")
            ts = parse_timestamp(row[1], source_tz)
            if (station, ts) in seen:
                raise IngestError(f"{where}: duplicate record for station {station} at {format_timestamp(ts)}")
            seen.add((station, ts))
            values = {}
            for name, cell in zip(POLLUTANTS, row[2:]):
                value = _parse_value(cell, name, where)
                if value is not None and value < 0:
                    log.warning("%s: negative %s=%r treated as missing", where, name, value)
                    value = None
                values[name] = value
            records.append(PollutantRecord(station, ts, **values))
    return records


def parse_climate_csv(path: str | Path, source_tz: str | tzinfo | None = None) -> list[ClimateRecord]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    records = []
    seen = set()
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), CLIMATE_HEADER, path)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            where = f"{path}:{lineno}"
            if len(row) != len(CLIMATE_HEADER):
                raise IngestError(f"{where}: expected {len(CLIMATE_HEADER)} fields, got {len(row)}")
            ts = parse_timestamp(row[0], source_tz)
            if ts in seen:
                raise IngestError(f"{where}: duplicate climate record at {format_timestamp(ts)}")
            seen.add(ts)
            values: dict[str, float | int | None] = {}
            for name, cell in zip(CLIMATE_HEADER[1:], row[1:]):
                if name == "wind_dir":
                    code = cell.strip().upper()
                    if not code:
                        values[name] = None
                    elif code in _SECTOR_INDEX:
                        values[name] = _SECTOR_INDEX[code]
                    else:
                        raise IngestError(f"{where}: unknown wind direction {cell.strip()!r}")
                    continue
                value = _parse_value(cell, name, where)
                if name == "humidity" and value is not None and not 0 <= value <= 100:
                    log.warning("%s: humidity %r outside [0, 100] treated as missing", where, value)
                    value = None
                values[name] = value
            records.append(ClimateRecord(ts, **values))
    return records


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def write_pollutant_csv(records: Iterable[PollutantRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(POLLUTANT_HEADER)
        for rec in records:
            writer.writerow([rec.station_id, format_timestamp(rec.timestamp)] + [_fmt(v) for v in rec.values()])


def write_climate_csv(records: Iterable[ClimateRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CLIMATE_HEADER)
        for rec in records:
            row = [format_timestamp(rec.timestamp)]
            for name in CLIMATE_VARS:
                value = getattr(rec, name)
                if name == "wind_dir":
                    row.append("" if value is None else WIND_SECTORS[value])
                else:
                    row.append(_fmt(value))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# hourly table

@dataclass(frozen=True)
class ObservationTable:
    """Dense hourly grid of 39 pollutant stations plus one climate station.

    ``pollutants`` has shape ``(n_hours, n_stations, 6)`` and ``climate`` has
    shape ``(n_hours, 9)``; missing cells are NaN.  The masks flag every cell
    that had no source value (and, after imputation, was filled).
    """

    start: datetime
    pollutants: np.ndarray
    climate: np.ndarray
    pollutant_mask: np.ndarray
    climate_mask: np.ndarray

    def __post_init__(self):
        if self.pollutants.ndim != 3 or self.pollutants.shape[2] != len(POLLUTANTS):
            raise IngestError(f"pollutant grid has shape {self.pollutants.shape}")
        if self.climate.shape != (self.pollutants.shape[0], len(CLIMATE_VARS)):
            raise IngestError(f"climate grid has shape {self.climate.shape}")
        if self.pollutant_mask.shape != self.pollutants.shape or self.climate_mask.shape != self.climate.shape:
            raise IngestError("imputation mask shape differs from the value grid")
        for arr in (self.pollutants, self.climate, self.pollutant_mask, self.climate_mask):
            arr.flags.writeable = False

    @property
    def n_hours(self) -> int:
        return self.pollutants.shape[0]

    @property
    def n_stations(self) -> int:
        return self.pollutants.shape[1]

    @property
    def end(self) -> datetime:
        return self.start + self.n_hours * HOUR

    @property
    def timestamps(self) -> list[datetime]:
        return [self.start + i * HOUR for i in range(self.n_hours)]

    def hour_index(self, ts: datetime | str) -> int:
        """Row index of ``ts``; may fall outside ``[0, n_hours)``."""
        delta = as_utc_hour(ts) - self.start
        return int(delta // HOUR)

    def n_missing(self) -> int:
        return int(np.isnan(self.pollutants).sum() + np.isnan(self.climate).sum())

    def is_complete(self) -> bool:
        return self.n_missing() == 0

    def slice(self, begin: int, stop: int) -> "ObservationTable":
        if not 0 <= begin < stop <= self.n_hours:
            raise IndexError(f"row range [{begin}, {stop}) outside table of {self.n_hours} hours")
        return ObservationTable(
            start=self.start + begin * HOUR,
            pollutants=self.pollutants[begin:stop].copy(),
            climate=self.climate[begin:stop].copy(),
            pollutant_mask=self.pollutant_mask[begin:stop].copy(),
            climate_mask=self.climate_mask[begin:stop].copy(),
        )


def align_hourly(
    pollutants: Sequence[PollutantRecord],
    climate: Sequence[ClimateRecord],
    start: datetime | str,
    end: datetime | str,
    n_stations: int = N_STATIONS,
) -> ObservationTable:
    """Place records on the gap-free hourly grid covering ``[start, end)``."""
    start, end = as_utc_hour(start), as_utc_hour(end)
    if end <= start:
        raise IngestError(f"end {format_timestamp(end)} is not after start {format_timestamp(start)}")
    n_hours = int((end - start) // HOUR)
    pol = np.full((n_hours, n_stations, len(POLLUTANTS)), np.nan)
    clim = np.full((n_hours, len(CLIMATE_VARS)), np.nan)
    n_used = 0
    for rec in pollutants:
        row = int((rec.timestamp - start) // HOUR)
        if 0 <= row < n_hours:
            if not 0 <= rec.station_id < n_stations:
                raise IngestError(f"station_id {rec.station_id} out of range")
            pol[row, rec.station_id] = [np.nan if v is None else v for v in rec.values()]
            n_used += 1
    for rec in climate:
        row = int((rec.timestamp - start) // HOUR)
        if 0 <= row < n_hours:
            clim[row] = [np.nan if v is None else v for v in rec.values()]
            n_used += 1
    if n_used == 0:
        raise IngestError(f"no records between {format_timestamp(start)} and {format_timestamp(end)}")
    return ObservationTable(start, pol, clim, np.isnan(pol), np.isnan(clim))


def _interpolate(column: np.ndarray) -> np.ndarray:
    missing = np.isnan(column)
    if not missing.any():
        return column.copy()
    idx = np.arange(column.size)
    # np.interp holds the edge values constant outside the present range
    return np.interp(idx, idx[~missing], column[~missing])


def _nearest(column: np.ndarray) -> np.ndarray:
    missing = np.isnan(column)
    if not missing.any():
        return column.copy()
    present = np.flatnonzero(~missing)
    idx = np.arange(column.size)
    right = np.clip(np.searchsorted(present, idx), 0, present.size - 1)
    left = np.clip(right - 1, 0, present.size - 1)
    pick = np.where(np.abs(idx - present[left]) <= np.abs(present[right] - idx), present[left], present[right])
    return column[pick]


def impute_missing(table: ObservationTable, spatial_fallback: bool = False) -> ObservationTable:
    """Fill every missing cell.

    Continuous variables are linearly interpolated along time with the nearest
    present value held at the series edges.  Wind direction is categorical, so
    it takes the temporally nearest present sector instead.

    A column with no present value at all is an error unless
    ``spatial_fallback`` is set, in which case an empty pollutant column is
    filled with the hourly mean of the same pollutant over the other stations.
    """
    pol = np.array(table.pollutants, dtype=float)
    clim = np.array(table.climate, dtype=float)
    empty = []
    for s in range(pol.shape[1]):
        for j, name in enumerate(POLLUTANTS):
            col = pol[:, s, j]
            if np.isnan(col).all():
                empty.append((s, j))
                continue
            pol[:, s, j] = _interpolate(col)
    for j, name in enumerate(CLIMATE_VARS):
        col = clim[:, j]
        if np.isnan(col).all():
            raise IngestError(f"climate column {name!r} has no observations")
        clim[:, j] = _nearest(col) if j == _WIND_DIR_COL else _interpolate(col)
    if empty:
        if not spatial_fallback:
            s, j = empty[0]
            raise IngestError(f"column {POLLUTANTS[j]!r} of station {s} has no observations")
        by_element: dict[int, list[int]] = {}
        for s, j in empty:
            by_element.setdefault(j, []).append(s)
        for j, stations in by_element.items():
            donors = [s for s in range(pol.shape[1]) if s not in stations]
            if not donors:
                raise IngestError(f"pollutant {POLLUTANTS[j]!r} has no observations at any station")
            fill = pol[:, donors, j].mean(axis=1)
            for s in stations:
                pol[:, s, j] = fill
    return ObservationTable(table.start, pol, clim, table.pollutant_mask.copy(), table.climate_mask.copy())


def empty_pollutant_columns(table: ObservationTable) -> list[tuple[int, str]]:
    """(station, pollutant) pairs with no observation anywhere in the table."""
    empty = np.isnan(table.pollutants).all(axis=0)
    return [(int(s), POLLUTANTS[j]) for s, j in zip(*np.nonzero(empty))]


def load_table(
    pollutant_path: str | Path,
    climate_path: str | Path,
    start: datetime | str | None = None,
    end: datetime | str | None = None,
    source_tz: str | tzinfo | None = None,
    impute: bool = True,
    spatial_fallback: bool = False,
) -> ObservationTable:
    """Parse both files and return the aligned (and by default imputed) table.

    Without an explicit range the table spans the earliest to the latest hour
    present in either file.
    """
    pollutants = parse_pollutant_csv(pollutant_path, source_tz)
    climate = parse_climate_csv(climate_path, source_tz)
    stamps = [r.timestamp for r in pollutants] + [r.timestamp for r in climate]
    if not stamps:
        raise IngestError("input files contain no records")
    start = min(stamps) if start is None else as_utc_hour(start)
    end = max(stamps) + HOUR if end is None else as_utc_hour(end)
    table = align_hourly(pollutants, climate, start, end)
    return impute_missing(table, spatial_fallback=spatial_fallback) if impute else table

