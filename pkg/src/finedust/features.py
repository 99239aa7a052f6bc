"""Min-max scaling, feature/target assembly and 48-hour windowing."""
from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ingest import CLIMATE_VARS, HOUR, N_STATIONS, POLLUTANTS, ObservationTable

WINDOW = 48
N_SECTORS = 16
PM10 = POLLUTANTS.index("pm10")
PM25 = POLLUTANTS.index("pm25")
_WIND_DIR = CLIMATE_VARS.index("wind_dir")
SCALER_MODES = ("per_type", "per_column")


class FeatureError(ValueError):
    pass


def feature_dim(n_stations: int = N_STATIONS) -> int:
    return n_stations * len(POLLUTANTS) + len(CLIMATE_VARS)


def target_columns(station_id: int) -> tuple[int, int]:
    """Positions of a station's PM10 and PM2.5 inside the feature vector."""
    base = station_id * len(POLLUTANTS)
    return base + PM10, base + PM25


@dataclass(frozen=True)
class Scaler:
    """Fitted min/max statistics.

    In ``per_type`` mode one range is shared by all stations for each of the
    six pollutants (the arrays simply repeat it per station); ``per_column``
    keeps a separate range per station column.  Wind direction is not fitted:
    its range is pinned to the sector indices 0..15.
    """

    mode: str
    pollutant_min: np.ndarray  # (n_stations, 6)
    pollutant_max: np.ndarray
    climate_min: np.ndarray  # (9,)
    climate_max: np.ndarray

    def __post_init__(self):
        if self.mode not in SCALER_MODES:
            raise FeatureError(f"unknown scaler mode {self.mode!r}")
        if np.any(self.pollutant_max < self.pollutant_min) or np.any(self.climate_max < self.climate_min):
            raise FeatureError("scaler max below min")
        for arr in (self.pollutant_min, self.pollutant_max, self.climate_min, self.climate_max):
            arr.flags.writeable = False

    @property
    def n_stations(self) -> int:
        return self.pollutant_min.shape[0]

    def ranges(self) -> dict[str, tuple[float, float]]:
        """Flat ``name -> (min, max)`` mapping, the serialized form."""
        out = {}
        if self.mode == "per_type":
            for j, name in enumerate(POLLUTANTS):
                out[name] = (float(self.pollutant_min[0, j]), float(self.pollutant_max[0, j]))
        else:
            for s in range(self.n_stations):
                for j, name in enumerate(POLLUTANTS):
                    out[f"s{s:02d}.{name}"] = (float(self.pollutant_min[s, j]), float(self.pollutant_max[s, j]))
        for j, name in enumerate(CLIMATE_VARS):
            out[name] = (float(self.climate_min[j]), float(self.climate_max[j]))
        return out

    def degenerate(self) -> list[str]:
        return [name for name, (lo, hi) in self.ranges().items() if lo == hi]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-feature min and max vectors aligned with the feature layout."""
        lo = np.concatenate([self.pollutant_min.ravel(), self.climate_min])
        hi = np.concatenate([self.pollutant_max.ravel(), self.climate_max])
        return lo, hi

    def to_text(self) -> str:
        lines = ["# finedust scaler v1", f"mode={self.mode}", f"n_stations={self.n_stations}"]
        lines += [f"{name}={lo!r},{hi!r}" for name, (lo, hi) in self.ranges().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Scaler":
        items = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise FeatureError(f"bad scaler line {line!r}")
            items[key.strip()] = value.strip()
        try:
            mode = items.pop("mode")
            n_stations = int(items.pop("n_stations"))
            pairs = {k: tuple(float(x) for x in v.split(",")) for k, v in items.items()}
            used = set()
            pmin = np.empty((n_stations, len(POLLUTANTS)))
            pmax = np.empty_like(pmin)
            for s in range(n_stations):
                for j, name in enumerate(POLLUTANTS):
                    key = name if mode == "per_type" else f"s{s:02d}.{name}"
                    pmin[s, j], pmax[s, j] = pairs[key]
                    used.add(key)
            cmin = np.array([pairs[name][0] for name in CLIMATE_VARS])
            cmax = np.array([pairs[name][1] for name in CLIMATE_VARS])
            used.update(CLIMATE_VARS)
        except (KeyError, ValueError) as exc:
            raise FeatureError(f"incomplete or malformed scaler file: {exc}") from exc
        if set(pairs) - used:
            raise FeatureError(f"unexpected scaler keys {sorted(set(pairs) - used)}")
        return cls(mode, pmin, pmax, cmin, cmax)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "Scaler":
        return cls.from_text(Path(path).read_text())


def fit_scaler(table: ObservationTable, mode: str = "per_type") -> Scaler:
    """Fit min/max ranges on ``table`` (pass only the training rows)."""
    if table.n_hours == 0:
        raise FeatureError("cannot fit a scaler on an empty table")
    if not table.is_complete():
        raise FeatureError("table has missing cells; impute before fitting")
    if mode == "per_type":
        pmin = np.broadcast_to(table.pollutants.min(axis=(0, 1)), (table.n_stations, len(POLLUTANTS))).copy()
        pmax = np.broadcast_to(table.pollutants.max(axis=(0, 1)), (table.n_stations, len(POLLUTANTS))).copy()
    elif mode == "per_column":
        pmin = table.pollutants.min(axis=0)
        pmax = table.pollutants.max(axis=0)
    else:
        raise FeatureError(f"unknown scaler mode {mode!r}")
    cmin = table.climate.min(axis=0)
    cmax = table.climate.max(axis=0)
    cmin[_WIND_DIR], cmax[_WIND_DIR] = 0.0, N_SECTORS - 1.0
    return Scaler(mode, pmin, pmax, cmin, cmax)


def _scale(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (values - lo) / safe, 0.0)
    return np.clip(out, 0.0, 1.0)


def raw_features(table: ObservationTable) -> np.ndarray:
    """Unscaled feature matrix, shape ``(n_hours, 39*6 + 9)``."""
    return np.concatenate([table.pollutants.reshape(table.n_hours, -1), table.climate], axis=1)


def transform(scaler: Scaler, table: ObservationTable) -> np.ndarray:
    """Scaled feature vectors, one row per hour, every entry in [0, 1].

    Row layout: station 0's six pollutants, station 1's, ..., station 38's,
    then the nine climate variables.
    """
    if table.n_stations != scaler.n_stations:
        raise FeatureError(f"scaler fitted for {scaler.n_stations} stations, table has {table.n_stations}")
    if not table.is_complete():
        raise FeatureError("table has missing cells; impute before transforming")
    lo, hi = scaler.bounds()
    return _scale(raw_features(table), lo, hi)


def count_clamped(scaler: Scaler, table: ObservationTable) -> int:
    """Number of cells that fall outside the fitted range and would be clamped."""
    lo, hi = scaler.bounds()
    raw = raw_features(table)
    return int(np.sum((raw < lo) | (raw > hi)))


def invert_target(scaler: Scaler, y, station_id: int = 0):
    """Map normalized (pm10, pm25) back to µg/m³.

    Accepts a single pair or an ``(N, 2)`` array; returns the same shape.
    """
    lo = np.array([scaler.pollutant_min[station_id, PM10], scaler.pollutant_min[station_id, PM25]])
    hi = np.array([scaler.pollutant_max[station_id, PM10], scaler.pollutant_max[station_id, PM25]])
    if np.any(hi == lo):
        raise FeatureError("PM range is degenerate; target cannot be inverted")
    y = np.asarray(y, dtype=float)
    out = lo + y * (hi - lo)
    if out.ndim == 1:
        return float(out[0]), float(out[1])
    return out


@dataclass(frozen=True)
class WindowedDataset:
    """Samples of ``T`` consecutive hourly inputs and the next hour's targets.

    ``inputs`` is normally a read-only strided view into the feature matrix,
    so the dataset costs no more memory than the series itself.
    ``target_index`` holds each target's absolute row in the source table.
    """

    inputs: np.ndarray  # (N, T, D)
    targets: np.ndarray  # (N, 2)
    target_index: np.ndarray  # (N,)
    start: datetime
    station_id: int

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def window(self) -> int:
        return self.inputs.shape[1]

    @property
    def timestamps(self) -> list[datetime]:
        return [self.start + int(i) * HOUR for i in self.target_index]

    def subset(self, begin: int, stop: int) -> "WindowedDataset":
        return WindowedDataset(
            self.inputs[begin:stop],
            self.targets[begin:stop],
            self.target_index[begin:stop],
            self.start,
            self.station_id,
        )


def make_windows(features: np.ndarray, table: ObservationTable, station_id: int, T: int = WINDOW) -> WindowedDataset:
    """Sample k = (features[k:k+T], station PM10/PM2.5 at hour k+T)."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] != table.n_hours:
        raise FeatureError(f"feature matrix shape {features.shape} does not match table of {table.n_hours} hours")
    if not 0 <= station_id < table.n_stations:
        raise FeatureError(f"station_id {station_id} out of range")
    if T < 1:
        raise FeatureError("window length must be positive")
    n = features.shape[0] - T
    if n < 1:
        raise FeatureError(f"series of {features.shape[0]} hours is too short for T={T} (need {T + 1})")
    # (n+1, D, T) -> drop the last window, whose target lies past the series
    inputs = sliding_window_view(features, T, axis=0)[:n].transpose(0, 2, 1)
    cols = list(target_columns(station_id))
    targets = features[T:, cols].copy()
    return WindowedDataset(inputs, targets, np.arange(T, T + n), table.start, station_id)


def split_sizes(n: int, train_frac: float, val_frac: float) -> tuple[int, int, int]:
    if train_frac <= 0 or val_frac <= 0 or train_frac + val_frac >= 1:
        raise FeatureError(f"need positive fractions summing below 1, got {train_frac}/{val_frac}")
    n_train = math.floor(n * train_frac)
    n_val = math.floor(n * val_frac)
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise FeatureError(f"{n} samples give an empty partition ({n_train}/{n_val}/{n_test})")
    return n_train, n_val, n_test


def split_dataset(
    ds: WindowedDataset, train_frac: float, val_frac: float
) -> tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Chronological split; train and val sizes are floored, test takes the rest."""
    n_train, n_val, _ = split_sizes(len(ds), train_frac, val_frac)
    return ds.subset(0, n_train), ds.subset(n_train, n_train + n_val), ds.subset(n_train + n_val, len(ds))


def training_rows(n_hours: int, train_frac: float, val_frac: float, T: int = WINDOW) -> int:
    """Number of leading table rows seen by the training partition (inputs and targets)."""
    n_train, _, _ = split_sizes(n_hours - T, train_frac, val_frac)
    return n_train + T


def prepare(
    table: ObservationTable,
    station_id: int,
    T: int = WINDOW,
    train_frac: float = 0.7,
    val_frac: float = 0.15,
    scaler_mode: str = "per_type",
    scaler: Scaler | None = None,
) -> tuple[Scaler, tuple[WindowedDataset, WindowedDataset, WindowedDataset]]:
    """Fit the scaler on the training rows, then window and split the table."""
    if scaler is None:
        scaler = fit_scaler(table.slice(0, training_rows(table.n_hours, train_frac, val_frac, T)), scaler_mode)
    ds = make_windows(transform(scaler, table), table, station_id, T)
    return scaler, split_dataset(ds, train_frac, val_frac)
