"""Test-set scoring, per-station MSE tables and day-long prediction series."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from datetime import date, datetime, timezone, tzinfo
from pathlib import Path
from typing import Sequence
from zoneinfo import ZoneInfo

import numpy as np

from . import features as feat
from .ingest import HOUR, ObservationTable, format_timestamp, parse_timestamp
from .net import LstmModel, model_forward, predict

MSE_UNIT = 1e-5
SERIES_HEADER = (
    "timestamp", "pm10_pred", "pm10_true", "pm25_pred", "pm25_true",
    "pm10_pred_ugm3", "pm10_true_ugm3", "pm25_pred_ugm3", "pm25_true_ugm3",
)
TABLE_HEADER = ("station", "mse_1e-5")


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    station_id: int
    test_mse: float
    n_samples: int
    pm10_mse: float
    pm25_mse: float
    pm10_rmse_ugm3: float = math.nan
    pm25_rmse_ugm3: float = math.nan

    @property
    def rmse(self) -> float:
        return math.sqrt(self.test_mse)


def evaluate(model: LstmModel, scaler: feat.Scaler | None, test: feat.WindowedDataset) -> EvalReport:
    """Mean per-sample squared error over the test windows, in normalized units.

    With a scaler, per-target RMSE in µg/m³ is reported as well.
    """
    if len(test) == 0:
        raise EvalError("empty test set")
    y_hat = predict(model, test.inputs)
    sq = (y_hat - test.targets) ** 2
    per_target = sq.mean(axis=0)
    rmse_ug = (math.nan, math.nan)
    if scaler is not None:
        diff = feat.invert_target(scaler, y_hat, test.station_id) - feat.invert_target(scaler, test.targets, test.station_id)
        rmse_ug = tuple(float(v) for v in np.sqrt(np.mean(diff ** 2, axis=0)))
    return EvalReport(
        station_id=test.station_id,
        test_mse=float(sq.sum(axis=1).mean()),
        n_samples=len(test),
        pm10_mse=float(per_target[0]),
        pm25_mse=float(per_target[1]),
        pm10_rmse_ugm3=rmse_ug[0],
        pm25_rmse_ugm3=rmse_ug[1],
    )


# ---------------------------------------------------------------------------
# table rendering

def format_mse(mse: float) -> str:
    return f"{mse / MSE_UNIT:.2f}"


def render_table(reports: Sequence[EvalReport], fmt: str = "text") -> str:
    """Per-station MSE in units of 1e-5, two decimals, stations ascending."""
    if not reports:
        raise EvalError("no reports to render")
    rows = sorted(reports, key=lambda r: r.station_id)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TABLE_HEADER)
        for r in rows:
            writer.writerow([r.station_id, format_mse(r.test_mse)])
        return buf.getvalue()
    if fmt != "text":
        raise EvalError(f"unknown table format {fmt!r}")
    cells = [(str(r.station_id), format_mse(r.test_mse)) for r in rows]
    w0 = max(len("Station"), *(len(a) for a, _ in cells))
    w1 = max(len("MSE (1e-5)"), *(len(b) for _, b in cells))
    lines = [f"{'Station':>{w0}}  {'MSE (1e-5)':>{w1}}", f"{'-' * w0}  {'-' * w1}"]
    lines += [f"{a:>{w0}}  {b:>{w1}}" for a, b in cells]
    return "\n".join(lines) + "\n"


def parse_table_csv(text: str) -> list[tuple[int, float]]:
    """Inverse of ``render_table(..., fmt="csv")``: (station, MSE) pairs."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != TABLE_HEADER:
        raise EvalError(f"bad table header {header!r}")
    return [(int(station), float(value) * MSE_UNIT) for station, value in reader]


# ---------------------------------------------------------------------------
# day series

@dataclass(frozen=True)
class SeriesExport:
    station_id: int
    timestamps: list[datetime]
    pred: np.ndarray  # (n, 2) normalized pm10, pm25
    true: np.ndarray
    pred_ugm3: np.ndarray
    true_ugm3: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamps)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SERIES_HEADER)
        for k, ts in enumerate(self.timestamps):
            writer.writerow([format_timestamp(ts)] + [repr(float(v)) for v in (
                self.pred[k, 0], self.true[k, 0], self.pred[k, 1], self.true[k, 1],
                self.pred_ugm3[k, 0], self.true_ugm3[k, 0], self.pred_ugm3[k, 1], self.true_ugm3[k, 1],
            )])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path: str | Path, station_id: int = -1) -> "SeriesExport":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != SERIES_HEADER:
                raise EvalError(f"{path}: bad series header")
            rows = [r for r in reader if r]
        if not rows:
            raise EvalError(f"{path}: empty series")
        stamps = [parse_timestamp(r[0]) for r in rows]
        vals = np.array([[float(v) for v in r[1:]] for r in rows])
        return cls(
            station_id,
            stamps,
            pred=vals[:, [0, 2]],
            true=vals[:, [1, 3]],
            pred_ugm3=vals[:, [4, 6]],
            true_ugm3=vals[:, [5, 7]],
        )


def _day_start(day: date | str, tz: str | tzinfo | None) -> datetime:
    if isinstance(day, str):
        day = date.fromisoformat(day)
    zone = timezone.utc if tz is None or tz == "UTC" else (ZoneInfo(tz) if isinstance(tz, str) else tz)
    return datetime(day.year, day.month, day.day, tzinfo=zone).astimezone(timezone.utc)


def predict_series(
    model: LstmModel,
    scaler: feat.Scaler,
    table: ObservationTable,
    station_id: int,
    day: date | str,
    T: int | None = None,
    tz: str | tzinfo | None = None,
    hours: int = 24,
) -> SeriesExport:
    """One-step-ahead predictions for each hour of ``day``.

    Each hour's input is the preceding ``T`` hours of observed data, never
    earlier predictions.  ``day`` starts at local midnight in ``tz`` (UTC by
    default).
    """
    T = T or feat.WINDOW
    first = table.hour_index(_day_start(day, tz))
    if first < T:
        raise EvalError(f"need {T} hours of history before {day}; table has {max(first, 0)}")
    if first + hours > table.n_hours:
        raise EvalError(f"table ends before the last hour of {day}")
    feats = feat.transform(scaler, table)
    windows = np.stack([feats[k - T:k] for k in range(first, first + hours)])
    pred, _ = model_forward(model, windows)
    cols = list(feat.target_columns(station_id))
    true = feats[first:first + hours, cols]
    pm = [feat.PM10, feat.PM25]
    true_ug = table.pollutants[first:first + hours, station_id][:, pm].copy()
    return SeriesExport(
        station_id=station_id,
        timestamps=[table.start + k * HOUR for k in range(first, first + hours)],
        pred=pred,
        true=true,
        pred_ugm3=feat.invert_target(scaler, pred, station_id),
        true_ugm3=true_ug,
    )


# ---------------------------------------------------------------------------
# plot

def emit_plot(series: SeriesExport, path: str | Path, title: str | None = None) -> Path:
    """Two-panel SVG (PM10, PM2.5) of predicted vs observed normalized values.

    Output is byte-stable for identical input: the SVG id salt is fixed and
    no creation date is embedded.
    """
    if len(series) == 0:
        raise EvalError("empty series")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    hours = [ts.hour for ts in series.timestamps]
    x = np.arange(len(series))
    with matplotlib.rc_context({"svg.hashsalt": "finedust", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
        try:
            for k, (ax, name) in enumerate(zip(axes, ("pm10", "pm25"))):
                ax.set_gid(f"panel_{name}")
                (line,) = ax.plot(x, series.true[:, k], color="black", label="observed")
                line.set_gid(f"{name}_true")
                (line,) = ax.plot(x, series.pred[:, k], color="tab:red", linestyle="--", label="predicted")
                line.set_gid(f"{name}_pred")
                ax.set_ylabel(f"{'PM10' if k == 0 else 'PM2.5'} (normalized)")
                ax.legend(loc="upper right")
            axes[-1].set_xticks(x[::3], [f"{h:02d}" for h in hours[::3]])
            axes[-1].set_xlabel("hour of day (UTC)")
            fig.suptitle(title or f"station {series.station_id}, {series.timestamps[0]:%Y-%m-%d}")
            fig.tight_layout()
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    return path
