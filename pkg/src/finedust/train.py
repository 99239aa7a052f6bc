"""Optimizers, the per-station training loop and the model registry."""
from __future__ import annotations

import dataclasses
import json
import logging
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import features as feat
from .ingest import ObservationTable, empty_pollutant_columns, impute_missing
from .loss import mse_grad
from .net import LstmModel, init_params, load_checkpoint, model_backward, model_forward, predict, save_checkpoint

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

DISTRICT_STATIONS = tuple(range(1, 26))
OPTIMIZERS = ("adam", "sgd")


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    early_stop_patience: int = 0
    T: int = feat.WINDOW
    hidden_size: int = 42
    train_frac: float = 0.7
    val_frac: float = 0.15
    scaler_mode: str = "per_type"
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "TrainConfig":
        unknown = set(values) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        defaults = cls()
        coerced = {}
        for key, value in values.items():
            kind = type(getattr(defaults, key))
            if kind is int and isinstance(value, float) and not value.is_integer():
                raise ValueError(f"config key {key!r} needs an integer, got {value}")
            coerced[key] = kind(value)
        return cls(**coerced)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "TrainConfig":
        with open(path, "rb") as fh:
            values = tomllib.load(fh)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    def to_text(self) -> str:
        lines = []
        for k, v in dataclasses.asdict(self).items():
            lines.append(f"{k} = {json.dumps(v)}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class AdamMoments:
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray]) -> "AdamMoments":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    moments: AdamMoments,
    t: int,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[Sequence[np.ndarray], AdamMoments]:
    """Bias-corrected Adam update, applied to ``params`` and ``moments`` in place."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, moments.m, moments.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, moments


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> Sequence[np.ndarray]:
    for p, g in zip(params, grads):
        p -= lr * g
    return params


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainReport:
    station_id: int
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mse: float = float("inf")
    seconds: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)


class EarlyStopping:
    """Tracks the best validation loss; ``patience=0`` never stops."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.patience > 0 and self.bad_epochs >= self.patience


def dataset_loss(model: LstmModel, ds: feat.WindowedDataset, batch_size: int = 256) -> float:
    y_hat = predict(model, ds.inputs, batch_size)
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.mean(np.sum((y_hat - ds.targets) ** 2, axis=1)))


def station_seeds(seed: int, station_id: int) -> tuple[int, int]:
    """(init seed, shuffle seed) derived from the run seed and the station alone."""
    a, b = np.random.SeedSequence([seed, station_id]).generate_state(2)
    return int(a), int(b)


def train_station(
    splits: Sequence[feat.WindowedDataset],
    station_id: int,
    config: TrainConfig,
    model: LstmModel | None = None,
) -> tuple[LstmModel, TrainReport]:
    """Fit one model on ``splits[0]``, selecting the epoch with the lowest loss on ``splits[1]``.

    Extra partitions (e.g. the test split) are ignored.  Deterministic in
    ``(config, data, station_id)``.
    """
    train, val = splits[0], splits[1]
    if len(train) == 0 or len(val) == 0:
        raise feat.FeatureError("train and validation splits must be non-empty")
    init_seed, shuffle_seed = station_seeds(config.seed, station_id)
    if model is None:
        model = init_params(init_seed, train.inputs.shape[2], config.hidden_size, dtype=np.dtype(config.dtype))
    else:
        model = model.copy()
    rng = np.random.default_rng(shuffle_seed)
    params = model.arrays()
    moments = AdamMoments.zeros(params)
    report = TrainReport(station_id)
    stopper = EarlyStopping(config.early_stop_patience)
    best = model.copy()
    step = 0
    t0 = time.perf_counter()
    n = len(train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for k in range(0, n, config.batch_size):
            idx = np.sort(order[k:k + config.batch_size])
            xb, yb = train.inputs[idx], train.targets[idx]
            y_hat, cache = model_forward(model, xb)
            with np.errstate(over="ignore", invalid="ignore"):
                batch_loss = float(np.mean(np.sum((y_hat - yb) ** 2, axis=1)))
            if not np.isfinite(batch_loss):
                report.seconds = time.perf_counter() - t0
                raise TrainingDivergence(f"station {station_id}: non-finite loss at epoch {epoch}", report)
            grads = model_backward(model, cache, mse_grad(y_hat, yb))
            step += 1
            if config.optimizer == "adam":
                adam_step(params, grads.arrays(), moments, step, config.learning_rate,
                          config.beta1, config.beta2, config.adam_eps)
            else:
                sgd_step(params, grads.arrays(), config.learning_rate)
            total += batch_loss * len(idx)
        report.train_loss.append(total / n)
        val_loss = dataset_loss(model, val)
        if not np.isfinite(val_loss):
            report.seconds = time.perf_counter() - t0
            raise TrainingDivergence(f"station {station_id}: non-finite validation loss at epoch {epoch}", report)
        report.val_loss.append(val_loss)
        if stopper.update(epoch, val_loss):
            best = model.copy()
        log.debug("station %d epoch %d train %.6g val %.6g", station_id, epoch, report.train_loss[-1], val_loss)
        if stopper.should_stop:
            break
    report.best_epoch = stopper.best_epoch
    report.best_val_mse = stopper.best
    report.seconds = time.perf_counter() - t0
    return best, report


# ---------------------------------------------------------------------------
# registry

@dataclass
class RegistryEntry:
    station_id: int
    checkpoint: str
    scaler: str
    best_val_mse: float
    epochs_run: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


class ModelRegistry:
    """Station id -> trained model files, plus stations that failed to train.

    Paths are stored relative to the manifest's directory.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self.entries: dict[int, RegistryEntry] = {}
        self.reports: dict[int, TrainReport] = {}
        self.failures: dict[int, str] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, entry: RegistryEntry, report: TrainReport | None = None) -> None:
        with self._lock:
            if entry.station_id in self.entries:
                raise ValueError(f"station {entry.station_id} already registered")
            self.entries[entry.station_id] = entry
            if report is not None:
                self.reports[entry.station_id] = report

    def fail(self, station_id: int, message: str) -> None:
        with self._lock:
            self.failures[station_id] = message

    def manifest(self) -> str:
        return "".join(self.entries[s].to_json() + "\n" for s in sorted(self.entries))

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(self.manifest())
        fail_path = path.with_name(path.stem + ".failures.jsonl")
        if self.failures:
            fail_path.write_text("".join(
                json.dumps({"station_id": s, "error": self.failures[s]}, sort_keys=True) + "\n"
                for s in sorted(self.failures)
            ))
        elif fail_path.exists():
            fail_path.unlink()

    @classmethod
    def read(cls, path: str | Path) -> "ModelRegistry":
        path = Path(path)
        reg = cls(path.parent)
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                reg.add(RegistryEntry(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad registry record") from exc
        fail_path = path.with_name(path.stem + ".failures.jsonl")
        if fail_path.exists():
            for line in fail_path.read_text().splitlines():
                rec = json.loads(line)
                reg.failures[rec["station_id"]] = rec["error"]
        return reg

    def _resolve(self, rel: str) -> Path:
        return (self.root / rel) if self.root is not None else Path(rel)

    def load_model(self, station_id: int) -> LstmModel:
        return load_checkpoint(self._resolve(self.entries[station_id].checkpoint))

    def load_scaler(self, station_id: int) -> feat.Scaler:
        return feat.Scaler.load(self._resolve(self.entries[station_id].scaler))


def train_all(
    table: ObservationTable,
    station_ids: Sequence[int],
    config: TrainConfig,
    out_dir: str | Path,
    jobs: int = 1,
) -> ModelRegistry:
    """Train one independent model per station and write checkpoints under ``out_dir``.

    Gaps in ``table`` are imputed here; a pollutant column with no data at
    all is filled from the other stations so it can still serve as input,
    but a station whose own PM10/PM2.5 record is empty cannot be a target
    and is recorded as a failure.  A failing station never stops the others.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    registry = ModelRegistry(out_dir)
    if len(set(station_ids)) != len(station_ids):
        raise ValueError("duplicate station ids")

    empty_targets = {s for s, name in empty_pollutant_columns(table) if name in ("pm10", "pm25")}
    if not table.is_complete():
        table = impute_missing(table, spatial_fallback=True)
    n_fit = feat.training_rows(table.n_hours, config.train_frac, config.val_frac, config.T)
    scaler = feat.fit_scaler(table.slice(0, n_fit), config.scaler_mode)
    scaler_path = out_dir / "scaler.txt"
    scaler.save(scaler_path)
    features = feat.transform(scaler, table)

    def job(station_id: int) -> None:
        try:
            if station_id in empty_targets:
                raise feat.FeatureError(f"station {station_id} has no PM observations")
            ds = feat.make_windows(features, table, station_id, config.T)
            splits = feat.split_dataset(ds, config.train_frac, config.val_frac)
            model, report = train_station(splits, station_id, config)
            ckpt = out_dir / f"station_{station_id:02d}.ckpt"
            save_checkpoint(model, ckpt)
            registry.add(
                RegistryEntry(station_id, ckpt.name, scaler_path.name, report.best_val_mse, report.epochs_run),
                report,
            )
            log.info("station %d: best val MSE %.6g after %d epochs", station_id, report.best_val_mse, report.epochs_run)
        except TrainingDivergence as exc:
            registry.fail(station_id, f"divergence: {exc}")
            log.error("%s", exc)
        except (ValueError, ArithmeticError) as exc:
            registry.fail(station_id, str(exc))
            log.error("station %d failed: %s", station_id, exc)

    if jobs <= 1:
        for s in station_ids:
            job(s)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(job, station_ids))
    return registry
