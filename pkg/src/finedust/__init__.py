"""Hourly PM10/PM2.5 forecasting with one stacked numpy LSTM per monitoring station."""

from .features import Scaler, WindowedDataset, fit_scaler, invert_target, make_windows, split_dataset, transform
from .ingest import ObservationTable, align_hourly, impute_missing, load_table, parse_climate_csv, parse_pollutant_csv
from .net import LstmModel, init_params, load_checkpoint, model_backward, model_forward, save_checkpoint
from .train import ModelRegistry, TrainConfig, train_all, train_station

__version__ = "0.1.0"
