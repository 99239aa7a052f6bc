"""Command-line entry point: synth, check, train, eval, predict, plot.

Every successful command prints a one-line JSON summary as its last line
on stdout.  Exit codes: 0 success, 2 bad arguments, 3 data errors,
4 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import features as feat
from .evaluation import SeriesExport, emit_plot, evaluate, predict_series, render_table
from .ingest import format_timestamp, impute_missing, load_table
from .net import CheckpointError
from .synth import SynthConfig, write_dataset
from .train import DISTRICT_STATIONS, ModelRegistry, TrainConfig, TrainingDivergence, train_all

log = logging.getLogger("finedust")

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
RUN_FILE = "run.json"
REGISTRY_FILE = "registry.jsonl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGS, f"error[args]: {self.prog}: {message}\n")


def _station_list(text: str) -> list[int]:
    try:
        ids = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad station list {text!r}")
    if not ids:
        raise argparse.ArgumentTypeError("empty station list")
    return ids


def _add_data_flags(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--pollutants", required=required, help="pollutant CSV (station_id,timestamp,so2,...)")
    p.add_argument("--climate", required=required, help="climate CSV (timestamp,wind_speed,wind_dir,...)")
    p.add_argument("--source-tz", default=None, help="time zone of naive timestamps in the CSVs (default UTC)")
    p.add_argument("--start", default=None, help="first hour to use, ISO-8601 (default: earliest record)")
    p.add_argument("--end", default=None, help="hour after the last one to use (default: latest record + 1h)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="finedust", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic pollutant/climate dataset", allow_abbrev=False)
    p.add_argument("--out", required=True, help="output directory for pollutants.csv and climate.csv")
    p.add_argument("--hours", type=int, default=2000, help="number of hourly rows")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--noise-std", type=float, default=1.0, help="noise multiplier")
    p.add_argument("--gap-fraction", type=float, default=0.0, help="fraction of cells to blank, in [0, 0.5)")
    p.add_argument("--start-time", default="2017-01-01T00:00", help="timestamp of the first row (UTC)")

    p = sub.add_parser("check", help="parse, align and impute input files; report gaps", allow_abbrev=False)
    _add_data_flags(p, required=True)

    p = sub.add_parser("train", help="train one model per station", allow_abbrev=False)
    _add_data_flags(p, required=True)
    p.add_argument("--stations", type=_station_list, default=list(DISTRICT_STATIONS),
                   help="comma-separated target station ids (default 1..25)")
    p.add_argument("--config", default=None, help="flat TOML training config")
    p.add_argument("--out", required=True, help="output directory for checkpoints and registry.jsonl")
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    p.add_argument("--epochs", type=int, default=None, help="epochs (overrides config)")
    p.add_argument("--batch-size", type=int, default=None, help="mini-batch size (overrides config)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (overrides config)")
    p.add_argument("--patience", type=int, default=None, help="early-stop patience, 0 = off (overrides config)")
    p.add_argument("--jobs", type=int, default=1, help="stations trained in parallel")

    p = sub.add_parser("eval", help="test-set MSE table for a trained registry", allow_abbrev=False)
    p.add_argument("--registry", required=True, help="registry.jsonl written by train")
    p.add_argument("--format", choices=("text", "csv"), default="text", help="table format")
    p.add_argument("--output", default=None, help="also write the table to this file")
    _add_data_flags(p, required=False)

    p = sub.add_parser("predict", help="hourly predictions for one station and day", allow_abbrev=False)
    p.add_argument("--registry", required=True, help="registry.jsonl written by train")
    p.add_argument("--station", type=int, required=True, help="target station id")
    p.add_argument("--day", required=True, help="day to predict, YYYY-MM-DD")
    p.add_argument("--tz", default=None, help="time zone the day is taken in (default UTC)")
    p.add_argument("--out", required=True, help="series CSV output path")
    _add_data_flags(p, required=False)

    p = sub.add_parser("plot", help="SVG of a predicted-vs-observed series", allow_abbrev=False)
    p.add_argument("--series", required=True, help="series CSV written by predict")
    p.add_argument("--out", required=True, help="SVG output path")
    p.add_argument("--title", default=None, help="figure title")
    return parser


def _summary(**fields) -> str:
    return json.dumps(fields, sort_keys=True)


def _load_run(registry_path: Path, args) -> tuple[dict, TrainConfig]:
    run_path = registry_path.parent / RUN_FILE
    run = json.loads(run_path.read_text()) if run_path.exists() else {}
    for key in ("pollutants", "climate"):
        if run.get(key):
            run[key] = str(registry_path.parent / run[key])  # stored relative to the run directory
    for key in ("pollutants", "climate", "source_tz", "start", "end"):
        value = getattr(args, key, None)
        if value is not None:
            run[key] = value
    if not run.get("pollutants") or not run.get("climate"):
        raise UsageError(f"no {RUN_FILE} next to the registry; pass --pollutants and --climate")
    return run, TrainConfig.from_mapping(run.get("config", {}))


def _table_from(run: dict):
    table = load_table(run["pollutants"], run["climate"], run.get("start"), run.get("end"),
                       run.get("source_tz"), impute=False)
    return impute_missing(table, spatial_fallback=True)


def cmd_synth(args) -> tuple[int, str]:
    config = SynthConfig(n_hours=args.hours, seed=args.seed, noise_std=args.noise_std, start=args.start_time)
    pol, clim = write_dataset(config, args.out, args.gap_fraction)
    return EXIT_OK, _summary(command="synth", pollutants=str(pol), climate=str(clim),
                             hours=args.hours, seed=args.seed, gap_fraction=args.gap_fraction)


def cmd_check(args) -> tuple[int, str]:
    raw = load_table(args.pollutants, args.climate, args.start, args.end, args.source_tz, impute=False)
    table = impute_missing(raw)
    return EXIT_OK, _summary(
        command="check", start=format_timestamp(table.start), end=format_timestamp(table.end),
        hours=table.n_hours, stations=table.n_stations, missing_cells=raw.n_missing(),
        imputed_cells=int(table.pollutant_mask.sum() + table.climate_mask.sum()),
    )


def cmd_train(args) -> tuple[int, str]:
    overrides = {"seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size,
                 "learning_rate": args.lr, "early_stop_patience": args.patience}
    if args.config:
        config = TrainConfig.from_file(args.config, **overrides)
    else:
        config = TrainConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})
    table = load_table(args.pollutants, args.climate, args.start, args.end, args.source_tz, impute=False)
    out = Path(args.out)
    registry = train_all(table, args.stations, config, out, jobs=args.jobs)
    registry.write(out / REGISTRY_FILE)
    run = {
        "pollutants": os.path.relpath(args.pollutants, out),
        "climate": os.path.relpath(args.climate, out),
        "source_tz": args.source_tz, "start": args.start, "end": args.end,
        "config": {k: getattr(config, k) for k in config.__dataclass_fields__},
    }
    (out / RUN_FILE).write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")
    code = EXIT_OK
    if registry.failures:
        diverged = any(msg.startswith("divergence") for msg in registry.failures.values())
        code = EXIT_DIVERGED if diverged else EXIT_DATA
        for s, msg in sorted(registry.failures.items()):
            print(f"error[{'train' if msg.startswith('divergence') else 'data'}]: station {s}: {msg}", file=sys.stderr)
    return code, _summary(command="train", registry=str(out / REGISTRY_FILE), trained=sorted(registry.entries),
                          failed=sorted(registry.failures), seed=config.seed)


def cmd_eval(args) -> tuple[int, str]:
    registry_path = Path(args.registry)
    registry = ModelRegistry.read(registry_path)
    if not registry.entries:
        raise UsageError("registry has no trained stations")
    run, config = _load_run(registry_path, args)
    table = _table_from(run)
    reports = []
    for s in sorted(registry.entries):
        scaler = registry.load_scaler(s)
        _, (_, _, test) = feat.prepare(table, s, config.T, config.train_frac, config.val_frac, scaler=scaler)
        reports.append(evaluate(registry.load_model(s), scaler, test))
    text = render_table(reports, args.format)
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK, _summary(command="eval", stations=[r.station_id for r in reports],
                             test_mse={str(r.station_id): r.test_mse for r in reports})


def cmd_predict(args) -> tuple[int, str]:
    registry_path = Path(args.registry)
    registry = ModelRegistry.read(registry_path)
    if args.station not in registry.entries:
        raise UsageError(f"station {args.station} is not in the registry")
    run, config = _load_run(registry_path, args)
    table = _table_from(run)
    series = predict_series(registry.load_model(args.station), registry.load_scaler(args.station), table,
                            args.station, args.day, config.T, args.tz)
    series.write_csv(args.out)
    return EXIT_OK, _summary(command="predict", station=args.station, day=args.day, rows=len(series), out=args.out)


def cmd_plot(args) -> tuple[int, str]:
    series = SeriesExport.read_csv(args.series)
    emit_plot(series, args.out, args.title)
    return EXIT_OK, _summary(command="plot", rows=len(series), out=args.out)


COMMANDS = {
    "synth": cmd_synth, "check": cmd_check, "train": cmd_train,
    "eval": cmd_eval, "predict": cmd_predict, "plot": cmd_plot,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code, summary = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error[args]: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except TrainingDivergence as exc:
        print(f"error[train]: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError, KeyError, CheckpointError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(summary)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
