from datetime import datetime, timezone

import numpy as np
import pytest

from finedust.features import HOUR
from finedust.ingest import (
    CLIMATE_VARS,
    N_STATIONS,
    POLLUTANTS,
    ClimateRecord,
    PollutantRecord,
    ObservationTable,
    align_hourly,
    impute_missing,
)
from finedust.synth import SynthConfig, generate

START = datetime(2017, 3, 15, tzinfo=timezone.utc)

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion exercised by a test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    ok, title = _criteria.get(crit[0], (True, crit[1]))
    _criteria[crit[0]] = (ok and report.outcome == "passed", title)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        ok, title = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")


def hand_table(n_hours, fill=None, start=START):
    """Complete table where every cell of hour t, station s, variable j is a simple formula."""
    t = np.arange(n_hours, dtype=float)[:, None, None]
    s = np.arange(N_STATIONS, dtype=float)[None, :, None]
    j = np.arange(len(POLLUTANTS), dtype=float)[None, None, :]
    pol = 1.0 + t + 100.0 * s + 10000.0 * j if fill is None else np.full((n_hours, N_STATIONS, 6), fill)
    clim = np.tile(np.arange(len(CLIMATE_VARS), dtype=float), (n_hours, 1)) + t[:, 0]
    clim[:, 1] = np.arange(n_hours) % 16
    return ObservationTable(start, pol, clim, np.zeros(pol.shape, bool), np.zeros(clim.shape, bool))


def records_from_table(table):
    pol, clim = [], []
    for t, ts in enumerate(table.timestamps):
        for s in range(table.n_stations):
            pol.append(PollutantRecord(s, ts, *(float(v) for v in table.pollutants[t, s])))
        vals = [float(v) for v in table.climate[t]]
        vals[1] = int(vals[1])
        clim.append(ClimateRecord(ts, *vals))
    return pol, clim


@pytest.fixture(scope="session")
def synth_table():
    """300 complete synthetic hours."""
    pol, clim = generate(SynthConfig(n_hours=300, seed=11))
    return impute_missing(align_hourly(pol, clim, pol[0].timestamp, pol[-1].timestamp + HOUR))


@pytest.fixture(scope="session")
def synth_2000():
    pol, clim = generate(SynthConfig(n_hours=2000, seed=7))
    return impute_missing(align_hourly(pol, clim, pol[0].timestamp, pol[-1].timestamp + HOUR))
