import csv
import json
import math

import numpy as np
import pytest

from airvtr.metrics import COLUMNS, MetricsReport, emit, load_report, summarize, weighted_fraction_below


def sample_report(seed=0):
    rng = np.random.default_rng(seed)
    rep = MetricsReport()
    d = 0.0
    for k in range(40):
        phase = "learn" if k < 15 else "return"
        step = float(rng.uniform(0.1, 0.5))
        d += step
        rep.add("frames", k / 15, phase, d, 0.0, 12.0, float(rng.uniform(0, 2)), math.nan, k, 1,
                int(rng.integers(50, 300)), int(k % 3 == 0), step)
    for k in range(12):
        rep.add("localizations", k * 1.0, "return" if k > 1 else "learn", k, k, int(k != 5),
                np.int64(rng.integers(20, 200)), 220, 0, float(rng.uniform(0, 0.3)),
                np.float64(rng.uniform(0, 0.01)), 0.1)
    rep.add("commands", 1.0, 0.1, 0.0, -0.2, 0.01, np.bool_(False))
    rep.add("events", 0.0, "transition", "Idle->Learn")
    rep.time("vo", 3.0)
    return rep


def test_numpy_scalars_are_stored_as_python_values():
    rep = sample_report()
    row = rep.tables["localizations"][0]
    assert type(row[5]) is int and type(row[9]) is float
    assert type(rep.tables["commands"][0][5]) is int


def test_row_width_checked():
    with pytest.raises(ValueError):
        MetricsReport().add("events", 0.0, "x")


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
def test_empty_report_writes_header_only_files(tmp_path, fmt):
    paths = emit(MetricsReport(), tmp_path, fmt)
    for name, cols in COLUMNS.items():
        lines = paths[name].read_text().splitlines()
        assert len(lines) == 1
        if fmt == "csv":
            assert lines[0].split(",") == list(cols)
        else:
            assert json.loads(lines[0])["columns"] == list(cols)
    summary = json.loads(paths["summary"].read_text())
    assert summary["frames"] == 0 and summary["inliers"]["median"] is None


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
def test_round_trip_preserves_summary(tmp_path, fmt):
    rep = sample_report()
    emit(rep, tmp_path, fmt)
    back = load_report(tmp_path, fmt)
    assert summarize(back) == summarize(rep)
    assert json.loads((tmp_path / "summary.json").read_text()) == json.loads(json.dumps(summarize(rep)))


def test_summary_recomputes_from_raw_rows(tmp_path):
    rep = sample_report(3)
    emit(rep, tmp_path, "csv")
    with open(tmp_path / "localizations.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    ok = [r for r in rows if r["phase"] == "return" and r["success"] == "1"]
    inl = sorted(int(r["inliers"]) for r in ok)
    n = len(inl)
    median = (inl[n // 2] + inl[(n - 1) // 2]) / 2
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["inliers"]["median"] == median
    assert summary["inliers"]["count"] == n
    assert summary["localization_failures"] == sum(r["success"] == "0" for r in rows if r["phase"] == "return")
    with open(tmp_path / "frames.csv", newline="") as fh:
        frames = [r for r in csv.DictReader(fh) if r["phase"] == "return"]
    ct = sorted(float(r["cross_track"]) for r in frames)
    assert summary["cross_track"]["max"] == ct[-1]
    total = sum(float(r["distance"]) for r in frames)
    below = sum(float(r["distance"]) for r in frames if float(r["cross_track"]) < 1.5)
    assert summary["cross_track_fraction_below"] == pytest.approx(below / total, abs=1e-15)


def test_timings_kept_out_of_summary(tmp_path):
    paths = emit(sample_report(), tmp_path)
    assert "vo" in json.loads(paths["timings"].read_text())
    assert "vo" not in paths["summary"].read_text()


def test_unwritable_destination(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit(sample_report(), blocker / "sub")


def test_weighted_fraction():
    assert weighted_fraction_below([0.5, 2.0], [3.0, 1.0], 1.5) == 0.75
    assert weighted_fraction_below([], [], 1.5) is None
