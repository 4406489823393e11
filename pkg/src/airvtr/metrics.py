"""Run metrics: raw per-row tables, summary statistics and file emitters.

Schema version 1. Tables and columns:

frames          t, phase, x, y, z, cross_track, cross_track_est, trunk,
                vo_ok, vo_inliers, keyframe, distance
localizations   t, phase, vertex, trunk, success, inliers, matches,
                corrupted_inliers, vehicle_error, camera_error,
                gt_translation_error
commands        t, z_rate, yaw_rate, pitch, roll, saturated
events          t, kind, detail

Stage timings are wall-clock and therefore written to a separate
``timings.json`` that is excluded from determinism checks.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

COLUMNS = {
    "frames": (
        "t", "phase", "x", "y", "z", "cross_track", "cross_track_est", "trunk",
        "vo_ok", "vo_inliers", "keyframe", "distance",
    ),
    "localizations": (
        "t", "phase", "vertex", "trunk", "success", "inliers", "matches",
        "corrupted_inliers", "vehicle_error", "camera_error", "gt_translation_error",
    ),
    "commands": ("t", "z_rate", "yaw_rate", "pitch", "roll", "saturated"),
    "events": ("t", "kind", "detail"),
}
_TEXT = {"phase", "kind", "detail"}
_INT = {"trunk", "vo_ok", "vo_inliers", "keyframe", "vertex", "success", "inliers", "matches",
        "corrupted_inliers", "saturated"}

# cross-track bound used for the length-weighted fraction
CROSS_TRACK_BOUND = 1.5


@dataclass
class MetricsReport:
    tables: dict[str, list[tuple]] = field(default_factory=lambda: {k: [] for k in COLUMNS})
    timings: dict[str, list[float]] = field(default_factory=dict)
    status: str = "complete"
    exit_reason: str = ""

    def add(self, table: str, *row) -> None:
        if len(row) != len(COLUMNS[table]):
            raise ValueError(f"{table} row has {len(row)} fields, expected {len(COLUMNS[table])}")
        self.tables[table].append(tuple(_plain(v) for v in row))

    def column(self, table: str, name: str, where=None) -> np.ndarray:
        i = COLUMNS[table].index(name)
        rows = self.tables[table]
        if where is not None:
            rows = [r for r in rows if where(dict(zip(COLUMNS[table], r)))]
        return np.array([r[i] for r in rows], dtype=object if name in _TEXT else float)

    def time(self, stage: str, ms: float) -> None:
        self.timings.setdefault(stage, []).append(ms)

    def summary(self) -> dict:
        return summarize(self)


def _plain(v):
    # numpy scalars would leak their repr into the text formats
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def _stats(x: np.ndarray) -> dict:
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if len(x) == 0:
        return {"count": 0, "median": None, "mean": None, "variance": None, "max": None}
    return {
        "count": int(len(x)),
        "median": float(np.median(x)),
        "mean": float(np.mean(x)),
        "variance": float(np.var(x)),
        "max": float(np.max(x)),
    }


def weighted_fraction_below(values: np.ndarray, weights: np.ndarray, bound: float) -> float | None:
    """Fraction of total weight (path length) whose value is below ``bound``."""
    w = np.asarray(weights, dtype=float)
    v = np.asarray(values, dtype=float)
    total = float(w.sum())
    if total <= 0.0:
        return None
    return float(w[v < bound].sum() / total)


def summarize(report: MetricsReport) -> dict:
    ret = lambda r: r["phase"] == "return"  # noqa: E731
    loc_ok = lambda r: r["phase"] == "return" and r["success"] == 1  # noqa: E731
    ct = report.column("frames", "cross_track", ret)
    dist = report.column("frames", "distance", ret)
    success = report.column("localizations", "success", ret)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "status": report.status,
        "exit_reason": report.exit_reason,
        "frames": len(report.tables["frames"]),
        "return_frames": int(len(ct)),
        "localizations": int(len(success)),
        "localization_failures": int(np.sum(success == 0)),
        "inliers": _stats(report.column("localizations", "inliers", loc_ok)),
        "vehicle_error": _stats(report.column("localizations", "vehicle_error", loc_ok)),
        "camera_error": _stats(report.column("localizations", "camera_error", loc_ok)),
        "cross_track": _stats(ct),
        "cross_track_fraction_below": weighted_fraction_below(ct, dist, CROSS_TRACK_BOUND),
        "return_length": float(dist.sum()) if len(dist) else 0.0,
        "teach_keyframes": int(np.sum(report.column("frames", "keyframe", lambda r: r["phase"] == "learn"))),
    }
    return summary


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def emit(report: MetricsReport, directory: str | Path, fmt: str = "csv") -> dict[str, Path]:
    """Write raw tables, summary.json and timings.json under ``directory``."""
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unknown format {fmt!r}")
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = {}
    for name, cols in COLUMNS.items():
        if fmt == "csv":
            p = out / f"{name}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(cols)
                for row in report.tables[name]:
                    w.writerow([_fmt(v) for v in row])
        else:
            p = out / f"{name}.jsonl"
            with open(p, "w") as fh:
                fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "columns": list(cols)}) + "\n")
                for row in report.tables[name]:
                    rec = {c: (None if isinstance(v, float) and math.isnan(v) else v) for c, v in zip(cols, row)}
                    fh.write(json.dumps(rec) + "\n")
        paths[name] = p
    p = out / "summary.json"
    p.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    paths["summary"] = p
    t = out / "timings.json"
    t.write_text(json.dumps(timing_summary(report), indent=2, sort_keys=True) + "\n")
    paths["timings"] = t
    return paths


def _parse(col: str, s):
    if s is None:
        return float("nan")
    if col in _TEXT:
        return s
    if col in _INT:
        return int(s)
    return float(s)


def load_report(directory: str | Path, fmt: str = "csv") -> MetricsReport:
    """Read the raw tables written by ``emit`` back into a report."""
    out = Path(directory)
    rep = MetricsReport()
    summary = json.loads((out / "summary.json").read_text())
    rep.status = summary.get("status", "complete")
    rep.exit_reason = summary.get("exit_reason", "")
    for name, cols in COLUMNS.items():
        if fmt == "csv":
            with open(out / f"{name}.csv", newline="") as fh:
                rows = list(csv.reader(fh))
            if tuple(rows[0]) != cols:
                raise ValueError(f"{name}.csv has unexpected columns {rows[0]}")
            for r in rows[1:]:
                rep.tables[name].append(tuple(_parse(c, v) for c, v in zip(cols, r)))
        else:
            with open(out / f"{name}.jsonl") as fh:
                header = json.loads(fh.readline())
                if tuple(header["columns"]) != cols:
                    raise ValueError(f"{name}.jsonl has unexpected columns")
                for line in fh:
                    rec = json.loads(line)
                    rep.tables[name].append(tuple(_parse(c, rec[c]) for c in cols))
    return rep


def timing_summary(report: MetricsReport) -> dict:
    return {
        stage: {"count": len(v), "mean_ms": float(np.mean(v)), "max_ms": float(np.max(v))}
        for stage, v in sorted(report.timings.items())
        if v
    }


def comparison_table(parameter: str, values, summaries: list[dict]) -> str:
    """Plain-text table comparing sweep summaries."""
    head = f"{parameter:>24} {'status':>10} {'loc fail':>8} {'inl med':>8} {'inl var':>10} " \
           f"{'veh med':>8} {'cam med':>8} {'xt med':>7} {'xt max':>7} {'<1.5m':>6}"
    lines = [head]

    def f(x, spec):
        return format(x, spec) if x is not None else "-"

    for v, s in zip(values, summaries):
        lines.append(
            f"{v:>24} {s['status']:>10} {s['localization_failures']:>8} "
            f"{f(s['inliers']['median'], '8.1f')} {f(s['inliers']['variance'], '10.1f')} "
            f"{f(s['vehicle_error']['median'], '8.4f')} {f(s['camera_error']['median'], '8.4f')} "
            f"{f(s['cross_track']['median'], '7.3f')} {f(s['cross_track']['max'], '7.3f')} "
            f"{f(s['cross_track_fraction_below'], '6.3f')}"
        )
    return "\n".join(lines) + "\n"
