import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from airvtr.cli import main
from airvtr.graph import load_graph
from airvtr.metrics import load_report
from airvtr.runner import EXIT_CONFIG, EXIT_OK, EXIT_SAFETY, Polyline, run_scenario, sweep
from airvtr.scenario import ConfigError, LocalizationSettings, dump_scenario

from _sim import tiny_scenario

RAW = ("frames.csv", "localizations.csv", "commands.csv", "events.csv", "summary.json", "graph.bin")


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return run_scenario(tiny_scenario(), out)


def test_polyline_geometry():
    p = Polyline([[0, 0, 0], [10, 0, 0], [10, 5, 0]])
    assert p.length == 15.0
    np.testing.assert_allclose(p.point(12.0), [10, 2, 0])
    s, d = p.project(np.array([4.0, 1.0, 0.0]))
    assert (s, d) == (4.0, 1.0)
    np.testing.assert_allclose(p.reversed().point(0.0), [10, 5, 0])
    assert p.truncated(12.0).length == pytest.approx(12.0)


def test_tiny_run_completes(tiny_run):
    s = tiny_run.summary
    assert tiny_run.exit_code == EXIT_OK
    assert s["status"] == "complete"
    assert s["localizations"] > 5 and s["localization_failures"] == 0
    kinds = [e[2] for e in tiny_run.report.tables["events"] if e[1] == "transition"]
    assert kinds == ["Idle->Learn", "Learn->Return", "Return->Hover"]
    assert tiny_run.cache_misses == 0


def test_run_is_byte_identical(tiny_run, tmp_path):
    again = run_scenario(tiny_scenario(), tmp_path)
    for name in RAW:
        assert (tiny_run.output_dir / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_saved_graph_matches_run(tiny_run):
    g = load_graph(tiny_run.output_dir / "graph.bin")
    assert g.privileged_path == tiny_run.graph.privileged_path
    # the file is written at the start of the return: teach vertices only
    assert len(g) == len(g.privileged_path)
    for key, e in g.edges.items():
        assert e.transform.matrix().tobytes() == tiny_run.graph.edges[key].transform.matrix().tobytes()


def test_single_value_sweep_equals_run(tiny_run, tmp_path):
    (res,) = sweep(tiny_scenario(), "return_speed", [3.0], tmp_path)
    sub = tmp_path / "return_speed=3"
    for name in RAW:
        assert (tiny_run.output_dir / name).read_bytes() == (sub / name).read_bytes(), name
    assert "return_speed" in (tmp_path / "sweep_summary.txt").read_text()


def test_sweep_shares_teach_metrics(tmp_path):
    results = sweep(tiny_scenario(), "return_altitude_offset", [0.0, 2.0], tmp_path)
    teach = [[r for r in res.report.tables["frames"] if r[1] == "learn"] for res in results]
    assert teach[0] == teach[1]
    assert results[0].summary["teach_keyframes"] == results[1].summary["teach_keyframes"]


def test_empty_sweep_rejected():
    with pytest.raises(ConfigError):
        sweep(tiny_scenario(), "return_speed", [])


def test_safety_abort_flushes_metrics(tmp_path):
    sc = tiny_scenario(localization=replace(LocalizationSettings(), min_inliers=100_000))
    res = run_scenario(sc, tmp_path)
    assert res.exit_code == EXIT_SAFETY
    back = load_report(tmp_path)
    assert back.status == "aborted" and back.exit_reason == "localisation"
    assert len(back.tables["frames"]) == len(res.report.tables["frames"]) > 0
    assert any("SafetyAbort" in e[2] for e in back.tables["events"])


# --- CLI -------------------------------------------------------------------


def test_cli_run_and_dump_graph(tmp_path, capsys):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(dump_scenario(tiny_scenario()))
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--out", str(out), "--format", "jsonl"]) == EXIT_OK
    assert (out / "frames.jsonl").exists()
    capsys.readouterr()
    assert main(["dump-graph", str(out / "graph.bin")]) == EXIT_OK
    text = capsys.readouterr().out
    assert text.startswith("# pose graph:") and "\nE 0->1 priv=1" in text


def test_cli_config_error_exit_code(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("teach:\n  sped: 3\n")
    assert main(["run", str(cfg)]) == EXIT_CONFIG
    assert main(["sweep", str(cfg), "--param", "return_speed", "--values", "3"]) == EXIT_CONFIG


def test_cli_bad_values_and_graph(tmp_path):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(dump_scenario(tiny_scenario()))
    assert main(["sweep", str(cfg), "--param", "return_speed", "--values", "fast"]) == EXIT_CONFIG
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"not a graph")
    assert main(["dump-graph", str(junk)]) == EXIT_CONFIG


def test_cli_safety_exit_code(tmp_path):
    cfg = tmp_path / "abort.yaml"
    sc = tiny_scenario(localization=replace(LocalizationSettings(), min_inliers=100_000))
    cfg.write_text(dump_scenario(sc))
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_SAFETY


def test_module_entry_point(tiny_run):
    proc = subprocess.run(
        [sys.executable, "-m", "airvtr", "dump-graph", str(tiny_run.output_dir / "graph.bin")],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0 and "pose graph" in proc.stdout
