import json

import pytest

from taxigrid.cli import EXIT_CONFIG, EXIT_DATA, EXIT_MISSING, EXIT_OK, main

PIPELINE = ["synth", "preprocess", "estimate", "fit", "calibrate", "forecast", "evaluate", "report"]


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    cfg = root / "demo.json"
    assert main(["config", "--demo", "-o", str(cfg)]) == EXIT_OK
    wd = root / "run"
    for stage in PIPELINE:
        assert main([stage, "-c", str(cfg), "-w", str(wd)]) == EXIT_OK, stage
    return cfg, wd


def test_demo_pipeline_artifacts(demo):
    _, wd = demo
    for rel in ["synth/gps.csv", "synth/truth_fd.csv", "preprocess/routes.jsonl", "estimate/snapshots.csv",
                "estimate/samples.csv", "fit/fd.csv", "calibrate/fd.csv", "calibrate/convergence.csv",
                "forecast/forecasts.csv", "evaluate/report.csv", "evaluate/travel_time.csv",
                "report/table.csv", "report/summary.txt"]:
        assert (wd / rel).is_file(), rel
    methods = [ln.split(",")[0] for ln in (wd / "report/table.csv").read_text().splitlines()[1:]]
    assert "model" in methods and "extrapolation" in methods
    stats = json.loads((wd / "preprocess/ingest_stats.json").read_text())
    assert stats["input"] > 0


def test_estimate_rerun_identical(demo):
    cfg, wd = demo
    before = {n: (wd / "estimate" / n).read_bytes() for n in ("snapshots.csv", "samples.csv")}
    assert main(["estimate", "-c", str(cfg), "-w", str(wd)]) == EXIT_OK
    for n, b in before.items():
        assert (wd / "estimate" / n).read_bytes() == b


def test_workers_do_not_change_preprocess(demo, tmp_path):
    cfg, wd = demo
    lines = (wd / "synth/gps.csv").read_text().splitlines(keepends=True)
    small = tmp_path / "gps.csv"
    small.write_text("".join(lines[:30000]))
    out = []
    for w in ("1", "3"):
        d = tmp_path / f"w{w}"
        assert main(["preprocess", "-c", str(cfg), "-w", str(d), "--input", str(small), "--workers", w]) == EXIT_OK
        out.append((d / "preprocess/routes.jsonl").read_bytes())
    assert out[0] == out[1] and len(out[0]) > 0


def test_missing_artifact_exits(tmp_path, capsys):
    assert main(["fit", "-w", str(tmp_path)]) == EXIT_MISSING
    assert "estimate" in capsys.readouterr().err


def test_report_on_empty_dir(tmp_path):
    assert main(["report", "-w", str(tmp_path)]) == EXIT_MISSING


@pytest.mark.parametrize("argv", [
    ["estimate", "--set", "fit.topfrac=1"],
    ["estimate", "--set", "grid.nx=-3"],
    ["estimate", "-c", "/nonexistent/config.json"],
    ["estimate", "--workers", "0"],
])
def test_bad_config_exits(argv, tmp_path, capsys):
    assert main(argv + ["-w", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_malformed_data_exits(tmp_path):
    (tmp_path / "estimate").mkdir()
    (tmp_path / "estimate/samples.csv").write_text("this,is\nnot,samples\n")
    assert main(["fit", "-w", str(tmp_path)]) == EXIT_DATA
    bad = tmp_path / "gps.csv"
    bad.write_text("garbage\n1,2\n")
    assert main(["preprocess", "-w", str(tmp_path), "--input", str(bad)]) == EXIT_DATA


def test_config_prints_json(capsys):
    assert main(["config", "--set", "seed=11"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["seed"] == 11
