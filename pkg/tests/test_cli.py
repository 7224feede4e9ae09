"""Config parsing, metrics output, and the command-line entry points."""

import numpy as np
import pytest

from onrap.cli import (
    METRICS_COLUMNS,
    ConfigError,
    build_scenario,
    main,
    read_config,
    write_metrics_csv,
)
from onrap.simulator import EpisodeMetrics


def write(tmp_path, text, name="cfg.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_read_config_typed_values(tmp_path):
    path = write(tmp_path, "[planner]\nsigma = 2.0\n[run]\nepisodes = 3\n")
    cfg = read_config(path)
    assert cfg["planner"]["sigma"] == 2.0
    assert cfg["run"]["episodes"] == 3


def test_read_config_rejects_unknown_section(tmp_path):
    path = write(tmp_path, "[nope]\nx = 1\n")
    with pytest.raises(ConfigError, match="nope"):
        read_config(path)


def test_read_config_rejects_unknown_key(tmp_path):
    path = write(tmp_path, "[planner]\nbogus = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        read_config(path)


def test_read_config_rejects_bad_value(tmp_path):
    path = write(tmp_path, "[run]\nepisodes = many\n")
    with pytest.raises(ConfigError, match="many"):
        read_config(path)


def test_read_config_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        read_config("/nonexistent/cfg.ini")


def test_build_scenario_defaults_and_overrides(tmp_path):
    scenario = build_scenario({})
    assert scenario.params.n_steps == 20
    assert scenario.cell_size == 0.25
    cfg = read_config(write(tmp_path, "[planner]\nsigma = 1.0\n"
                                      "[grid]\ncell_size = 0.5\n"))
    scenario = build_scenario(cfg)
    assert scenario.params.risk.sigma == 1.0
    assert scenario.cell_size == 0.5


def test_build_scenario_rejects_bad_heading_box(tmp_path):
    cfg = read_config(write(tmp_path, "[planner]\npsi_max = 1.0\n"))
    with pytest.raises(ConfigError, match="psi_max"):
        build_scenario(cfg)


def metrics_fixture():
    m = EpisodeMetrics(
        planner="onrap", seed=5, runtime_mean=0.05, runtime_max=0.2,
        success=True, completed=True, min_clearance=1.5, avg_clearance=3.0,
        max_curvature=0.7, path_length=33.0, n_cycles=60,
    )
    return {"onrap": {"episodes": [m], "aggregate": {}}}


def test_write_metrics_csv_columns_and_timing(tmp_path):
    out = tmp_path / "metrics.csv"
    write_metrics_csv(metrics_fixture(), out)
    lines = out.read_text().strip().split("\n")
    assert lines[0] == ",".join(METRICS_COLUMNS)
    fields = lines[1].split(",")
    assert fields[:3] == ["0", "onrap", "5"]
    assert fields[5] == "1"  # success as 0/1
    write_metrics_csv(metrics_fixture(), out, timing=False)
    fields = out.read_text().strip().split("\n")[1].split(",")
    assert fields[3] == "0.000000" and fields[4] == "0.000000"


def run_config(tmp_path):
    return write(tmp_path, "\n".join([
        "[scenario]",
        "route_length = 12.0",
        "obstacle_density = 0.02",
        "[run]",
        "timing = none",
    ]))


def test_main_run_writes_outputs(tmp_path):
    out = tmp_path / "out"
    code = main(["run", "--config", run_config(tmp_path), "--episodes", "1",
                 "--planners", "astar", "--seed", "1", "--out", str(out)])
    assert code == 0
    assert (out / "metrics.csv").exists()
    assert (out / "summary.txt").exists()


def test_main_run_deterministic_metrics(tmp_path):
    cfg = run_config(tmp_path)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", "--config", cfg, "--episodes", "2",
                     "--planners", "astar,onrap", "--seed", "3",
                     "--out", str(out)]) == 0
        outs.append((out / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]


def test_main_run_rejects_unknown_planner(tmp_path, capsys):
    code = main(["run", "--planners", "dijkstra", "--out", str(tmp_path)])
    assert code == 2
    assert "unknown planner" in capsys.readouterr().err


def test_main_run_rejects_bad_config(tmp_path, capsys):
    bad = write(tmp_path, "[planner]\nbogus = 1\n")
    code = main(["run", "--config", bad, "--out", str(tmp_path / "o")])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_main_replay_roundtrip(tmp_path):
    out = tmp_path / "out"
    cfg = run_config(tmp_path)
    assert main(["run", "--config", cfg, "--episodes", "1",
                 "--planners", "astar", "--plots", "on",
                 "--out", str(out)]) == 0
    trace = out / "trace_astar.csv"
    assert trace.exists()
    replay_out = tmp_path / "replay"
    assert main(["replay", str(trace), "--out", str(replay_out)]) == 0
    assert (replay_out / "overlay.png").exists()


def test_main_replay_bad_trace(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    assert main(["replay", str(bad), "--out", str(tmp_path)]) == 2
    assert "replay error" in capsys.readouterr().err


def test_main_validate_params_reports_bound(tmp_path, capsys):
    assert main(["validate-params"]) == 0
    text = capsys.readouterr().out
    assert "6.93" in text
    assert "PASS" in text
    assert "0 warning(s)" in text
    weak = write(tmp_path, "[planner]\nlambda_grid = 5.0\n")
    assert main(["validate-params", "--config", weak]) == 0
    assert "WARNING" in capsys.readouterr().out
