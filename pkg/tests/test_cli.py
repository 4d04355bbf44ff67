import csv
import json

import pytest

from pinnmpc.bench import ConfigError, Scenario, compare_traces, load_scenario, summarize_trace
from pinnmpc.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, build_parser, main


def _scenario(tmp_path, name="short", **kw):
    d = {"name": name, "benchmark": "b1", "variant": "mechanistic", "horizon": 3, **kw}
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(d))
    return path


def _rows_without_clock(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    j = rows[0].index("wall_clock_seconds")
    return [r[:j] + r[j + 1:] for r in rows]


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_run_writes_trace_and_summary(tmp_path):
    cfg = _scenario(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "short_summary.json").read_text())
    assert summary["steps"] == 3 and summary["failures"] == 0
    assert summary["counts"]["total_vars"] == 430 and summary["model"] == "mechanistic"
    assert (out / "short_trace.csv").is_file()


def test_run_is_deterministic(tmp_path):
    cfg = _scenario(tmp_path)
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")])
    assert _rows_without_clock(tmp_path / "a" / "short_trace.csv") == _rows_without_clock(
        tmp_path / "b" / "short_trace.csv")


def test_solver_failure_exit_code(tmp_path):
    cfg = _scenario(tmp_path, "capped", solver={"max_iter": 1})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_FAILURE
    assert summarize_trace(tmp_path / "capped_trace.csv")["failures"] > 0


@pytest.mark.parametrize("extra", [{"variant": "ece-fs", "model": "pinn", "params": "nowhere.nnp"},
                                   {"benchmark": "b2", "variant": "efe", "model": "pinn", "params": "x.nnp"},
                                   {"variant": "ece-rs", "model": "picnn", "params": "x.nnp"},
                                   {"variant": "simplex"},
                                   {"solver": {"tolerance": 1e-3}},
                                   {"colour": "blue"}])
def test_bad_scenarios_exit_config(tmp_path, extra):
    cfg = _scenario(tmp_path, "bad", **extra)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_missing_and_malformed_config(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["run"]) == EXIT_CONFIG


def test_compare_self_is_zero(tmp_path):
    main(["run", "--config", str(_scenario(tmp_path)), "--out", str(tmp_path)])
    trace = tmp_path / "short_trace.csv"
    assert main(["compare", "--baseline", str(trace), str(trace), "--out", str(tmp_path / "cmp")]) == EXIT_OK
    res = json.loads((tmp_path / "cmp" / "comparison.json").read_text())["short_trace"]
    assert res["max_state_metric"] == 0.0 and res["max_control_metric"] == 0.0
    assert res["verdict"] == "consistent"
    table = (tmp_path / "cmp" / "short_trace_vs_short_trace.csv").read_text().splitlines()
    assert len(table) == 4


def test_compare_errors(tmp_path):
    main(["run", "--config", str(_scenario(tmp_path)), "--out", str(tmp_path)])
    main(["run", "--config", str(_scenario(tmp_path, "longer", horizon=4)), "--out", str(tmp_path)])
    assert main(["compare", "--baseline", str(tmp_path / "short_trace.csv"),
                 str(tmp_path / "missing.csv")]) == EXIT_CONFIG
    assert main(["compare", "--baseline", str(tmp_path / "short_trace.csv"),
                 str(tmp_path / "longer_trace.csv")]) == EXIT_CONFIG
    assert main(["compare", "--baseline", str(tmp_path / "short_trace.csv")]) == EXIT_CONFIG
    with pytest.raises(ConfigError):
        compare_traces(tmp_path / "longer_trace.csv", tmp_path / "short_trace.csv")


def test_train_writes_artifacts(tmp_path):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"epochs": 2, "n_samples": 200, "batch_size": 32}))
    code = main(["train", "--benchmark", "b1", "--arch", "pinn", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == EXIT_OK
    meta = json.loads((tmp_path / "b1_pinn_meta.json").read_text())
    assert meta["config"]["train"]["epochs"] == 2 and "config_digest" in meta
    assert len((tmp_path / "b1_pinn_loss.csv").read_text().splitlines()) == 4
    assert (tmp_path / "b1_pinn.nnp").is_file()


def test_train_config_errors(tmp_path):
    assert main(["train", "--benchmark", "b2", "--arch", "pinn", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path)]) == EXIT_CONFIG
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"learning": 2}))
    assert main(["train", "--benchmark", "b1", "--arch", "pinn", "--config", str(cfg)]) == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(tmp_path):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"epochs": 3, "n_samples": 100, "batch_size": 10, "lr0": 1e150}))
    code = main(["train", "--benchmark", "b1", "--arch", "pinn", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == EXIT_FAILURE


def test_suite_runs_and_reports(tmp_path):
    a = _scenario(tmp_path, "base")
    b = _scenario(tmp_path, "other")
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps({"runs": [str(a), {"scenario": str(b), "repetitions": 2}],
                                 "baselines": {"b1": "base"}}))
    assert main(["suite", "--config", str(suite), "--out", str(tmp_path / "s")]) == EXIT_OK
    report = json.loads((tmp_path / "s" / "suite_report.json").read_text())
    assert set(report) == {"base", "other_r1", "other_r2"}
    assert report["other_r1"]["distance_to_baseline"]["verdict"] == "consistent"


def test_scenario_roundtrip(tmp_path):
    sc = load_scenario(_scenario(tmp_path, "rt", seed=3))
    assert Scenario.from_dict(sc.to_dict(), base_dir=sc.base_dir) == sc
    assert load_scenario(_scenario(tmp_path, "rt2"), {"horizon": 7}).horizon == 7


def test_shipped_scenarios_load():
    from importlib import resources
    names = [p.name for p in resources.files("pinnmpc").joinpath("scenarios").iterdir()
             if p.name.endswith(".json") and not p.name.startswith("suite")]
    assert len(names) >= 10
    for n in names:
        load_scenario(resources.files("pinnmpc").joinpath("scenarios", n))
