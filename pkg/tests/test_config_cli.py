import subprocess
import sys

import pytest
import yaml

from stochtube.cli import EXIT_COMPUTE, EXIT_CONFIG, EXIT_OK, EXIT_PLAN, main
from stochtube.config import (
    SHIPPED,
    ConfigError,
    flag_overrides,
    load_config,
    parse_config,
    shipped_config,
    with_overrides,
)
from stochtube._csv import read_rows


def ou_dict(**changes):
    data = shipped_config("ou").dump()
    for dotted, value in changes.items():
        node = data
        *head, last = dotted.split(".")
        for key in head:
            node = node[key]
        node[last] = value
    return data


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


# ---- schema -----------------------------------------------------------------------

@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_parse(name):
    cfg = shipped_config(name)
    assert cfg.name == name
    assert cfg.schema_version == 1


def test_unknown_keys_rejected():
    data = ou_dict()
    data["bounds"]["detla"] = 0.1
    with pytest.raises(ConfigError, match="detla"):
        parse_config(data)
    data = ou_dict()
    data["extra"] = 1
    with pytest.raises(ConfigError):
        parse_config(data)


@pytest.mark.parametrize("change, fragment", [
    ({"system.x0": [1.0, 2.0]}, "x0"),
    ({"bounds.delta": 1.5}, "delta"),
    ({"bounds.T": 5.0005}, "multiple"),
    ({"metric.source": "riccati"}, "riccati"),
    ({"metric.source": "csv"}, "path"),
    ({"rates.half_widths": [1.0, 1.0]}, "half_widths"),
    ({"system.name": "quadrotor"}, "system.name"),
])
def test_inconsistent_configs(change, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(ou_dict(**change))


def test_schema_key_required():
    data = ou_dict()
    del data["schema"]
    with pytest.raises(ConfigError, match="schema"):
        parse_config(data)
    with pytest.raises(ConfigError):
        parse_config(ou_dict(schema=2))


def test_unknown_experiment():
    with pytest.raises(ConfigError, match="unknown experiment"):
        shipped_config("fig9")


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1, 2\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(bad)


def test_relative_metric_path_resolved(tmp_path):
    p = write_yaml(tmp_path / "c.yaml", ou_dict(**{"metric.source": "csv", "metric.path": "m"}))
    assert load_config(p).metric.path == str((tmp_path / "m").resolve())


def test_round_trip_and_overrides(tmp_path):
    cfg = shipped_config("fig2")
    assert parse_config(yaml.safe_load(cfg.to_yaml())) == cfg
    ov = flag_overrides(out=tmp_path, seed=5, delta=0.01, eps="auto", dt_seg=0.2, n=10)
    new = with_overrides(cfg, ov)
    assert (new.simulation.master_seed, new.simulation.N) == (5, 10)
    assert (new.bounds.delta, new.bounds.eps, new.bounds.dt_seg) == (0.01, "auto", 0.2)
    assert new.output.dir == str(tmp_path)
    assert new.system == cfg.system


# ---- command line -----------------------------------------------------------------

def test_bound_on_ou_writes_four_kinds(tmp_path, capsys):
    out = tmp_path / "b"
    assert main(["bound", "--experiment", "ou", "--out", str(out)]) == EXIT_OK
    _, rows = read_rows(out / "curves.csv")
    assert {r[2] for r in rows} == {"single_time", "trajectory", "trajectory_segmented", "isa_baseline"}
    assert (out / "integrals.csv").exists()
    assert "4 curves" in capsys.readouterr().out


def test_overrides_echoed(tmp_path):
    out = tmp_path / "o"
    assert main(["compare", "--experiment", "ou", "--out", str(out), "--seed", "99", "--delta", "0.05",
                 "--eps", "auto", "--dt-seg", "0.5", "--n", "17"]) == EXIT_OK
    echoed = load_config(out / "resolved_config.yaml")
    assert echoed.simulation.master_seed == 99 and echoed.simulation.N == 17
    assert echoed.bounds.delta == 0.05 and echoed.bounds.eps == "auto" and echoed.bounds.dt_seg == 0.5
    header, _ = read_rows(out / "comparison.csv")
    assert "segmented_below_plain" in header


def test_config_flag_and_validate(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "ou.yaml", ou_dict(**{"simulation.N": 100, "simulation.dt": 0.01}))
    assert main(["validate", "--config", str(cfg), "--out", str(tmp_path / "v")]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4 and all("/100 violations" in ln for ln in lines)
    _, rows = read_rows(tmp_path / "v" / "validation.csv")
    assert len(rows) == 4


def test_simulate_command(tmp_path):
    assert main(["simulate", "--experiment", "ou", "--out", str(tmp_path), "--n", "3"]) == EXIT_OK
    header, rows = read_rows(tmp_path / "trajectories.csv")
    assert header == ["t", "x_1", "kind", "seed"]
    assert {r[2] for r in rows} == {"deterministic", "stochastic"}


def test_config_errors_exit_two(tmp_path, capsys):
    assert main(["bound", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["bound", "--experiment", "nope"]) == EXIT_CONFIG
    bad = write_yaml(tmp_path / "bad.yaml", {**ou_dict(), "surprise": True})
    assert main(["bound", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["bound", "--config", str(bad), "--experiment", "ou"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_computation_error_exits_one(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", ou_dict(**{"metric.source": "csv", "metric.path": "missing",
                                                      "output.dir": str(tmp_path / "x")}))
    assert main(["bound", "--config", str(cfg)]) == EXIT_COMPUTE
    assert "stage 'metric'" in capsys.readouterr().err


def test_verify_plan_without_safe_set_is_config_error(tmp_path):
    assert main(["verify-plan", "--experiment", "ou", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_verify_plan_goal_infeasible_exits_three(tmp_path, capsys):
    data = shipped_config("pvtol").dump()
    data["safe_set"]["goal"]["radius"] = 0.5
    data["rates"]["samples"] = 8
    cfg = write_yaml(tmp_path / "p.yaml", data)
    assert main(["verify-plan", "--config", str(cfg), "--out", str(tmp_path / "p")]) == EXIT_PLAN
    out = capsys.readouterr().out
    assert "plan FAIL" in out and "goal infeasible" in out
    assert (tmp_path / "p" / "plan_report.csv").exists()


def test_verify_plan_shipped_passes(tmp_path):
    assert main(["verify-plan", "--experiment", "pvtol", "--out", str(tmp_path)]) == EXIT_OK


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stochtube", "bound", "--experiment", "ou",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    bad = subprocess.run([sys.executable, "-m", "stochtube", "launch"], capture_output=True, text=True)
    assert bad.returncode == 2
