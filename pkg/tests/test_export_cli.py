import json

import numpy as np
import pytest

from cpfmpc.sim.cli import EXIT_INFEASIBLE, EXIT_INVALID, EXIT_OK, diag_report, main
from cpfmpc.sim.export import (TRACE_COLUMNS, emit_plot_data, export_trace, read_trace, summary,
                               write_summary)
from cpfmpc.sim.runner import run_cpf
from cpfmpc.sim.scenario import bundled


@pytest.fixture(scope="module")
def scenario():
    return bundled("paper_q100").with_overrides(duration=0.3)


@pytest.fixture(scope="module")
def trace(scenario):
    return run_cpf(scenario)


def test_header_order(trace, tmp_path):
    export_trace(trace, tmp_path)
    header = (tmp_path / "trace.csv").read_text().splitlines()[0]
    assert header == ("t,agent,px,py,pz,r11,r12,r13,r21,r22,r23,r31,r32,r33,"
                      "gamma,eta,y1,y2,y3,v1,w2,w3,v_gamma,phi,J_star")
    assert header.split(",") == TRACE_COLUMNS


def test_round_trip_is_exact(trace, tmp_path):
    export_trace(trace, tmp_path)
    back = read_trace(tmp_path, mode="cpf")
    for name in ("t", "p", "R", "gamma", "eta", "y", "u", "v_gamma", "phi", "J_star"):
        assert np.array_equal(getattr(back, name), getattr(trace, name)), name
    for name in ("J_star", "stage_integral", "k_con", "gamma", "warm_violation"):
        assert np.array_equal(back.samples[name], trace.samples[name]), name


def test_plot_data_files(trace, scenario, tmp_path):
    files = emit_plot_data(trace, tmp_path, scenario=scenario)
    assert {f.name for f in files} == {"positions.dat", "paths.dat", "series.dat"}
    pos = np.loadtxt(tmp_path / "positions.dat")
    assert pos.shape == (len(trace.t) * 3, 5)
    series = np.loadtxt(tmp_path / "series.dat")
    np.testing.assert_array_equal(series[:, 4], trace.phi)
    np.testing.assert_array_equal(series[:, 5:], trace.y_norm)
    paths = np.loadtxt(tmp_path / "paths.dat")
    assert set(paths[:, 0].astype(int)) == {0, 1, 2}


def test_summary_keys(trace, tmp_path):
    s = summary(trace)
    for key in ("phi_final", "y_final_norms", "max_phi", "tracking_cost", "warm_violation_max"):
        assert key in s
    assert len(s["y_final_norms"]) == 3
    assert json.loads(write_summary(trace, tmp_path).read_text()) == s


def test_unwritable_destination(trace, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        export_trace(trace, blocker / "sub")


def test_diag_report_on_short_run(trace, scenario):
    rep = diag_report(trace, scenario)
    assert rep["iss"]["passed"]
    # one increment per agent and pair of consecutive solves
    assert rep["value_decrease"]["samples"] == 3 * (len(scenario.timing.samples) - 2)


def test_cli_run_check_diag_compare(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--scenario", "fixed_point", "--duration", "0.3", "--out", str(a)]) == EXIT_OK
    assert main(["run", "--scenario", "fixed_point", "--duration", "0.3", "--mode", "decoupled",
                 "--out", str(b)]) == EXIT_OK
    for name in ("trace.csv", "samples.csv", "summary.json", "positions.dat", "series.dat"):
        assert (a / name).exists()
    capsys.readouterr()
    assert main(["check", "--scenario", "paper_q100"]) == EXIT_OK
    assert "3 agents" in capsys.readouterr().out
    assert main(["diag", "--scenario", "fixed_point", "--trace", str(a)]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["value_decrease"]["flagged"] == 0 and rep["iss"]["passed"]
    assert main(["compare", str(a), str(b)]) == EXIT_OK
    assert "tracking_cost" in json.loads(capsys.readouterr().out)


def test_cli_consensus_mode(tmp_path):
    out = tmp_path / "c"
    assert main(["run", "--scenario", "consensus_demo", "--duration", "1", "--out", str(out)]) == EXIT_OK
    s = json.loads((out / "summary.json").read_text())
    assert s["mode"] == "consensus" and s["phi_final"] < s["max_phi"]


def test_cli_invalid_scenario(tmp_path, capsys):
    doc = bundled("paper_q100").raw
    doc = dict(doc, graph=dict(doc["graph"], eps_bar=0.6))
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert main(["check", "--scenario", str(path)]) == EXIT_INVALID
    assert "eps_bar" in capsys.readouterr().err
    assert main(["run", "--scenario", "no_such_scenario"]) == EXIT_INVALID


def test_cli_infeasible_exit_code(tmp_path):
    doc = bundled("fixed_point").raw
    agents = [dict(a) for a in doc["agents"]]
    agents[0]["eta0"] = 5.0
    doc = dict(doc, agents=agents, solver={"max_iter": 5, "penalty_rounds": 2})
    path = tmp_path / "stuck.json"
    path.write_text(json.dumps(doc))
    out = tmp_path / "o"
    assert main(["run", "--scenario", str(path), "--duration", "0.2", "--out", str(out)]) \
        == EXIT_INFEASIBLE
    assert json.loads((out / "summary.json").read_text())["completed"] is False
