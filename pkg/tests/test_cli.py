import json
from dataclasses import replace

import numpy as np
import pytest
from click.testing import CliRunner

from srmpc.cli import main, trace_csv
from srmpc.config import config_hash, parse_config
from srmpc.errors import ConfigError

SMALL = """
benchmark:
  name: motivating_example
  params: {delta: 0.05}
noise:
  W: 0.01
  V: 0.01
sim:
  steps: 12
  y0: [0.5, 0.5]
  Sigma0: 0.1
  horizon: 10
  seed: 3
  initial_control: 0.1
controllers:
  - {name: nominal, type: nominal}
  - {name: sr, type: self_reflective, alpha: 1.0}
output:
  dir: OUT
  plot_csv: true
"""


def write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text.replace("OUT", str(tmp_path / "out")))
    return str(path)


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def test_simulate_writes_traces_and_summary(tmp_path):
    res = invoke("simulate", write(tmp_path, SMALL))
    assert res.exit_code == 0, res.output
    out = tmp_path / "out"
    header = (out / "trace_nominal.csv").read_text().splitlines()[0]
    assert header == "k,z1,z2,y1,y2,u1,u2,eta1,stage_cost,trace_Sigma,diverged"
    rows = (out / "trace_sr.csv").read_text().splitlines()
    assert len(rows) == 1 + 13
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 3 and len(summary["config_hash"]) == 64
    assert set(summary["runs"]) == {"nominal", "sr"}
    assert (out / "plot_states.csv").read_text().startswith("controller,k,t,variable,value")


def test_repeated_runs_are_byte_identical(tmp_path):
    cfg = write(tmp_path, SMALL)
    blobs = []
    for tag in ("a", "b"):
        assert invoke("simulate", cfg, "--out", tmp_path / tag).exit_code == 0
        blobs.append([(tmp_path / tag / f).read_bytes() for f in ("trace_nominal.csv", "trace_sr.csv")])
    assert blobs[0] == blobs[1]


@pytest.mark.parametrize("edit, needle", [
    (("steps: 12", "steps: 0"), "sim.steps"),
    (("seed: 3", "seed: 3\n  colour: red"), "sim.colour"),
    (("type: nominal", "type: pid"), "controllers[0].type"),
    (("name: sr,", "name: nominal,"), "unique"),
    (("y0: [0.5, 0.5]", "y0: [0.5]"), "sim.y0"),
    (("W: 0.01", "W: [[1, 2], [3, 4]]"), "symmetric"),
])
def test_bad_configs_exit_with_code_2(tmp_path, edit, needle):
    res = invoke("simulate", write(tmp_path, SMALL.replace(*edit)))
    assert res.exit_code == 2
    assert needle in res.output


def test_unknown_key_reports_line_number(tmp_path):
    res = invoke("simulate", write(tmp_path, SMALL.replace("seed: 3", "seed: 3\n  colour: red")))
    assert "line 14" in res.output


def test_missing_file_and_empty_analysis(tmp_path):
    assert invoke("simulate", tmp_path / "nope.yaml").exit_code == 2
    assert invoke("analyze", write(tmp_path, SMALL)).exit_code == 2


def test_solver_failure_exits_with_code_1_and_keeps_partial_trace(tmp_path, monkeypatch):
    import srmpc.sim

    real = srmpc.sim.run_closed_loop

    def failing(model, noise, cfg):
        trace = real(model, noise, replace(cfg, steps=4))
        return replace(trace, failure="RegularityError: G_uu not positive definite")

    monkeypatch.setattr(srmpc.sim, "run_closed_loop", failing)
    res = invoke("simulate", write(tmp_path, SMALL))
    assert res.exit_code == 1
    assert len((tmp_path / "out" / "trace_sr.csv").read_text().splitlines()) == 1 + 5
    assert json.loads((tmp_path / "out" / "summary.json").read_text())["runs"]["sr"]["failure"]


def test_analyze_alpha_sweep(tmp_path):
    text = SMALL + "analysis:\n  - {kind: alpha_sweep, alphas: [0.0, 1.0], horizon: 8}\n"
    res = invoke("analyze", write(tmp_path, text))
    assert res.exit_code == 0, res.output
    table = (tmp_path / "out" / "alpha_sweep.csv").read_text().splitlines()
    assert table[0] == "alpha,expected_loss,nominal_cost,excitation,converged" and len(table) == 3
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    rows = report["analyses"][0]["rows"]
    assert rows[1]["expected_loss"] <= rows[0]["expected_loss"] + 1e-12


def test_sweep_alpha_rejects_bad_weights(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert invoke("sweep-alpha", cfg, "--alphas", "1,x").exit_code == 2
    assert invoke("sweep-alpha", cfg, "--alphas", "-1").exit_code == 2


def test_validate_rejects_bad_selection():
    assert invoke("validate", "--only", "one").exit_code == 2


def test_config_hash_ignores_source_and_tracks_content():
    a, b = parse_config(SMALL, "a.yaml"), parse_config(SMALL, "b.yaml")
    assert config_hash(a) == config_hash(b)
    assert config_hash(parse_config(SMALL.replace("seed: 3", "seed: 4"))) != config_hash(a)


def test_matrix_shorthands():
    cfg = parse_config(SMALL.replace("W: 0.01", "W: {diag: [0.01, 0.02]}"))
    np.testing.assert_array_equal(cfg.noise.W, np.diag([0.01, 0.02]))
    np.testing.assert_array_equal(parse_config(SMALL).sim.Sigma0, 0.1 * np.eye(2))
    with pytest.raises(ConfigError, match="noise.W"):
        parse_config(SMALL.replace("W: 0.01", "W: {diag: [0.01, 0.02, 0.03]}"))


def test_final_trace_row_has_blank_inputs(tmp_path):
    from srmpc.config import build_model, build_noise, build_sim_config
    from srmpc.sim import run_closed_loop

    cfg = parse_config(SMALL)
    trace = run_closed_loop(build_model(cfg), build_noise(cfg), build_sim_config(cfg, cfg.controllers[0]))
    last = trace_csv(trace).splitlines()[-1].split(",")
    assert last[0] == "12" and last[5:9] == ["", "", "", ""]
