import json
import shutil

import pytest
from click.testing import CliRunner

from conftest import CONFIG_DIR, load_config
from safe_nmpc.cli import main


@pytest.fixture()
def runner():
    return CliRunner()


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture()
def workdir(tmp_path, di_rmpc, di_tmpc):
    """Scenario files next to freshly synthesized artifacts."""
    for name, (art, _) in (("di_rmpc", di_rmpc), ("di_tmpc", di_tmpc)):
        art.save(tmp_path / f"{name}.artifact.json")
        shutil.copy(CONFIG_DIR / f"{name}_scenario.json", tmp_path / f"{name}_scenario.json")
    return tmp_path


# ---------------------------------------------------------------- synth

def test_synth_scalar_tmpc(runner, tmp_path):
    cfg = _write(tmp_path / "scalar.json", load_config("scalar_tmpc"))
    res = runner.invoke(main, ["synth", str(cfg)])
    assert res.exit_code == 0, res.output
    art = json.loads((tmp_path / "scalar.artifact.json").read_text())
    assert art["P"]["data"][0] == pytest.approx(1.0, abs=1e-6)
    assert art["K"]["data"][0] == pytest.approx(-1.0, abs=1e-6)
    val = json.loads((tmp_path / "scalar.artifact.validation.json").read_text())
    assert val["passed"] and val["schema"] == 1


def test_synth_is_byte_identical_on_rerun(runner, tmp_path):
    cfg = _write(tmp_path / "s.json", load_config("scalar_rmpc"))
    runner.invoke(main, ["synth", str(cfg), "--out", str(tmp_path / "a.json")])
    runner.invoke(main, ["synth", str(cfg), "--out", str(tmp_path / "b.json")])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_synth_multiplier_inequality_is_bad_input(runner, tmp_path):
    cfg = load_config("di_rompc")
    cfg["epsilon"] = 1.0
    cfg["multipliers"] = {"lambda_delta": 1.0, "lambda_delta_eps": 10.0, "lambda_eps": 1.0}
    res = runner.invoke(main, ["synth", str(_write(tmp_path / "r.json", cfg))])
    assert res.exit_code == 2
    assert "multiplier inequality" in res.output


def test_synth_infeasible_design(runner, tmp_path):
    # an open-loop observer cannot bound the estimation error of an integrator
    cfg = {"schema": 1, "variant": "rompc", "model": {"name": "scalar_integrator"}, "Q": [1.0], "R": [1.0],
           "rho": 1.0, "grid_points": 2, "W": {"lower": [-0.05], "upper": [0.05]},
           "H": {"lower": [-0.01], "upper": [0.01]}, "epsilon": 0.5,
           "multipliers": {"lambda_delta": 1.0, "lambda_delta_eps": 1.0, "lambda_eps": 1.0},
           "observer": {"L": [[0.0]]}}
    res = runner.invoke(main, ["synth", str(_write(tmp_path / "bad.json", cfg))])
    assert res.exit_code == 3
    assert "rpi_eps" in res.output


def test_synth_bad_inputs(runner, tmp_path):
    assert runner.invoke(main, ["synth", str(tmp_path / "missing.json")]).exit_code == 2
    (tmp_path / "garbage.json").write_text("{not json")
    assert runner.invoke(main, ["synth", str(tmp_path / "garbage.json")]).exit_code == 2
    res = runner.invoke(main, ["synth", str(_write(tmp_path / "v.json", {"variant": "lqr", "model": {}}))])
    assert res.exit_code == 2


# ---------------------------------------------------------------- simulate

def test_simulate_single_run(runner, workdir):
    scn = json.loads((workdir / "di_rmpc_scenario.json").read_text())
    scn["duration"] = 1.0
    path = _write(workdir / "short.json", scn)
    res = runner.invoke(main, ["simulate", str(path), "--out-dir", str(workdir / "out")])
    assert res.exit_code == 0, res.output
    for f in ("trace.csv", "trace.json", "summary.json"):
        assert (workdir / "out" / f).exists()
    summary = json.loads((workdir / "out" / "summary.json").read_text())
    assert summary["violations"]["system"] == 0 and summary["schema"] == 1
    first = (workdir / "out" / "trace.csv").read_bytes()
    runner.invoke(main, ["simulate", str(path), "--out-dir", str(workdir / "out2")])
    assert (workdir / "out2" / "trace.csv").read_bytes() == first


def test_simulate_batch_and_report(runner, workdir):
    scn = json.loads((workdir / "di_rmpc_scenario.json").read_text())
    scn["duration"] = 0.6
    path = _write(workdir / "batch.json", scn)
    res = runner.invoke(main, ["simulate", str(path), "--seeds", "2", "--workers", "1", "--out-dir",
                               str(workdir / "b")])
    assert res.exit_code == 0, res.output
    agg = json.loads((workdir / "b" / "aggregate.json").read_text())
    assert agg["runs"] == 2 and agg["seeds"] == [0, 1]
    assert (workdir / "b" / "trace_seed1.csv").exists()
    res = runner.invoke(main, ["report", str(workdir / "b" / "summaries.json"), "--csv", str(workdir / "r.csv")])
    assert res.exit_code == 0
    assert "runs=2" in res.output
    lines = (workdir / "r.csv").read_text().splitlines()
    assert lines[0] == "# schema=1" and lines[1].startswith("seed,outcome") and len(lines) == 4


def test_simulate_infeasible_halt(runner, workdir):
    scn = json.loads((workdir / "di_tmpc_scenario.json").read_text())
    scn.update(x0=[0.0, 0.0, 3.0, 0.0], duration=0.4)
    res = runner.invoke(main, ["simulate", str(_write(workdir / "halt.json", scn)), "--out-dir",
                               str(workdir / "h")])
    assert res.exit_code == 4
    assert json.loads((workdir / "h" / "summary.json").read_text())["outcome"] == "infeasible_halt"


def test_simulate_missing_and_corrupted_artifact(runner, workdir):
    scn = json.loads((workdir / "di_rmpc_scenario.json").read_text())
    scn["artifact"] = "nope.json"
    res = runner.invoke(main, ["simulate", str(_write(workdir / "m.json", scn))])
    assert res.exit_code == 2 and "not found" in res.output
    art = json.loads((workdir / "di_rmpc.artifact.json").read_text())
    art["alpha"] = 0.1 * art["wbar"] / art["rho"]
    _write(workdir / "broken.artifact.json", art)
    scn["artifact"] = "broken.artifact.json"
    res = runner.invoke(main, ["simulate", str(_write(workdir / "c.json", scn))])
    assert res.exit_code == 2
    assert "artifact invariant 'alpha_bound' violated" in res.output


# ---------------------------------------------------------------- verify

def test_verify_passes_on_a_good_design(runner, workdir):
    scn = json.loads((workdir / "di_rmpc_scenario.json").read_text())
    scn["duration"] = 1.0
    path = _write(workdir / "v.json", scn)
    runner.invoke(main, ["simulate", str(path), "--out-dir", str(workdir / "o")])
    res = runner.invoke(main, ["verify", str(path), "--trace", str(workdir / "o" / "trace.json"),
                               "--samples", "500", "--out", str(workdir / "rep.json")])
    assert res.exit_code == 0, res.output
    rep = json.loads(res.stdout)
    assert rep["passed"] and [c["check"] for c in rep["checks"]] == [
        "descent", "recursive_feasibility", "terminal_invariance", "lipschitz_contraction"]
    assert "PASS lipschitz_contraction" in res.stderr
    assert json.loads((workdir / "rep.json").read_text()) == rep


def test_verify_fails_on_a_weakened_design(runner, workdir):
    art = json.loads((workdir / "di_rmpc.artifact.json").read_text())
    art["wbar"] *= 0.5  # alpha still above the floor, so the artifact loads
    _write(workdir / "weak.artifact.json", art)
    res = runner.invoke(main, ["verify", str(workdir / "di_rmpc_scenario.json"), "--artifact",
                               str(workdir / "weak.artifact.json"), "--checks", "lipschitz_contraction",
                               "--samples", "500"])
    assert res.exit_code == 1
    assert "FAIL lipschitz_contraction" in res.stderr


def test_verify_bad_check_lists(runner, workdir):
    scn = str(workdir / "di_rmpc_scenario.json")
    assert runner.invoke(main, ["verify", scn, "--checks", ""]).exit_code == 2
    assert runner.invoke(main, ["verify", scn, "--checks", "telepathy"]).exit_code == 2
    assert runner.invoke(main, ["verify", scn, "--checks", "descent"]).exit_code == 2  # no trace


def test_verify_tmpc_skips_tube_checks(runner, workdir):
    res = runner.invoke(main, ["verify", str(workdir / "di_tmpc_scenario.json"), "--checks",
                               "lipschitz_contraction,terminal_invariance", "--samples", "20"])
    assert res.exit_code == 0, res.output
    rep = json.loads(res.stdout)
    assert rep["checks"][0]["skipped"]


def test_report_rejects_unknown_schema(runner, tmp_path):
    p = _write(tmp_path / "s.json", {"schema": 9, "violations": {}})
    assert runner.invoke(main, ["report", str(p)]).exit_code == 2
    assert runner.invoke(main, ["report"]).exit_code == 2
