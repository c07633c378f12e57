import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from cuspflow import io
from cuspflow.cli import main

SMALL = ["--set", "discretization.n_core=32", "--set", "discretization.n_s=64",
         "--set", "flow.t_final=0.3"]
TWO_ENDS = ["--set", "surface.punctures=[[0.25, 0.25], [0.75, 0.75]]", "--set", "surface.sigma=[1.0, 4.0]",
            "--set", "discretization.s_lo=0.4", "--set", "discretization.n_core=48",
            "--set", "discretization.n_s=64", "--set", "initial.end_amplitude=[0.0, 0.0]",
            "--set", "initial.end_k=[1, 1]", "--set", "flow.rho=-2.0", "--set", "flow.t_final=0.5"]


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "small"
    assert main(["run", *SMALL, "--output", str(out)]) == 0
    return out


def test_validate_standard_geometry(tmp_path, capsys):
    assert main(["validate", "--output", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "validate.json").read_text())
    assert rep["passed"]
    assert {c["name"] for c in rep["checks"]} >= {"gauss_bonnet", "green_identity", "laplacian_of_constant"}
    assert "PASS" in capsys.readouterr().out


def test_validate_coarse_geometry_fails(tmp_path):
    # Gauss-Bonnet is not within tolerance on a 32 x 32 core
    assert main(["validate", "--set", "discretization.n_core=32", "--set", "discretization.n_s=64",
                 "--output", str(tmp_path)]) == 1
    assert not json.loads((tmp_path / "validate.json").read_text())["passed"]


def test_config_errors_exit_one(tmp_path, capsys):
    assert main(["run", "--set", "surface.mu=0.5", "--output", str(tmp_path)]) == 1
    assert "surface.mu" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.toml")]) == 1


def test_run_artifacts(small_run):
    names = {p.name for p in small_run.iterdir()}
    assert {"timeseries.csv", "summary.json", "checkpoint_initial.cfk", "checkpoint_final.cfk",
            "config.json", "sup_R_minus_rho.svg"} <= names
    assert "FAILED" not in names
    summary = json.loads((small_run / "summary.json").read_text())
    assert summary["status"] == "completed" and summary["stop_reason"] == "t_final"
    assert summary["t_final"] == pytest.approx(0.3)
    cols, data = io.read_timeseries(small_run / "timeseries.csv")
    assert data["t"][-1] == pytest.approx(0.3)


def test_run_is_deterministic(tmp_path, small_run):
    assert main(["run", *SMALL, "--output", str(tmp_path)]) == 0
    for name in ("timeseries.csv", "summary.json", "checkpoint_final.cfk"):
        assert (tmp_path / name).read_bytes() == (small_run / name).read_bytes(), name


def test_area_preserving_run(tmp_path):
    # the area settles at A0 + defect / rho, with defect the discrete Gauss-Bonnet
    # error; n = 64 keeps that shift below the tolerance
    assert main(["run", "--set", "discretization.n_core=64", "--set", "discretization.n_s=128",
                 "--rho-mode", "area_preserving", "--set", "flow.t_final=1.0",
                 "--set", "flow.co_evolve=false", "--output", str(tmp_path)]) == 0
    _, data = io.read_timeseries(tmp_path / "timeseries.csv")
    A = data["area"]
    assert np.max(np.abs(A - A[0])) / A[0] <= 1e-3


def test_failed_run_leaves_marker(tmp_path):
    args = ["run", *SMALL, "--set", "flow.dt_init=0.4", "--set", "flow.dt_min=0.3",
            "--set", "flow.newton_maxit=1", "--output", str(tmp_path)]
    assert main(args) == 2
    marker = json.loads((tmp_path / "FAILED").read_text())
    assert "FlowError" in marker["error"] and marker["t_last_good"] == 0.0
    assert (tmp_path / "checkpoint_last.cfk").exists()
    assert json.loads((tmp_path / "summary.json").read_text())["status"] == "failed"
    assert main(["report", str(tmp_path)]) == 0
    assert "Convergence section missing" in (tmp_path / "report.md").read_text()


def test_potential_command(tmp_path, small_run):
    out = tmp_path / "pot"
    assert main(["potential", "--set", "discretization.n_core=32", "--set", "discretization.n_s=64",
                 str(_default_toml(tmp_path)), str(small_run / "checkpoint_final.cfk"),
                 "--output", str(out)]) == 0
    pot = json.loads((out / "potential.json").read_text())
    assert abs(pot["integral_f_over_area"]) <= 1e-8
    pre, fields = io.read_fields(out / "potential_f.bin")
    assert np.all(np.isfinite(fields["f"]))


def _default_toml(tmp_path):
    from cuspflow.config import default_config_text

    p = tmp_path / "bench.toml"
    p.write_text(default_config_text())
    return p


def test_potential_missing_checkpoint(tmp_path):
    cfg = _default_toml(tmp_path)
    assert main(["potential", str(cfg), str(tmp_path / "none.cfk"), "--output", str(tmp_path)]) == 1


def test_potential_geometry_mismatch(tmp_path, small_run):
    cfg = _default_toml(tmp_path)
    assert main(["potential", str(cfg), str(small_run / "checkpoint_final.cfk"),
                 "--output", str(tmp_path / "p")]) == 1


def test_potential_of_uniformized_metric(tmp_path):
    from cuspflow.config import load_config
    from cuspflow.flow import uniformize
    from cuspflow.geometry import make_geometry

    over = ["discretization.n_core=32", "discretization.n_s=64"]
    cfg = load_config(None, over)
    _, bg = make_geometry(cfg.surface, cfg.discretization)
    ck = tmp_path / "u.cfk"
    ck.write_bytes(io.metric_checkpoint_bytes(uniformize(bg, -2.0)))
    out = tmp_path / "pot"
    args = ["potential", str(_default_toml(tmp_path)), str(ck), "--output", str(out)]
    for o in over:
        args[1:1] = ["--set", o]
    assert main(args) == 0
    pot = json.loads((out / "potential.json").read_text())
    assert abs(pot["c"][0]) < 1e-6


def test_report_completed(small_run, capsys):
    assert main(["report", str(small_run)]) == 0
    text = (small_run / "report.md").read_text()
    assert "Status: **completed**" in text and "## Convergence" in text and "## Ends" in text
    assert text == capsys.readouterr().out


def test_report_partial(tmp_path, small_run):
    d = tmp_path / "partial"
    d.mkdir()
    shutil.copy(small_run / "timeseries.csv", d)
    assert main(["report", str(d), "--output", str(tmp_path / "r.md")]) == 0
    text = (tmp_path / "r.md").read_text()
    assert "partial" in text and "Gauss-Bonnet defect" in text


def test_report_two_ends(tmp_path):
    out = tmp_path / "two"
    assert main(["run", *TWO_ENDS, "--output", str(out)]) == 0
    assert main(["report", str(out)]) == 0
    text = (out / "report.md").read_text()
    assert "| 0 | 1 |" in text and "| 1 | 4 |" in text


@pytest.mark.parametrize("name, content", [
    ("summary.json", "{broken"),
    ("timeseries.csv", "not,a,series\n"),
])
def test_report_corrupt_artifacts(tmp_path, small_run, name, content):
    d = tmp_path / "c"
    shutil.copytree(small_run, d)
    (d / name).write_text(content)
    assert main(["report", str(d)]) == 2


def test_report_on_missing_dir(tmp_path):
    assert main(["report", str(tmp_path / "nope")]) == 1
    assert main(["report", str(tmp_path)]) == 2


def test_console_script_version():
    r = subprocess.run([sys.executable, "-m", "cuspflow.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("cuspflow ")
