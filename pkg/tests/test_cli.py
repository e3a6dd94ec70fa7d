import json
import subprocess
import sys

import pytest

from plasmapair.cli import main, load_config, ConfigError


def run_cli(args, cwd):
    return subprocess.run(
        [sys.executable, "-m", "plasmapair.cli", *args],
        capture_output=True, text=True, cwd=cwd,
    )


class TestConfig:
    def test_defaults_and_overrides(self, tmp_path):
        cfgfile = tmp_path / "c.yaml"
        cfgfile.write_text("mesh:\n  n: 20\nproblem:\n  p1: 2.0\n")
        cfg = load_config(str(cfgfile), {"problem.p1": "3.0"})
        assert cfg["mesh.n"] == 20
        assert cfg["problem.p1"] == 3.0  # flag beats file
        assert cfg["mesh.shape"] == "rectangle"  # default survives

    def test_unknown_key_rejected(self, tmp_path):
        cfgfile = tmp_path / "c.yaml"
        cfgfile.write_text("mesh:\n  resolution: 20\n")
        with pytest.raises(ConfigError):
            load_config(str(cfgfile), {})

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, {"mesh.n": "many"})


class TestExitCodes:
    def test_souto_violation_exit_2(self, tmp_path):
        r = run_cli(
            ["branch", "--problem.p1", "90", "--problem.p2", "90", "--problem.N", "3"],
            tmp_path,
        )
        assert r.returncode == 2
        err = json.loads(r.stderr.strip().splitlines()[-1])
        assert err["error"] == "souto_condition"

    def test_bad_mesh_exit_2(self, tmp_path):
        r = run_cli(["solve", "--mesh.n", "4"], tmp_path)
        assert r.returncode == 2

    def test_solve_zero_coupling(self, tmp_path):
        r = run_cli(
            ["solve", "--mesh.n", "12", "--run.lam", "0", "--run.out", "o"],
            tmp_path,
        )
        assert r.returncode == 0
        lines = (tmp_path / "o" / "state.csv").read_text().splitlines()
        header = lines[0].split(",")
        row = dict(zip(header, lines[1].split(",")))
        assert float(row["alpha1"]) == 1.0 and float(row["alpha2"]) == 1.0

    def test_verify_small_mesh(self, tmp_path):
        r = run_cli(["verify", "--mesh.n", "16", "--run.out", "v"], tmp_path)
        assert r.returncode == 0, r.stdout + r.stderr
        assert "PASS" in r.stdout and "FAIL" not in r.stdout


class TestOutputs:
    def test_branch_outputs_and_determinism(self, tmp_path):
        args = ["branch", "--mesh.n", "12", "--run.lambda_max", "1.0",
                "--step.dlam_init", "0.25", "--step.dlam_max", "0.5"]
        r1 = run_cli([*args, "--run.out", "b1"], tmp_path)
        r2 = run_cli([*args, "--run.out", "b2"], tmp_path)
        assert r1.returncode == 0 and r2.returncode == 0
        csv1 = (tmp_path / "b1" / "branch.csv").read_bytes()
        csv2 = (tmp_path / "b2" / "branch.csv").read_bytes()
        assert csv1 == csv2  # byte-identical on identical config + seed
        side = json.loads((tmp_path / "b1" / "branch.csv.json").read_text())
        assert side["mesh"]["n"] == 12
        assert "config_sha256" in side and len(side["config_sha256"]) == 64
        assert "tolerances" in side
        thr = json.loads((tmp_path / "b1" / "thresholds.json").read_text())
        assert thr["stop_reason"] == "lambda_max"

    def test_branch_csv_schema(self, tmp_path):
        r = run_cli(
            ["branch", "--mesh.n", "12", "--run.lambda_max", "0.5", "--run.out", "b"],
            tmp_path,
        )
        assert r.returncode == 0
        header = (tmp_path / "b" / "branch.csv").read_text().splitlines()[0]
        assert header == "lambda,alpha1,alpha2,E,F,gamma,E_self,sigma1,mu1_H,mu2_H,min_v1,min_v2,fb_flag"

    def test_spectrum_csv(self, tmp_path):
        r = run_cli(
            ["spectrum", "--mesh.n", "12", "--run.lam", "0.4", "--run.k", "3",
             "--run.out", "sp"],
            tmp_path,
        )
        assert r.returncode == 0
        lines = (tmp_path / "sp" / "spectrum.csv").read_text().splitlines()
        assert lines[0] == "k,sigma,mu,residual"
        assert len(lines) == 4
        sigmas = [float(l.split(",")[1]) for l in lines[1:]]
        assert sigmas == sorted(sigmas)

    def test_field_dump_format(self, tmp_path):
        r = run_cli(
            ["solve", "--mesh.n", "12", "--run.lam", "0.2", "--run.out", "o"],
            tmp_path,
        )
        assert r.returncode == 0
        lines = (tmp_path / "o" / "psi1.csv").read_text().splitlines()
        assert lines[0] == "x,y,value"
        assert len(lines) == 1 + 144

    def test_oracle_mode(self, tmp_path):
        r = run_cli(
            ["oracle", "--mesh.n", "12", "--run.lambdas", "0.2,0.5", "--run.out", "orc"],
            tmp_path,
        )
        assert r.returncode == 0
        lines = (tmp_path / "orc" / "oracle.csv").read_text().splitlines()
        assert len(lines) == 3
        worst = max(float(l.split(",")[5]) for l in lines[1:])
        assert worst <= 1e-6

    def test_solve_sweep_workers(self, tmp_path):
        r = run_cli(
            ["solve", "--mesh.n", "12", "--run.lambdas", "0.3,0.1,0.2",
             "--run.workers", "2", "--run.out", "sw"],
            tmp_path,
        )
        assert r.returncode == 0, r.stderr
        lines = (tmp_path / "sw" / "states.csv").read_text().splitlines()
        lams = [float(l.split(",")[0]) for l in lines[1:]]
        assert lams == sorted(lams) and len(lams) == 3


class TestSolverFailureAndLogs:
    def test_unreachable_target_exit_3(self, tmp_path):
        # p < 1 cannot be continued past positivity loss, so a far target fails
        r = run_cli(
            ["solve", "--mesh.n", "12", "--problem.p1", "0.5", "--problem.p2", "0.5",
             "--run.lam", "50", "--run.out", "x"],
            tmp_path,
        )
        assert r.returncode == 3
        err = json.loads(r.stderr.strip().splitlines()[-1])
        assert err["error"] == "solver_failure"

    def test_verbose_iteration_log(self, tmp_path):
        r = run_cli(
            ["solve", "--mesh.n", "12", "--run.lam", "0.4", "--run.verbose", "2",
             "--run.out", "o"],
            tmp_path,
        )
        assert r.returncode == 0
        assert "newton it=" in r.stderr and "residual=" in r.stderr

    def test_free_boundary_contours_dumped(self, tmp_path):
        r = run_cli(
            ["solve", "--mesh.n", "16", "--run.lam", "25", "--run.out", "fb"],
            tmp_path,
        )
        assert r.returncode == 0
        manifest = json.loads((tmp_path / "fb" / "free_boundary_contours.json").read_text())
        assert manifest and all({"file", "component", "area", "closed"} <= set(m) for m in manifest)
        name = manifest[0]["file"]
        assert (tmp_path / "fb" / name).read_text().splitlines()[0] == "x,y"


def test_main_entry_point(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code = main(["solve", "--mesh.n", "12", "--run.lam", "0", "--run.out", "direct"])
    assert code == 0
