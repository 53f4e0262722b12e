import os
import subprocess
import sys

import pytest

from cpflow import experiments
from cpflow.cli import main
from cpflow.scenarios import get_scenario, names
from cpflow.scheme import DivergenceError


def read(path):
    with open(path) as fh:
        return fh.read()


def test_run_writes_all_artifacts(tmp_path):
    out = tmp_path / "o"
    code = main(["run", "--scenario", "oscillatory", "--kind", "strong", "--eps", "1e-3",
                 "--replicas", "200", "--seed", "3", "--out", str(out)])
    assert code == 0
    csv = read(out / "results.csv").splitlines()
    assert csv[0].startswith("scenario,param_name,param,metric")
    assert any(",isometry_ratio," in line for line in csv)
    summary = read(out / "summary.txt")
    assert f"scenario_hash: {get_scenario('oscillatory').hash}" in summary
    assert "seed: 3" in summary
    assert summary.rstrip().splitlines()[-1].startswith("overall: ")
    plot = read(out / "plot_rms_error.dat").splitlines()
    assert plot[0].startswith("# scenario=oscillatory hash=")
    assert plot[1] == "# eps estimate"
    assert len(plot[2].split()) == 2


def test_rates_needs_three_points(tmp_path, capsys):
    code = main(["rates", "--scenario", "lipschitz_1d", "--eps", "0.1,0.05",
                 "--out", str(tmp_path)])
    assert code == 2
    assert "at least 3" in capsys.readouterr().err


def test_rates_fits_slope(tmp_path):
    code = main(["rates", "--scenario", "lipschitz_1d", "--eps", "0.04,0.02,0.01",
                 "--replicas", "100", "--out", str(tmp_path)])
    assert code == 0
    assert "slope[rms_error]:" in read(tmp_path / "summary.txt")


def test_unknown_scenario_exit_code(tmp_path, capsys):
    assert main(["run", "--scenario", "nope", "--kind", "strong", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert all(n in err for n in names())


def test_usage_errors(tmp_path):
    assert main(["run", "--scenario", "linear_ou", "--out", str(tmp_path)]) == 2
    assert main(["run", "--scenario", "linear_ou", "--kind", "nse", "--out", str(tmp_path)]) == 2
    assert main(["run", "--scenario", "linear_ou", "--kind", "strong", "--replicas", "0",
                 "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["run", "--scenario", "linear_ou", "--kind", "bogus"])


def test_check_turns_failed_verdicts_into_exit_one(tmp_path):
    # eps = 1 leaves a Poisson(1) walk, far from Gaussian
    args = ["run", "--scenario", "linear_ou", "--kind", "donsker", "--eps", "1.0",
            "--replicas", "500", "--out", str(tmp_path)]
    assert main(args) == 0
    assert "overall: FAIL" in read(tmp_path / "summary.txt")
    assert main(args + ["--check"]) == 1


def test_divergence_exit_code(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise DivergenceError(7, "diverged at step 7")
    monkeypatch.setitem(experiments.RUNNERS, "strong", boom)
    assert main(["run", "--scenario", "linear_ou", "--kind", "strong", "--out",
                 str(tmp_path)]) == 1
    assert "DivergenceError" in capsys.readouterr().err


def test_toml_config_and_flag_override(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('scenario = "linear_ou"\nkind = "clt"\neps = [0.01]\nreplicas = 300\n'
                   f'seed = 5\nout = "{tmp_path / "a"}"\n')
    assert main(["run", "--config", str(cfg)]) == 0
    s = read(tmp_path / "a" / "summary.txt")
    assert "seed: 5" in s and "replicas: 300" in s
    assert main(["run", "--config", str(cfg), "--seed", "6", "--out", str(tmp_path / "b")]) == 0
    assert "seed: 6" in read(tmp_path / "b" / "summary.txt")


def test_toml_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text('scenario = "linear_ou"\ncolour = "red"\n')
    assert main(["run", "--config", str(cfg)]) == 2
    assert "colour" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "cpflow", "run", "--scenario", "linear_ou", "--kind",
                        "tail", "--eps", "0.1", "--replicas", "1000", "--out", str(tmp_path)],
                       capture_output=True, text=True, env={**os.environ, "CPFLOW_WORKERS": "2"})
    assert r.returncode == 0, r.stderr
    assert "tail_probability" in r.stdout
