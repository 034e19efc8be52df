import json
import subprocess
import sys

import pytest

from barrier_bsde import cli

CASE = {"spot": 22, "strike": 23, "barrier": 40, "maturity": 0.5, "volatility": 0.4}


@pytest.fixture
def case_file(tmp_path):
    p = tmp_path / "case.json"
    p.write_text(json.dumps(CASE))
    return p


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr().out


def test_price_analytic(capsys, case_file):
    code, out = run(capsys, "price", "--method", "analytic", "--case", case_file)
    est = json.loads(out)
    assert code == 0 and est["method"] == "analytic"
    assert est["value"] == pytest.approx(1.6291561616541181)


@pytest.mark.parametrize("method", ["mc-terminal", "mc-path"])
def test_price_mc_uses_env_seed(capsys, case_file, monkeypatch, method):
    monkeypatch.setenv("BARRIER_BSDE_SEED", "7")
    code, out = run(capsys, "price", "--method", method, "--case", case_file, "--paths", 20000)
    est = json.loads(out)
    assert code == 0 and est["diagnostics"]["seed"] == 7 and est["std_error"] > 0
    # an explicit flag beats the environment
    _, out2 = run(capsys, "price", "--method", method, "--case", case_file, "--paths", 20000, "--seed", 2)
    assert json.loads(out2)["diagnostics"]["seed"] == 2


def test_config_file_supplies_defaults(capsys, case_file, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "paths": 10000}))
    _, out = run(capsys, "--config", cfg, "price", "--method", "mc-terminal", "--case", case_file)
    d = json.loads(out)["diagnostics"]
    assert d["seed"] == 5 and d["paths"] == 10000


def test_bad_case_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"spot": -1, "strike": 23, "barrier": 40, "maturity": 0.5, "volatility": 0.4}')
    with pytest.raises(SystemExit, match="bad case file"):
        cli.main(["price", "--method", "analytic", "--case", str(p)])


def test_bad_env_seed(case_file, monkeypatch):
    monkeypatch.setenv("BARRIER_BSDE_SEED", "abc")
    with pytest.raises(SystemExit, match="BARRIER_BSDE_SEED"):
        cli.main(["price", "--method", "mc-terminal", "--case", str(case_file), "--paths", "100"])


@pytest.mark.parametrize("suite", ["analytic", "lemma2"])
def test_check_suites_exit_zero(capsys, suite):
    code, out = run(capsys, "check", "--suite", suite)
    assert code == 0 and "[FAIL]" not in out


def test_check_reports_failure(capsys, monkeypatch):
    from barrier_bsde import checks

    monkeypatch.setitem(checks.SUITES, "lemma2", lambda: [checks.CheckResult("x", False)])
    code, out = run(capsys, "check", "--suite", "lemma2")
    assert code == 1 and "[FAIL] x" in out


def test_grid_command(capsys, tmp_path, monkeypatch):
    from barrier_bsde import harness

    real = harness.run_case

    def tiny(index, case, setting, seed, mc_paths=0, overrides=None):
        return real(index, case, setting, seed, mc_paths, dict(max_iterations=10, min_iterations=10, batch_size=8))

    monkeypatch.setattr(harness, "run_case", tiny)
    monkeypatch.setenv("BARRIER_BSDE_WORKERS", "1")
    code, out = run(capsys, "grid", "--setting", "test3", "--filter", "barrier=40,maturity=0.5,spot=22",
                    "--out", tmp_path / "g")
    assert code == 0 and "3 cases" in out
    assert len((tmp_path / "g" / "results.csv").read_text().splitlines()) == 4
    assert json.loads((tmp_path / "g" / "summary.json").read_text())["n_results"] == 3


def test_grid_empty_filter(tmp_path):
    with pytest.raises(SystemExit, match="no cases"):
        cli.main(["grid", "--filter", "spot=99", "--out", str(tmp_path)])


def test_help_lists_commands():
    out = subprocess.run([sys.executable, "-m", "barrier_bsde.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for word in ("price", "grid", "check", "--config"):
        assert word in out.stdout
