import os

import pytest
import yaml

from zscmsnb.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = {
        "fit": {"n_iterations": 220, "burn_in": 100, "n_chains": 2},
        "generator": {"n_rows": 2, "n_cols": 3, "n_times": 20},
        "forecast": {"horizon": 2},
        "diagnostics": {"max_lag": 4, "fitted_draws": 40},
    }
    with open(d / "run.yaml", "w") as fh:
        yaml.safe_dump(cfg, fh)
    assert main(["simulate", "--config", str(d / "run.yaml"), "--out", str(d / "data"), "--seed", "3"]) == EXIT_OK
    assert main(["fit", "--config", str(d / "run.yaml"), "--data", str(d / "data"), "--out", str(d / "fit"),
                 "--seed", "1"]) == EXIT_OK
    return d


def test_simulate_outputs(workdir):
    names = set(os.listdir(workdir / "data"))
    assert {"counts.csv", "adjacency.csv", "x.csv", "z.csv", "z01c.csv", "truth.csv", "states.csv"} <= names


def test_fit_outputs(workdir):
    names = set(os.listdir(workdir / "fit"))
    assert {"draws.csv", "state_means.csv", "diagnostics.csv", "waic.csv", "forecast.csv", "arrows.csv",
            "summary.csv", "fitted.csv", "config.yaml"} <= names


def test_fit_is_deterministic(workdir):
    out = workdir / "fit2"
    assert main(["fit", "--config", str(workdir / "run.yaml"), "--data", str(workdir / "data"), "--out", str(out),
                 "--seed", "1"]) == EXIT_OK
    for f in ("draws.csv", "state_means.csv", "waic_pointwise.csv", "forecast.csv", "fitted.csv"):
        assert (workdir / "fit" / f).read_bytes() == (out / f).read_bytes(), f


def test_predict_and_diagnose(workdir):
    assert main(["predict", "--fit-dir", str(workdir / "fit"), "--horizon", "3", "--out",
                 str(workdir / "pred")]) == EXIT_OK
    rows = (workdir / "pred" / "forecast.csv").read_text().splitlines()
    assert len(rows) == 1 + 6 * 3
    assert main(["diagnose", "--fit-dir", str(workdir / "fit"), "--out", str(workdir / "diag")]) == EXIT_OK
    assert (workdir / "diag" / "diagnostics.csv").read_bytes() == (workdir / "fit" / "diagnostics.csv").read_bytes()


def test_resolved_config_refits(workdir):
    out = workdir / "refit"
    assert main(["fit", "--config", str(workdir / "fit" / "config.yaml"), "--out", str(out)]) == EXIT_OK
    assert (out / "draws.csv").read_bytes() == (workdir / "fit" / "draws.csv").read_bytes()


def test_oracle_check_codes():
    assert main(["oracle-check", "--instances", "3"]) == EXIT_OK
    assert main(["oracle-check", "--instances", "1", "--tol", "-1"]) == EXIT_NUMERICAL


def test_validation_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("fit:\n  bogus: 1\n")
    assert main(["fit", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_INVALID
    assert "bogus" in capsys.readouterr().err
    assert main(["fit", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_INVALID


def test_sim_study(tmp_path):
    cfg = tmp_path / "s.yaml"
    cfg.write_text("fit: {n_iterations: 120, burn_in: 60, n_chains: 2}\n"
                   "generator: {n_rows: 2, n_cols: 2, n_times: 12}\n"
                   "study: {n_reps: 1, min_ess: 0, max_rhat: 100.0, iteration_multiplier: {'80': 2}}\n")
    assert main(["sim-study", "--config", str(cfg), "--out", str(tmp_path / "st"), "--seed", "1"]) == EXIT_OK
    rec = (tmp_path / "st" / "recovery.csv").read_text().splitlines()
    assert len(rec) == 1 + 2 * 11
