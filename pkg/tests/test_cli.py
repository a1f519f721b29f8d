import json

import numpy as np
import pytest

from robust_forward.cli import ScenarioPreset, effective_config, main


def read_csv(path):
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    data = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    return header, data


@pytest.fixture(scope="module")
def figures(tmp_path_factory):
    out = tmp_path_factory.mktemp("figs")
    assert main(["reproduce-figures", "--out", str(out)]) == 0
    return out


@pytest.mark.parametrize(
    "name,p,b,G", [("fig1", 0.0, 0.2, 0.1), ("fig2", 0.8, 0.3, 0.12), ("fig3", -0.5, 0.1, 0.1171875)]
)
def test_reproduce_saddle_files(figures, name, p, b, G):
    doc = json.loads((figures / name / "saddle.json").read_text())
    assert abs(doc["p_star"][0] - p) <= 1e-12
    assert abs(doc["b_star"][0] - b) <= 1e-12
    assert abs(doc["sigma_star"][0][0] - 0.5) <= 1e-12
    assert abs(doc["G"] - G) <= 1e-12


def test_fig1_paths_deterministic(figures):
    header, data = read_csv(figures / "fig1" / "paths.csv")
    assert header == ["t", "X_1", "X_2", "amount_1", "amount_2"]
    np.testing.assert_allclose(data[:, 1], 50 * np.exp(0.2 * data[:, 0]), rtol=1e-12)
    assert np.array_equal(data[:, 1], data[:, 2])
    assert np.all(data[:, 3:] == 0)


def test_fig2_amount_column(figures):
    _, data = read_csv(figures / "fig2" / "paths.csv")
    np.testing.assert_allclose(data[:, 3], 0.8 * data[:, 1], rtol=1e-15)
    assert not np.array_equal(data[:, 1], data[:, 2])


def test_fig3_preference_column(figures):
    _, paths = read_csv(figures / "fig3" / "paths.csv")
    header, pref = read_csv(figures / "fig3" / "preference.csv")
    assert header == ["t", "Y", "U_1", "U_2"]
    t = pref[:, 0]
    np.testing.assert_allclose(pref[:, 2], 2 * np.sqrt(paths[:, 1]) * np.exp(-0.1171875 * t), rtol=1e-12)


def test_reproduce_is_byte_identical(figures, tmp_path):
    assert main(["reproduce-figures", "--out", str(tmp_path)]) == 0
    for name in ("fig1", "fig2", "fig3"):
        for f in ("saddle.json", "preference.csv", "paths.csv", "summary.json"):
            assert (tmp_path / name / f).read_bytes() == (figures / name / f).read_bytes()


def test_locked_fields_refused(capsys):
    with pytest.raises(ValueError):
        effective_config("fig2", None, [("preferences.delta", 0.3)])
    assert main(["saddle-g", "--preset", "fig1", "--delta", "0.3"]) == 1
    assert main(["saddle-g", "--preset", "fig1", "--set", "market.r=0.1"]) == 1
    # unlocked fields are fine
    assert main(["simulate", "--preset", "fig2", "--seed", "3", "--dt", "0.1"]) == 0
    assert ScenarioPreset.get("fig3").locked


def test_dump_effective_config(capsys, tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"verify": {"seed": 99}}))
    assert main(["verify", "--preset", "fig2", "--config", str(cfg_file), "--n-paths", "10", "--dump-effective-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["verify"]["seed"] == 99 and cfg["verify"]["n_paths"] == 10
    assert cfg["market"]["b_lo"] == [0.3]


def test_saddle_commands_json(capsys):
    assert main(["saddle-g", "--preset", "fig3", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["value"] == pytest.approx(0.1171875, abs=1e-12)
    assert main(["saddle-h", "--preset", "drift_only_demo", "--z", "0.2", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["value"] == pytest.approx(0.1796875, abs=1e-12)


def test_ode_condition_violation_exit(capsys, tmp_path):
    cfg = effective_config("fig2", None, [])
    cfg["preferences"]["lambda"] = {"kind": "exponential", "alpha": 4.0, "beta": 0.5, "rate_base": 0.12}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert main(["ode", "--preset", "custom", "--config", str(path)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["condition"] == "condition_1"
    assert err["first_violation_time"] == pytest.approx(np.log(16 / 15), abs=1e-6)
    assert main(["ode", "--preset", "fig2", "--json"]) == 0
    capsys.readouterr()


def test_condition_violation_exit_code(capsys, tmp_path):
    cfg = effective_config("drift_only_demo", None, [])
    cfg["preferences"]["lambda"] = {"kind": "exponential", "alpha": 5.0, "beta": 0.5, "rate_base": 0.12}
    cfg["bsde"]["T"] = 10.0
    cfg["preferences"]["horizon"] = 10.0
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert main(["pipeline-drift-only", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["condition"] == "condition_2" and err["first_violation_time"] > 0


def test_missing_config_is_io_error(capsys):
    assert main(["saddle-g", "--config", "/nonexistent/c.json"]) == 4


def test_pipeline_drift_only(tmp_path, capsys):
    out = tmp_path / "p"
    assert main(["pipeline-drift-only", "--preset", "drift_only_demo", "--out", str(out)]) == 0
    doc = json.loads((out / "verify.json").read_text())
    assert doc["Y0"] == pytest.approx(1.2 * (1 - np.exp(-5.0)), abs=1e-8)
    assert doc["Z_max_abs"] == 0.0 and doc["drift_zero_pass"]
    header, _ = read_csv(out / "bsde.csv")
    assert header == ["t", "Y", "Z_1", "tail_estimate"]
    header, _ = read_csv(out / "preference.csv")
    assert header == ["t", "Y", "g", "c_star", "U_at_x", "Uc_at_C"]
    capsys.readouterr()


def test_pipeline_lsmc_degenerate(tmp_path, capsys):
    cfg = effective_config("drift_only_demo", None, [])
    cfg["bsde"].update(
        T=3.0, dt=0.05, n_paths=5000,
        sigma_model={"kind": "markov_factor", "kappa": 1.0, "theta": 0.0, "eta": 0.0, "v0": 0.0, "s_lo": [0.5], "s_hi": [0.5]},
    )
    cfg["preferences"]["horizon"] = 3.0
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert main(["pipeline-drift-only", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    doc = json.loads((tmp_path / "o" / "verify.json").read_text())
    assert doc["lsmc_within_tolerance"]
    capsys.readouterr()


def test_verify_and_bsde_commands(tmp_path, capsys):
    assert main(["verify", "--preset", "fig2", "--n-paths", "2000", "--dt", "0.01", "--out", str(tmp_path / "v")]) == 0
    doc = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert doc["verdict"] == "martingale-consistent"
    assert main(["bsde", "--preset", "drift_only_demo", "--T", "10", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["Y0"] == pytest.approx(1.2 * (1 - np.exp(-1.0)), abs=1e-8)
