import json
import math

import numpy as np
import pytest

from ablab.cli import ConfigError, main, parse_rate, parse_time, read_config_file


def test_units():
    assert parse_time("200ns") == pytest.approx(2e-7)
    assert parse_time("2 us") == pytest.approx(2e-6)
    assert parse_rate("1.2e-3/ns") == pytest.approx(1.2e6)
    with pytest.raises(ConfigError):
        parse_time("200")


def test_unknown_key_in_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("tau = 100ns\nwarp_factor = 9\n")
    with pytest.raises(ConfigError, match="warp_factor"):
        read_config_file(cfg)
    assert main(["plan", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_trajectory_defaults(tmp_path):
    assert main(["trajectory", "--out", str(tmp_path), "--n-substeps", "50", "--duration", "1us"]) == 0
    files = sorted(p.name for p in tmp_path.glob("trajectory_*.csv"))
    assert files == ["trajectory_gt0.1.csv", "trajectory_gt0.3679.csv", "trajectory_gt1.csv"]
    manifest = json.loads((tmp_path / "manifest_trajectory.json").read_text())
    assert set(manifest["outputs"]) == set(files)
    assert manifest["config"]["n_substeps"] == "50"


def test_trajectory_zero_gamma_constant(tmp_path):
    assert main(["trajectory", "--out", str(tmp_path), "--gamma", "0", "--n-substeps", "20",
                 "--duration", "500ns"]) == 0
    data = np.loadtxt(tmp_path / "trajectory_gt0.csv", delimiter=",", skiprows=2)
    assert np.all(data[20:, 1] == data[20, 1])


def test_odd_substeps_rejected(tmp_path, capsys):
    assert main(["trajectory", "--out", str(tmp_path), "--n-substeps", "501"]) == 1
    assert "n_substeps" in capsys.readouterr().err


def test_missing_unit_rejected(tmp_path, capsys):
    assert main(["trajectory", "--out", str(tmp_path), "--tau", "100"]) == 1
    assert "tau" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("n_substeps = 40\nduration = 400ns\ngamma = 0.5\n")
    assert main(["trajectory", "--config", str(cfg), "--n-substeps", "20", "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "manifest_trajectory.json").read_text())
    assert m["config"]["n_substeps"] == "20" and m["config"]["gamma"] == "0.5"


def test_ensemble_deterministic_and_divergence_gate(tmp_path):
    args = ["ensemble", "--n-pulses", "20", "--n-substeps", "20", "--duration", "1us", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    ma = json.loads((tmp_path / "a" / "manifest_ensemble.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest_ensemble.json").read_text())
    assert ma["outputs"] == mb["outputs"]
    code = main(["ensemble", "--n-pulses", "10", "--n-substeps", "20", "--duration", "10us",
                 "--gamma", "2.5", "--max-divergent-fraction", "0", "--out", str(tmp_path / "c")])
    assert code == 3


def test_generate_analyze_fit_chain(tmp_path):
    common = ["--tau", "100ns", "--n-substeps", "20", "--duration", "800ns", "--tau-res", "10ns",
              "--out", str(tmp_path)]
    assert main(["generate", "--n-pulses", "300", "--chsh", "true", "--gamma", "0.2"] + common) == 0
    runs = ",".join(str(tmp_path / f"run_{i}.txt") for i in range(4))
    assert main(["analyze", "--input", runs, "--chsh", "true", "--bin-width", "50ns"] + common) == 0
    header = (tmp_path / "timeseries.csv").read_text().splitlines()[0]
    assert header.startswith("bin_center_ns,eta")
    assert main(["fit", "--input", str(tmp_path / "timeseries.csv")] + common) == 0
    assert (tmp_path / "fit.csv").read_text().startswith("delta_est,gamma_est,eta0,slope,factor")


def test_analyze_missing_setting(tmp_path, capsys):
    common = ["--n-substeps", "20", "--duration", "800ns", "--tau-res", "10ns", "--out", str(tmp_path)]
    assert main(["generate", "--n-pulses", "5"] + common) == 0
    assert main(["analyze", "--input", str(tmp_path / "run.txt"), "--chsh", "true"] + common) == 2
    assert "missing CHSH setting" in capsys.readouterr().err


def test_fit_anchor_and_threshold(tmp_path):
    base = ["fit", "--eta0", "0.03", "--slope", "1.2e-3/ns", "--correction-factor", "3",
            "--out", str(tmp_path)]
    assert main(base + ["--expect-gamma", "0.04/ns", "--rel-tol", "0.05"]) == 0
    assert main(base + ["--expect-delta", "0.2"]) == 3
    row = (tmp_path / "fit.csv").read_text().splitlines()[1].split(",")
    assert float(row[0]) == pytest.approx(0.0672, abs=1e-3)


def test_plan_reports(tmp_path, capsys):
    good = ["plan", "--tau-res", "2ns", "--tau-rf", "2ns", "--tau", "200ns", "--tau-pulse", "2us",
            "--rp-inverse", "20us", "--tau-d", "1us", "--out", str(tmp_path)]
    assert main(good) == 0
    assert main(["plan", "--tau-res", "12.5ns", "--tau", "0.27ns", "--out", str(tmp_path)]) == 3
    assert "violation" in capsys.readouterr().out


def test_sweep(tmp_path):
    assert main(["sweep", "--taus", "100ns,200ns", "--gamma", "1.0", "--n-pulses", "40",
                 "--n-substeps", "20", "--duration", "2us", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(rows) == 3
    sat = [float(r.split(",")[2]) for r in rows[1:]]
    assert sat[1] / sat[0] == pytest.approx(2.0, rel=0.1)
    assert math.isfinite(sat[0])
