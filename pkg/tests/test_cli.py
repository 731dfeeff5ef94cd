import csv
import io

import numpy as np
import pytest
import tomli

from conftest import SCENARIOS
from pidpbc.cli import main, read_trajectory_csv


def test_simulate_writes_versioned_csv(tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["simulate", str(SCENARIOS / "boost_wave1.scn"), "--duration", "0.01", "--no-sweep",
               "--decimate", "100", "--out", str(out)])
    assert rc == 0
    path = tmp_path / "run.csv"
    assert path.read_text().startswith("# format_version = 1\n")
    header, data = read_trajectory_csv(path)
    assert header[:3] == ["time_s", "i_L_A", "v_C_V"]
    assert data.shape == (11, len(header))
    assert np.allclose(data[:, 2], 380.0, rtol=1e-12)
    assert "wrote" in capsys.readouterr().out


def test_simulate_sweep_variants(tmp_path):
    rc = main(["simulate", str(SCENARIOS / "boost_wave1.scn"), "--duration", "0.005", "--decimate", "100",
               "--workers", "2", "--out", str(tmp_path / "wave.csv")])
    assert rc == 0
    assert len(list(tmp_path.glob("wave*.csv"))) == 5


def test_read_rejects_unversioned(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("time_s,u\n0.0,1.0\n")
    with pytest.raises(ValueError):
        read_trajectory_csv(path)


def test_certify(tmp_path):
    out = tmp_path / "cert.toml"
    assert main(["certify", str(SCENARIOS / "boost_pid.sys"), "--out", str(out)]) == 0
    rep = tomli.loads(out.read_text())
    assert rep["format_version"] == 1 and rep["satisfied"] is True
    assert rep["variant"] == "pid" and rep["alpha_per_s"] > 0
    assert all(c["holds"] for c in rep["conditions"])


def test_certify_unsatisfied_exit_code(tmp_path):
    out = tmp_path / "cert.toml"
    rc = main(["certify", str(SCENARIOS / "vsc.sys"), "--out", str(out)])
    rep = tomli.loads(out.read_text())
    assert rc == (0 if rep["satisfied"] else 1)


def test_equilibrium_boost(capsys):
    assert main(["equilibrium", str(SCENARIOS / "boost_pid.sys"), "--vref", "400"]) == 0
    rep = tomli.loads(capsys.readouterr().out)
    assert rep["format_version"] == 1
    assert rep["x_star"][1] == pytest.approx(400.0, rel=1e-12)
    assert rep["gamma_positive"] and rep["delta_x"] == pytest.approx(abs(rep["gamma"] - 1.0), rel=1e-15)
    assert rep["gamma"] == pytest.approx(rep["p_net_W"] / rep["p_loss_W"], rel=1e-12)


def test_equilibrium_vsc_current_reference(capsys):
    assert main(["equilibrium", str(SCENARIOS / "vsc.sys"), "--idref", "1000"]) == 0
    rep = tomli.loads(capsys.readouterr().out)
    assert rep["system"] == "vsc"
    assert rep["x_star"][:2] == [1000.0, 0.0]


def test_equilibrium_infeasible_exit_code(capsys):
    assert main(["equilibrium", str(SCENARIOS / "boost_pid.sys"), "--vref", "5000"]) == 3
    assert "infeasible" in capsys.readouterr().err


def test_equilibrium_wrong_reference_kind():
    assert main(["equilibrium", str(SCENARIOS / "vsc.sys"), "--vref", "3"]) == 2


def test_malformed_file_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.sys"
    bad.write_text("format_version = 1\n[system\n")
    assert main(["certify", str(bad)]) == 2
    assert "bad.sys:2:" in capsys.readouterr().err


def test_missing_file_exit_code(tmp_path):
    assert main(["certify", str(tmp_path / "nope.sys")]) == 2


def _sweep_rows(text):
    lines = text.splitlines()
    assert lines[0] == "# format_version = 1"
    return list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


def test_sweep_random_initial_is_seeded(tmp_path):
    args = ["sweep", str(SCENARIOS / "boost_wave1.scn"), "--duration", "0.005", "--decimate", "100",
            "--random-initial", "3", "--seed", "7"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(args + ["--workers", "2", "--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    ra, rb = _sweep_rows(a.read_text()), _sweep_rows(b.read_text())
    assert [r["case"] for r in ra] == ["initial_0", "initial_1", "initial_2"]
    key = ["end_i_L_A", "end_v_C_V"]
    assert [[r[k] for k in key] for r in ra] == [[r[k] for k in key] for r in rb]


def test_sweep_gain_values(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sweep", str(SCENARIOS / "boost_wave1.scn"), "--duration", "0.005", "--decimate", "100",
                 "--param", "K_P", "--values", "1e-6", "2e-6", "--out", str(out)]) == 0
    rows = _sweep_rows(out.read_text())
    assert [r["case"] for r in rows] == ["K_P=1e-06", "K_P=2e-06"]
    assert all(r["status"] == "ok" for r in rows)


def test_sweep_param_needs_values():
    assert main(["sweep", str(SCENARIOS / "boost_wave1.scn"), "--param", "K_P"]) == 2
