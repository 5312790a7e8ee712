import subprocess
import sys

import pytest
import yaml

from moldflux.cli import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main
from moldflux.config import ConfigError, parse_config

BASE = {
    "physics": {"k_s": 383, "rho": 8940, "C_p": 390, "h": 5.66e4, "T_f": 350, "T_0": 350},
    "time": {"t_f": 4.0, "dt": 0.5, "f_samp": 1.0},
    "mesh": {"counts": [10, 3, 6]},
    "sensors": {"n_x": 3, "n_z": 2, "depth": 0.02},
    "basis": {"eta": 3.0, "time_basis": "linear"},
    "benchmark": {"id": 1},
    "seed": 5,
}


def _write(tmp_path, data, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def _run(tmp_path, command, data, *extra):
    return main([command, "--config", _write(tmp_path, data), "--out", str(tmp_path / "out"), *extra])


def test_direct_then_invert(tmp_path):
    assert _run(tmp_path, "direct", BASE) == EXIT_OK
    meas = tmp_path / "out" / "measurements.csv"
    text = meas.read_text()
    assert "# command direct" in text and "# seed 5" in text and "config_fingerprint" in text
    assert sum(1 for l in text.splitlines() if l and l[0].isdigit()) == 4 * 6
    assert _run(tmp_path, "invert", BASE, "--measurements", str(meas)) == EXIT_OK
    w = (tmp_path / "out" / "weights.csv").read_text().splitlines()
    assert any(l.startswith("k,tau_s,w1") for l in w)
    diag = [l for l in (tmp_path / "out" / "diagnostics.csv").read_text().splitlines() if not l.startswith("#")]
    assert len(diag) == 5


def test_direct_fields_and_uniform_flux(tmp_path):
    cfg = dict(BASE, direct={"flux": 0.0, "write_fields": True})
    assert _run(tmp_path, "direct", cfg) == EXIT_OK
    rows = [l for l in (tmp_path / "out" / "trajectory.csv").read_text().splitlines() if l[0].isdigit()]
    assert len(rows) == 5 * 180
    # zero flux from equilibrium stays at the coolant temperature
    assert all(abs(float(r.split(",")[3]) - 350.0) < 1e-9 for r in rows)


def test_offline_outputs(tmp_path):
    assert _run(tmp_path, "offline", BASE) == EXIT_OK
    out = tmp_path / "out"
    for name in ("offline_matrices.csv", "spectrum_Theta.csv", "spectrum_Theta_tilde.csv"):
        assert (out / name).exists()
    assert len(list((out / "cache").glob("offline_*.npz"))) == 1


def test_benchmark_rerun_identical(tmp_path):
    cfg = dict(BASE, sweep={"meshes": [5], "dts": [0.5], "p_gs": [0.0], "omegas": [0.0, 0.1], "samples": 2})
    assert _run(tmp_path, "benchmark", cfg) == EXIT_OK
    first = (tmp_path / "out" / "results.csv").read_bytes()
    assert _run(tmp_path, "benchmark", cfg) == EXIT_OK
    assert (tmp_path / "out" / "results.csv").read_bytes() == first
    assert (tmp_path / "out" / "timing.csv").exists()
    assert list((tmp_path / "out").glob("measurements_mesh*_dt*.csv"))


def test_select_small(tmp_path):
    cfg = dict(BASE, selection={"meshes": [5], "dts": [0.25, 0.5], "p_g0": 1e-7, "max_outer": 5})
    assert _run(tmp_path, "select", cfg) == EXIT_OK
    out = tmp_path / "out"
    assert (out / "training_measurements.csv").exists()
    trace = [l.split(",") for l in (out / "selection_trace.csv").read_text().splitlines() if l[0].isdigit()]
    assert trace[0][0] == "0" and trace[-1][1] == "mesh5"
    # the final pick repeats the one before it
    assert trace[-1][1:3] == trace[-2][1:3]
    stab = [l for l in (out / "selection_stability.csv").read_text().splitlines() if l[0].isdigit()]
    assert len(stab) >= 1


def test_seed_override(tmp_path):
    assert _run(tmp_path, "direct", BASE, "--seed", "11") == EXIT_OK
    assert "# seed 11" in (tmp_path / "out" / "measurements.csv").read_text()


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(bogus={}),
    lambda d: d["physics"].update(kappa=1.0),
    lambda d: d.pop("physics"),
    lambda d: d["physics"].update(k_s=-1.0),
    lambda d: d.update(mesh={"ladder": 9}),
    lambda d: d.update(mesh={}),
    lambda d: d["time"].update(dt=0.3),
    lambda d: d["sensors"].update(depth=0.5),
    lambda d: d["sensors"].update(probe="nearest"),
    lambda d: d.update(seed="x"),
])
def test_bad_config_exit_2(tmp_path, mutate):
    data = yaml.safe_load(yaml.safe_dump(BASE))
    mutate(data)
    assert _run(tmp_path, "direct", data) == EXIT_CONFIG


def test_input_errors_exit_2(tmp_path):
    assert main(["direct", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    (tmp_path / "bad.yaml").write_text("physics: [unclosed\n")
    assert main(["direct", "--config", str(tmp_path / "bad.yaml")]) == EXIT_CONFIG
    assert _run(tmp_path, "direct", BASE, "--threads", "0") == EXIT_CONFIG
    assert _run(tmp_path, "invert", BASE) == EXIT_CONFIG
    assert _run(tmp_path, "invert", BASE, "--measurements", str(tmp_path / "none.csv")) == EXIT_CONFIG


def test_singular_system_exit_3(tmp_path):
    cfg = dict(BASE, sensors={"points": [[0.5, 0.02, 0.5], [0.5, 0.02, 0.5]]})
    assert _run(tmp_path, "direct", cfg) == EXIT_OK
    meas = str(tmp_path / "out" / "measurements.csv")
    assert _run(tmp_path, "invert", cfg, "--measurements", meas) == EXIT_SOLVER


def test_parse_config_strict():
    with pytest.raises(ConfigError):
        parse_config(["not", "a", "mapping"])
    cfg = parse_config({"mesh": {"ladder": 5}})
    assert cfg.build_mesh().n_cells == 1500 and cfg.physics is None
    a, b = parse_config(BASE), parse_config(dict(BASE, seed=6))
    assert a.fingerprint() != b.fingerprint() and a.fingerprint() == parse_config(BASE).fingerprint()


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "moldflux.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("moldflux ")
    r = subprocess.run([sys.executable, "-m", "moldflux.cli", "nonsense"], capture_output=True, text=True)
    assert r.returncode == 2
