import csv
import json
import os
import subprocess
import sys
from pathlib import Path

from scaledwt.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from scaledwt.inflow import WindSequence
from scaledwt.sysid import LinearModel

SHORT = ["--set", "inflow.gust.duration_s=1.0", "--set", "inflow.turbulence.duration_s=1.0"]


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["simulate", "--bogus"]) == EXIT_USAGE
    bad = tmp_path / "bad.toml"
    bad.write_text("[sim]\nrepeats = 3\nfoo = 1\n")
    assert main(["simulate", "--config", str(bad)]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "sim.foo" in err and "line 3" in err
    assert main(["simulate", "--controller", "nope"]) == EXIT_USAGE


def test_sysid_writes_model_and_identifies(tmp_path, capsys):
    out = tmp_path / "m.json"
    ident = tmp_path / "id.json"
    code = main(["sysid", "--out", str(out), "--identify", "--identified-out", str(ident)])
    assert code == EXIT_OK
    m = LinearModel.load(out)
    assert m.op_point.v == 12.0
    assert LinearModel.load(ident).A.shape == (2, 2)
    assert "max relative entry error" in capsys.readouterr().out


def test_sysid_tolerance_failure_exits_1(tmp_path):
    assert main(["sysid", "--out", str(tmp_path / "m.json"), "--identify",
                 "--samples", "300", "--tol", "1e-12"]) == EXIT_FAIL


def test_simulate_outputs(tmp_path):
    code = main(["simulate", "--scenario", "gust", "--controller", "mpc", "--out-dir",
                 str(tmp_path), *SHORT])
    assert code == EXIT_OK
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "gust_mpc_s0.csv" in names and "gust_mpc_s0_metrics.json" in names
    assert sum(n.endswith(".svg") for n in names) == 4
    metrics = json.loads((tmp_path / "gust_mpc_s0_metrics.json").read_text())
    assert metrics["constraint_violations"] == 0 and metrics["aborted"] is False


def test_simulate_with_saved_model(tmp_path):
    model = tmp_path / "m.json"
    assert main(["sysid", "--out", str(model)]) == EXIT_OK
    assert main(["simulate", "--model", str(model), "--out-dir", str(tmp_path / "o"),
                 *SHORT]) == EXIT_OK


def test_outputs_are_byte_identical_across_runs(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "--scenario", "turbulence", "--controller", "lqr_preview",
                     "--seed", "3", "--out-dir", str(tmp_path / d), *SHORT]) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_compare_writes_table(tmp_path, capsys):
    code = main(["compare", "--repeats", "2", "--controller", "pi", "--controller", "mpc",
                 "--out-dir", str(tmp_path), *SHORT])
    assert code == EXIT_OK
    rows = (tmp_path / "compare.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2
    assert rows[0].startswith("scenario,controller,repeats,rms_speed_err_mean")
    assert (tmp_path / "compare_gust_omega_err_rad_s.svg").exists()
    assert "turbulence" in capsys.readouterr().out


def test_compare_seed_base_with_config_file(tmp_path):
    cfg = Path(__file__).resolve().parents[1] / "configs" / "default.toml"
    code = main(["compare", "--config", str(cfg), "--repeats", "2", "--seed-base", "42",
                 "--scenario", "turbulence", "--controller", "lqr", "--out-dir", str(tmp_path),
                 *SHORT])
    assert code == EXIT_OK
    with open(tmp_path / "compare.csv") as fh:
        (row,) = list(csv.DictReader(fh))
    assert row["seeds"] == "42 43" and row["repeats"] == "2"


def test_gen_inflow_round_trip(tmp_path):
    out = tmp_path / "w.csv"
    assert main(["gen-inflow", "--scenario", "turbulence", "--seed", "9", "--out", str(out),
                 *SHORT]) == EXIT_OK
    seq = WindSequence.from_csv(out)
    assert len(seq) == 1001 and seq.seed == 9


def test_replay_validate_record_then_check(tmp_path, capsys):
    g = tmp_path / "g.csv"
    mpc = ["--controller", "mpc", *SHORT]
    assert main(["replay-validate", "--golden", str(g), "--record", *mpc]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    assert main(["replay-validate", "--golden", str(g), *mpc]) == EXIT_OK
    code = main(["replay-validate", "--golden", str(g), "--set", "controller.mpc.Ru=1010.0",
                 *mpc])
    assert code == EXIT_FAIL
    assert "first divergence" in capsys.readouterr().out
    assert main(["replay-validate", "--golden", str(tmp_path / "missing.csv")]) == EXIT_FAIL
    # golden recorded with the MPC horizon, replayed through the PI controller
    assert main(["replay-validate", "--golden", str(g), "--controller", "pi"]) == EXIT_FAIL


def test_tune_horizon_reports_each_budget(tmp_path, capsys):
    code = main(["tune-horizon", "--budget-us", "1e9", "--budget-us", "1", "--trials", "5",
                 "--np-grid", "1", "3", *SHORT])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "budget      1e+09 us -> Np = 3" in out
    assert "budget          1 us -> Np = 1  (no horizon meets" in out
    assert main(["tune-horizon", "--budget-us", "100", "--controller", "pi"]) == EXIT_USAGE


def test_hil_commands_end_to_end(tmp_path):
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    plant = subprocess.Popen(
        [sys.executable, "-m", "scaledwt", "hil-plant", "--port", "0", "--out-dir",
         str(tmp_path), "--deadline-us", "5e6", *SHORT],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env)
    try:
        line = plant.stdout.readline()
        assert line.startswith("listening on"), line + plant.stderr.read()
        port = line.strip().rsplit(":", 1)[1]
        assert main(["hil-controller", "--port", port, *SHORT]) == EXIT_OK
        assert plant.wait(timeout=30) == EXIT_OK
    finally:
        plant.kill()
        plant.stdout.close()
        plant.stderr.close()
    stats = json.loads((tmp_path / "hil_gust_pi_s0_stats.json").read_text())
    assert stats["ticks"] == 101 and stats["misses"] == 0 and stats["error"] is None


def test_hil_controller_without_server_fails(capsys):
    assert main(["hil-controller", "--port", "1", "--connect-timeout", "0.5"]) == EXIT_FAIL
    assert "error" in capsys.readouterr().err
