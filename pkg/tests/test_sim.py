import numpy as np
import pytest

from scaledwt.control import Controller, ControllerOutput, CtrlStatus
from scaledwt.model import TurbineParams
from scaledwt.sim import (ABORT_AFTER_FAULTS, LOG_COLUMNS, ControllerSpec, InflowSpec, SimConfig,
                          SimLog, align_by_timing_signal, compute_metrics, golden_compare,
                          make_plant, rising_edges, run_closed_loop, run_comparison)

PLANT = make_plant()
PARAMS = PLANT.params
KINDS = ("pi", "lqr", "lqr_preview", "mpc")


def _log(cmd, beta=None, err=None, status=None, pulse_at=0):
    n = len(cmd)
    cols = {c: np.zeros(n) for c in LOG_COLUMNS}
    cols["beta_cmd_rad"] = np.asarray(cmd, float)
    cols["beta_rad"] = np.asarray(cmd if beta is None else beta, float)
    if err is not None:
        cols["omega_err_rad_s"] = np.asarray(err, float)
    cols["ctrl_status"] = np.zeros(n, int) if status is None else np.asarray(status)
    ts = np.zeros(n, int)
    ts[pulse_at] = 1
    cols["timing_signal"] = ts
    return SimLog(cols).finalize()


def _cfg(kind="mpc", inflow=None, seed=0, **kw):
    return SimConfig(inflow=inflow or InflowSpec(), controller=ControllerSpec(name=kind, type=kind,
                                                                              **kw), seed=seed)


# --- metrics and traces ----------------------------------------------------

def test_metrics_examples():
    log = _log([0.0, 0.0035, 0.01, 2.0], err=[0.0, 3.0, -4.0, 0.0],
               status=[0, 1, 1, 0])
    m = compute_metrics(log, PARAMS, ctrl_period=0.01)
    assert m.rms_speed_err == pytest.approx(2.5)
    assert m.max_speed_err == 4.0
    assert m.pitch_travel == pytest.approx(2.0)
    # 0.0035 is a legal step (0.35 rad/s · 0.01 s), 0.0065 and the jump to 2.0 are not,
    # and 2.0 is also beyond pitch_max
    assert m.constraint_violations == 3
    assert m.fallback_count == 2


def test_metrics_reject_empty_log():
    with pytest.raises(ValueError):
        compute_metrics(SimLog.empty().finalize(), PARAMS)


def test_metrics_trivial_cases():
    m = compute_metrics(_log(np.full(20, 0.3), err=np.full(20, -0.7)), PARAMS)
    assert m.rms_speed_err == pytest.approx(0.7, rel=1e-15)
    assert m.pitch_travel == 0.0 and m.constraint_violations == 0


def test_metrics_two_segment_log():
    # 30 samples at 0.2 and 10 at -0.6: rms = sqrt((30·0.04 + 10·0.36) / 40) = sqrt(0.12)
    err = np.concatenate([np.full(30, 0.2), np.full(10, -0.6)])
    m = compute_metrics(_log(np.zeros(40), err=err), PARAMS)
    assert m.rms_speed_err == pytest.approx(np.sqrt(0.12), rel=1e-14)
    assert m.max_speed_err == pytest.approx(0.6)


def test_golden_compare_examples():
    a = _log(np.linspace(0, 1, 50))
    rep = golden_compare(a, a, 1e-12)
    assert rep.passed and rep.max_abs_diff == 0.0
    cmd = np.linspace(0, 1, 50)
    cmd[17] += 1e-3
    rep = golden_compare(a, _log(cmd), 1e-6)
    assert not rep and rep.first_divergence_index == 17
    assert rep.max_abs_diff == pytest.approx(1e-3)
    with pytest.raises(ValueError, match="50 vs 49"):
        golden_compare(np.zeros(50), np.zeros(49), 1e-9)


def test_golden_compare_aligns_on_timing_pulse():
    base = np.linspace(0, 1, 60)
    a = _log(base[:50], pulse_at=5)
    b = _log(base[3:53], pulse_at=2)  # same signal, captured three samples late
    assert golden_compare(a, b, 0.0).passed
    assert not golden_compare(a, b, 0.0, align=False).passed


def test_alignment_requires_exactly_one_pulse():
    a = _log(np.zeros(10))
    cols = dict(a.columns)
    cols["timing_signal"] = np.zeros(10, int)
    with pytest.raises(ValueError, match="rising edges"):
        align_by_timing_signal([a, SimLog(cols)])
    assert list(rising_edges([0, 1, 1, 0, 1])) == [1, 4]


def test_log_csv_round_trip(tmp_path):
    res = run_closed_loop(_cfg(inflow=InflowSpec(duration=0.5)))
    res.log.to_csv(tmp_path / "a.csv", comment="x")
    back, _, comment = SimLog.from_csv(tmp_path / "a.csv")
    assert comment == "x"
    for c in LOG_COLUMNS:
        assert np.array_equal(back[c], res.log[c])
    (tmp_path / "b.csv").write_text("t_s,foo\n")
    with pytest.raises(ValueError, match="header"):
        SimLog.from_csv(tmp_path / "b.csv")


# --- closed loop -----------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_equilibrium_persists_at_design_wind(kind):
    inflow = InflowSpec(kind="constant", v0=12.0, duration=3.0, preview_noise_std=0.0)
    res = run_closed_loop(_cfg(kind, inflow))
    assert np.max(np.abs(res.log["omega_err_rad_s"])) <= 1e-6
    assert not res.aborted


@pytest.mark.parametrize("kind", KINDS)
def test_runs_are_bit_identical(kind, tmp_path):
    inflow = InflowSpec(kind="turbulence", duration=2.0)
    a = run_closed_loop(_cfg(kind, inflow, seed=4))
    b = run_closed_loop(_cfg(kind, inflow, seed=4))
    a.log.to_csv(tmp_path / "a.csv")
    b.log.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c = run_closed_loop(_cfg(kind, inflow, seed=5))
    assert not np.array_equal(a.log["v_hub_mps"], c.log["v_hub_mps"])


def test_log_has_one_row_per_wind_sample_and_held_commands():
    cfg = _cfg("mpc", InflowSpec(duration=1.0))
    res = run_closed_loop(cfg)
    assert len(res.log) == 1001
    cmd = res.log["beta_cmd_rad"]
    for start in range(0, 1000, cfg.ratio):
        assert np.all(cmd[start:start + cfg.ratio] == cmd[start])
    assert np.all(np.diff(res.log["t_s"]) > 0)


def test_plant_step_refinement_barely_moves_the_trajectory():
    inflow = InflowSpec(duration=4.0, preview_noise_std=0.0)
    coarse = run_closed_loop(SimConfig(inflow=inflow, controller=ControllerSpec()))
    fine = run_closed_loop(SimConfig(inflow=inflow, controller=ControllerSpec(),
                                     dt_plant=0.0005))
    assert len(fine.log) == 2 * len(coarse.log) - 1
    om_c = coarse.log["omega_rad_s"]
    om_f = fine.log["omega_rad_s"][::2]
    # wind is held over each plant step, so the discrepancy is first order in dt_plant
    assert np.max(np.abs(om_c - om_f)) <= 1e-2 * np.max(np.abs(coarse.log["omega_err_rad_s"]))


def test_non_integer_rate_ratio_is_rejected():
    with pytest.raises(ValueError):
        SimConfig(dt_plant=0.003, ctrl_period=0.01)


def test_comparison_is_independent_of_controller_order():
    gust = InflowSpec(duration=3.0)
    specs = [ControllerSpec(name=k, type=k) for k in ("pi", "mpc")]
    a = run_comparison([gust], specs, repeats=2)
    b = run_comparison([gust], specs[::-1], repeats=2)
    for key, runs in a.runs.items():
        assert [m.as_dict() for m in runs] == [m.as_dict() for m in b.runs[key]]
    with pytest.raises(ValueError):
        run_comparison([gust], specs + specs[:1])


def test_identical_specs_give_identical_aggregates():
    turb = InflowSpec(name="turbulence", kind="turbulence", duration=2.0)
    specs = [ControllerSpec(name="a", type="lqr_preview"),
             ControllerSpec(name="b", type="lqr_preview")]
    rep = run_comparison([turb], specs, repeats=3, keep_logs=True)
    assert rep.seeds == [0, 1, 2]
    for f in ("rms_speed_err", "max_speed_err", "pitch_travel"):
        assert rep.aggregate("turbulence", "a", f) == rep.aggregate("turbulence", "b", f)
    assert np.array_equal(rep.example_logs[("turbulence", "a")]["v_hub_mps"],
                          rep.example_logs[("turbulence", "b")]["v_hub_mps"])
    with pytest.raises(ValueError, match="scenario"):
        run_comparison([turb, turb], specs[:1], repeats=1)
    with pytest.raises(ValueError, match="seeds"):
        run_comparison([turb], specs[:1], seeds=[1, 2], repeats=3)


class _Constant(Controller):
    name, Np = "constant", 1

    def __init__(self, beta):
        self.beta = beta

    def initialize(self, beta0, preview=None):
        pass

    def step(self, inp):
        return ControllerOutput(self.beta)


def test_constant_command_trajectory_is_independent_of_ctrl_period():
    inflow = InflowSpec(duration=3.0)
    logs = [run_closed_loop(SimConfig(inflow=inflow, ctrl_period=Ts), make_plant(Ts=Ts),
                            controller=_Constant(0.5)).log for Ts in (0.005, 0.01, 0.02)]
    for lg in logs[1:]:
        assert np.array_equal(lg["omega_rad_s"], logs[0]["omega_rad_s"])
        assert np.array_equal(lg["beta_rad"], logs[0]["beta_rad"])


def test_gust_preview_beats_feedback_only_lqr():
    fb = run_closed_loop(_cfg("lqr")).metrics.rms_speed_err
    pv = run_closed_loop(_cfg("lqr_preview")).metrics.rms_speed_err
    assert pv < fb


def test_mpc_keeps_gust_commands_feasible():
    res = run_closed_loop(_cfg("mpc"))
    assert res.metrics.constraint_violations == 0
    assert res.metrics.fallback_count == 0
    assert res.metrics.solve_time_p99 > 0


def test_unconstrained_lqr_violates_rate_on_gust():
    free = run_closed_loop(_cfg("lqr", rate_limit=False))
    clipped = run_closed_loop(_cfg("lqr"))
    assert free.metrics.constraint_violations > 0
    assert clipped.metrics.constraint_violations == 0
    assert clipped.metrics.rate_limited_ticks > 0


def test_pi_regulates_a_wind_step():
    inflow = InflowSpec(kind="step", v0=12.0, v1=13.0, t_step=1.0, duration=15.0,
                        preview_noise_std=0.0)
    res = run_closed_loop(_cfg("pi", inflow))
    err = res.log["omega_err_rad_s"]
    assert np.max(np.abs(err)) > 0.1
    assert np.max(np.abs(err[-1000:])) <= 0.02 * np.max(np.abs(err))


class _Broken(Controller):
    name, Np = "broken", 5

    def initialize(self, beta0, preview=None):
        self.beta0 = beta0

    def step(self, inp):
        return ControllerOutput(self.beta0, CtrlStatus.FAULT)


def test_run_aborts_after_consecutive_faults():
    cfg = _cfg("pi", InflowSpec(duration=2.0))
    res = run_closed_loop(cfg, controller=_Broken())
    assert res.aborted
    ticks = ABORT_AFTER_FAULTS
    assert len(res.log) == (ticks - 1) * cfg.ratio + 1
    assert np.all(res.log["ctrl_status"] == CtrlStatus.FAULT)


def test_unknown_names_are_rejected():
    with pytest.raises(ValueError):
        ControllerSpec(type="hinf")
    with pytest.raises(ValueError):
        InflowSpec(kind="storm").build(0.001)
    with pytest.raises(ValueError):
        _cfg(inflow=InflowSpec(duration=0.0))


def test_default_params_match_plant():
    assert PLANT.params == TurbineParams()
    assert PLANT.op.v == 12.0
