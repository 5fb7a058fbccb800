"""Deterministic software-in-the-loop harness.

The plant integrates at ``dt_plant``; the controller runs every
``ctrl_period`` with its command held in between.  Generator torque is
fixed at rated, so the runs are above-rated pitch-regulation experiments.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import inflow
from .control import (Controller, ControllerInput, CtrlStatus, LqrController, MpcController,
                      PiController, PiGains, PitchLimits, design_lq, mpc_build)
from .model import TurbineParams, rk4
from .sysid import LinearModel, NoEquilibriumError, find_equilibrium, linearize, operating_point

LOG_COLUMNS = ("t_s", "timing_signal", "v_hub_mps", "v_preview0_mps", "omega_rad_s",
               "omega_err_rad_s", "beta_rad", "beta_cmd_rad", "qgen_Nm", "ctrl_status",
               "solve_time_us")
INT_COLUMNS = ("timing_signal", "ctrl_status")
ABORT_AFTER_FAULTS = 10


# ---------------------------------------------------------------------------
# configuration

@dataclass
class InflowSpec:
    """Scenario definition; ``kind`` selects which parameters are used."""

    name: str = "gust"
    kind: str = "gust"
    duration: float = 10.0  # s
    v0: float = 12.0  # m/s (constant, step start, gust base)
    v1: float = 14.0  # m/s (step end)
    t_step: float = 2.0  # s
    amplitude: float = 5.0  # m/s (gust)
    period: float = 3.0  # s (gust)
    t_start: float = 2.0  # s (gust)
    v_mean: float = 14.0  # m/s (turbulence)
    turbulence_intensity: float = 0.06
    length_scale: float = 2.0  # m
    event_time: float = 1.0  # s, timing pulse for constant and turbulence
    preview_noise_std: float = 0.02  # m/s

    def build(self, dt, seed=0):
        if self.kind == "constant":
            return inflow.gen_constant(self.v0, self.duration, dt, self.event_time)
        if self.kind == "step":
            return inflow.gen_step(self.v0, self.v1, self.t_step, self.duration, dt)
        if self.kind == "gust":
            return inflow.gen_gust(self.v0, self.amplitude, self.period, self.t_start,
                                   self.duration, dt)
        if self.kind == "turbulence":
            return inflow.gen_turbulence(self.v_mean, self.turbulence_intensity, self.duration,
                                         dt, seed, self.length_scale, self.event_time)
        raise ValueError(f"unknown inflow kind {self.kind!r}")


@dataclass
class ControllerSpec:
    name: str = "mpc"
    type: str = "mpc"  # pi | lqr | lqr_preview | mpc
    Np: int = 20
    q_speed: float = 1.0
    q_pitch: float = 0.0
    q_integral: float | None = None  # default 0.1·Ts²
    Ru: float = 1000.0
    rate_limit: bool = True  # LQR: clip the command to the pitch-rate limit
    constrain_position: bool = True  # MPC box rows
    constrain_rate: bool = True  # MPC rate rows
    deadline_budget_us: float = 10000.0
    iter_cost_us: float = 50.0
    max_iter: int = 100
    max_fallbacks: int = 10
    kp: float = 0.3  # from scripts/tune_pi.py
    ki: float = 1.5
    beta_k: float = 0.1

    def __post_init__(self):
        if self.type not in ("pi", "lqr", "lqr_preview", "mpc"):
            raise ValueError(f"unknown controller type {self.type!r}")
        if self.Np < 1:
            raise ValueError("Np must be >= 1")


@dataclass
class SimConfig:
    inflow: InflowSpec = field(default_factory=InflowSpec)
    controller: ControllerSpec = field(default_factory=ControllerSpec)
    dt_plant: float = 0.001  # s
    ctrl_period: float = 0.01  # s
    repeats: int = 10
    seed: int = 0
    log_path: str | None = None

    def __post_init__(self):
        if not (self.dt_plant > 0 and self.ctrl_period > 0):
            raise ValueError("dt_plant and ctrl_period must be > 0")
        ratio = self.ctrl_period / self.dt_plant
        if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
            raise ValueError("ctrl_period must be a positive integer multiple of dt_plant")
        if not self.inflow.duration > 0:
            raise ValueError("duration must be > 0")

    @property
    def ratio(self):
        return int(round(self.ctrl_period / self.dt_plant))

    @property
    def duration(self):
        return self.inflow.duration


@dataclass
class Plant:
    """Truth-model parameters plus the design model at the chosen operating point."""

    params: TurbineParams
    model: LinearModel

    @property
    def op(self):
        return self.model.op_point

    @property
    def limits(self):
        return PitchLimits.from_params(self.params)


def make_plant(params=None, v_bar=12.0, Ts=0.01):
    params = params or TurbineParams()
    return Plant(params=params, model=linearize(params, operating_point(params, v_bar), Ts=Ts))


def build_controller(spec: ControllerSpec, plant: Plant) -> Controller:
    limits = plant.limits
    Ts = plant.model.Ts
    if spec.type == "pi":
        ctrl = PiController(PiGains(spec.kp, spec.ki, spec.beta_k), limits, Ts, Np=spec.Np,
                            name=spec.name)
        ctrl.initialize(plant.op.beta)
        return ctrl
    q_int = 0.1 * Ts * Ts if spec.q_integral is None else spec.q_integral
    Qw = np.diag([spec.q_speed, spec.q_pitch, q_int])
    design = design_lq(plant.model, Qw, spec.Ru, spec.Np)
    if spec.type in ("lqr", "lqr_preview"):
        return LqrController(design, limits, use_preview=spec.type == "lqr_preview",
                             rate_limit=spec.rate_limit, name=spec.name)
    template = mpc_build(design, limits, use_box=spec.constrain_position,
                         use_rate=spec.constrain_rate)
    return MpcController(template, spec.deadline_budget_us, spec.iter_cost_us, spec.max_iter,
                         spec.max_fallbacks, name=spec.name)


# ---------------------------------------------------------------------------
# logs

@dataclass
class SimLog:
    """Column store, one row per plant sample."""

    columns: dict

    @classmethod
    def empty(cls):
        return cls({c: [] for c in LOG_COLUMNS})

    def __len__(self):
        return len(self.columns["t_s"])

    def __getitem__(self, name):
        return np.asarray(self.columns[name], dtype=int if name in INT_COLUMNS else float)

    def finalize(self):
        return SimLog({c: self[c] for c in LOG_COLUMNS})

    def sliced(self, start, stop):
        return SimLog({c: self[c][start:stop] for c in LOG_COLUMNS})

    def to_csv(self, path, extra=None, comment=None):
        """Write the log; ``extra`` adds trailing columns (name -> array)."""
        names = list(LOG_COLUMNS) + list(extra or {})
        cols = [self[c].tolist() for c in LOG_COLUMNS] + [np.asarray(v).tolist()
                                                          for v in (extra or {}).values()]
        with open(path, "w", newline="") as fh:
            if comment is not None:
                fh.write("# " + comment + "\n")
            fh.write(",".join(names) + "\n")
            for row in zip(*cols):
                fh.write(",".join(repr(v) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path, extra=()):
        """Read a log written by ``to_csv``; returns (log, extras, comment)."""
        comment = None
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
        if lines and lines[0].startswith("# "):
            comment = lines[0][2:]
            lines = lines[1:]
        if not lines:
            raise ValueError(f"{path}: empty log file")
        header = lines[0].split(",")
        expected = list(LOG_COLUMNS) + list(extra)
        if header != expected:
            raise ValueError(f"{path}: column header {header} does not match {expected}")
        data = {c: [] for c in header}
        for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno} has {len(row)} fields, "
                                 f"expected {len(header)}")
            for c, v in zip(header, row):
                data[c].append(int(v) if c in INT_COLUMNS else float(v))
        log = cls({c: data[c] for c in LOG_COLUMNS}).finalize()
        extras = {c: np.asarray(data[c], dtype=float) for c in extra}
        return log, extras, comment


@dataclass
class Metrics:
    rms_speed_err: float  # rad/s
    max_speed_err: float  # rad/s
    pitch_travel: float  # rad
    constraint_violations: int
    solve_time_mean: float  # µs
    solve_time_p99: float  # µs
    fallback_count: int
    rate_limited_ticks: int = 0

    FIELDS = ("rms_speed_err", "max_speed_err", "pitch_travel", "constraint_violations",
              "solve_time_mean", "solve_time_p99", "fallback_count", "rate_limited_ticks")

    def as_dict(self):
        return {f: getattr(self, f) for f in self.FIELDS}


def compute_metrics(log: SimLog, params: TurbineParams, ctrl_period=0.01, dt_plant=None,
                    rate_limited_ticks=0, tol=1e-9):
    """Speed-error statistics, pitch travel and command-constraint checks.

    Controller ticks are the rows where the command may change; with
    ``dt_plant`` given they are every ctrl_period/dt_plant rows, otherwise
    every row is treated as a tick.
    """
    if len(log) == 0:
        raise ValueError("cannot compute metrics of an empty log")
    err = log["omega_err_rad_s"]
    beta = log["beta_rad"]
    ratio = 1 if dt_plant is None else int(round(ctrl_period / dt_plant))
    cmd = log["beta_cmd_rad"][::ratio]
    status = log["ctrl_status"][::ratio]
    solve = log["solve_time_us"][::ratio]
    out_of_range = (cmd < params.pitch_min - tol) | (cmd > params.pitch_max + tol)
    steps = np.abs(np.diff(cmd))
    too_fast = steps > params.pitch_rate_limit * ctrl_period + tol
    return Metrics(
        rms_speed_err=float(np.sqrt(np.mean(err * err))),
        max_speed_err=float(np.max(np.abs(err))),
        pitch_travel=float(np.sum(np.abs(np.diff(beta)))),
        constraint_violations=int(np.count_nonzero(out_of_range) + np.count_nonzero(too_fast)),
        solve_time_mean=float(np.mean(solve)),
        solve_time_p99=float(np.percentile(solve, 99)),
        fallback_count=int(np.count_nonzero(status == CtrlStatus.FALLBACK)),
        rate_limited_ticks=int(rate_limited_ticks),
    )


# ---------------------------------------------------------------------------
# closed loop

def initial_pitch(plant: Plant, v0):
    """Equilibrium pitch at the initial wind, or the design pitch if there is none."""
    try:
        beta, _ = find_equilibrium(plant.params, v0, plant.op.omega)
        return beta
    except NoEquilibriumError:
        return plant.op.beta


def make_input(k, omega, beta, preview_abs, op):
    """Controller-visible input; shared by the in-process loop and the HIL client."""
    return ControllerInput(k=k, omega_err=omega - op.omega, beta_meas=beta,
                           preview=np.asarray(preview_abs) - op.v)


def preview_seed(seed):
    return (seed * 0x9E3779B1 + 0x5EED) & inflow.MASK64


@dataclass
class RunResult:
    log: SimLog
    metrics: Metrics
    aborted: bool = False
    rate_clip_events: int = 0


def run_closed_loop(config: SimConfig, plant: Plant | None = None, seq=None,
                    controller: Controller | None = None) -> RunResult:
    """One deterministic closed-loop run; the log has one row per wind sample."""
    plant = plant or make_plant(Ts=config.ctrl_period)
    if seq is None:
        seq = config.inflow.build(config.dt_plant, config.seed)
    if controller is None:
        controller = build_controller(config.controller, plant)
    return _loop(config, plant, seq, controller, CommandSource(controller))


class CommandSource:
    """Adapter that turns (k, omega, beta, preview) into a command; HIL swaps it out."""

    def __init__(self, controller):
        self.controller = controller
        self.rate_clips = 0

    def start(self, beta0, preview_dev=None):
        self.controller.initialize(beta0, preview_dev)

    def command(self, k, omega, beta, v_hub, preview_abs, op):
        out = self.controller.step(make_input(k, omega, beta, preview_abs, op))
        return out.beta_cmd, int(out.status), out.solve_time_us


def _loop(config, plant, seq, controller, source, stop_hook=None):
    params, op = plant.params, plant.op
    dt = config.dt_plant
    ratio = config.ratio
    Np = controller.Np if controller is not None else source.Np
    q_gen = op.q_gen
    n = len(seq)
    v = seq.samples.tolist()
    pulse = seq.index(seq.event_time)
    noise_std = config.inflow.preview_noise_std
    nseed = preview_seed(config.seed)
    beta0 = initial_pitch(plant, v[0])
    omega, beta, tx, tv = op.omega, beta0, 0.0, 0.0
    win0 = inflow.preview_at(seq, 0.0, config.ctrl_period, Np, noise_std, nseed)
    source.start(beta0, np.asarray(win0.values) - op.v)
    cmd, status, solve_us = beta0, 0, 0.0
    v_prev0 = v[0]
    rows = {c: [] for c in LOG_COLUMNS}
    (r_t, r_ts, r_v, r_vp, r_om, r_err, r_b, r_cmd, r_q, r_st, r_sol) = (
        rows[c] for c in LOG_COLUMNS)
    fault_run = 0
    aborted = False
    for k in range(n):
        if k % ratio == 0:
            win = inflow.preview_at(seq, k * dt, config.ctrl_period, Np, noise_std, nseed)
            v_prev0 = float(win.values[0])
            cmd, status, solve_us = source.command(k // ratio, omega, beta, v[k], win.values, op)
            fault_run = fault_run + 1 if status == CtrlStatus.FAULT else 0
        r_t.append(k * dt)
        r_ts.append(1 if k == pulse else 0)
        r_v.append(v[k])
        r_vp.append(v_prev0)
        r_om.append(omega)
        r_err.append(omega - op.omega)
        r_b.append(beta)
        r_cmd.append(cmd)
        r_q.append(q_gen)
        r_st.append(status)
        r_sol.append(solve_us)
        if fault_run >= ABORT_AFTER_FAULTS:
            aborted = True
            break
        if stop_hook is not None and stop_hook():
            break
        if k + 1 < n:
            omega, beta, tx, tv, _ = rk4(omega, beta, tx, tv, v[k], q_gen, cmd, dt, params)
    log = SimLog(rows).finalize()
    clips = getattr(controller, "rate_clips", 0) if controller is not None else 0
    metrics = compute_metrics(log, params, config.ctrl_period, dt, rate_limited_ticks=clips)
    return RunResult(log=log, metrics=metrics, aborted=aborted, rate_clip_events=clips)


# ---------------------------------------------------------------------------
# comparison protocol

@dataclass
class ComparisonReport:
    """Per (scenario, controller): the list of per-repeat Metrics."""

    runs: dict  # (scenario, controller) -> list[Metrics]
    scenarios: list
    controllers: list
    seeds: list
    example_logs: dict = field(default_factory=dict)  # (scenario, controller) -> SimLog

    def aggregate(self, scenario, controller, metric):
        vals = np.array([getattr(m, metric) for m in self.runs[(scenario, controller)]], float)
        return float(vals.mean()), float(vals.std())

    def table_rows(self):
        rows = []
        for s in self.scenarios:
            for c in self.controllers:
                row = {"scenario": s, "controller": c, "repeats": len(self.runs[(s, c)])}
                for f in Metrics.FIELDS:
                    mean, std = self.aggregate(s, c, f)
                    row[f + "_mean"] = mean
                    row[f + "_std"] = std
                row["seeds"] = " ".join(str(x) for x in self.seeds)
                rows.append(row)
        return rows

    def to_csv(self, path):
        rows = self.table_rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    def format_table(self):
        lines = [f"{'scenario':<12}{'controller':<14}{'rms_err':>22}{'max_err':>10}"
                 f"{'travel':>9}{'viol':>6}{'fallb':>7}{'clips':>8}"]
        for s in self.scenarios:
            for c in self.controllers:
                m, sd = self.aggregate(s, c, "rms_speed_err")
                agg = {f: self.aggregate(s, c, f)[0] for f in Metrics.FIELDS}
                lines.append(f"{s:<12}{c:<14}{m:>12.5f} ± {sd:<7.5f}{agg['max_speed_err']:>10.4f}"
                             f"{agg['pitch_travel']:>9.4f}{agg['constraint_violations']:>6.0f}"
                             f"{agg['fallback_count']:>7.0f}{agg['rate_limited_ticks']:>8.0f}")
        return "\n".join(lines)


def run_comparison(scenarios, controllers, seeds=None, repeats=10, seed_base=0, plant=None,
                   dt_plant=0.001, ctrl_period=0.01, keep_logs=False):
    """Every controller sees the same seeded inflow realizations.

    ``seeds`` defaults to seed_base, seed_base+1, ... (one per repeat).
    """
    if not scenarios or not controllers:
        raise ValueError("need at least one scenario and one controller")
    names = [c.name for c in controllers]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate controller names {names}")
    snames = [s.name for s in scenarios]
    if len(set(snames)) != len(snames):
        raise ValueError(f"duplicate scenario names {snames}")
    seeds = list(range(seed_base, seed_base + repeats)) if seeds is None else list(seeds)
    if len(seeds) != repeats:
        raise ValueError(f"{len(seeds)} seeds given for {repeats} repeats")
    plant = plant or make_plant(Ts=ctrl_period)
    runs = {}
    logs = {}
    for scen in scenarios:
        for r, seed in enumerate(seeds):
            seq = scen.build(dt_plant, seed)
            for spec in controllers:
                cfg = SimConfig(inflow=scen, controller=spec, dt_plant=dt_plant,
                                ctrl_period=ctrl_period, repeats=repeats, seed=seed)
                res = run_closed_loop(cfg, plant, seq)
                runs.setdefault((scen.name, spec.name), []).append(res.metrics)
                if keep_logs and r == 0:
                    logs[(scen.name, spec.name)] = res.log
    return ComparisonReport(runs=runs, scenarios=[s.name for s in scenarios], controllers=names,
                            seeds=seeds, example_logs=logs)


# ---------------------------------------------------------------------------
# golden traces

@dataclass
class GoldenReport:
    passed: bool
    max_abs_diff: float
    first_divergence_index: int | None  # first index with |a - b| > tol

    def __bool__(self):
        return self.passed


def rising_edges(signal):
    s = np.asarray(signal).astype(int)
    prev = np.concatenate([[0], s[:-1]])
    return np.nonzero((s == 1) & (prev == 0))[0]


def align_by_timing_signal(logs):
    """Shift logs so their single timing-pulse rising edges coincide; trim overhang."""
    edges = []
    for i, lg in enumerate(logs):
        e = rising_edges(lg["timing_signal"])
        if len(e) != 1:
            raise ValueError(f"log {i} has {len(e)} timing-signal rising edges, expected 1")
        edges.append(int(e[0]))
    lead = min(edges)
    tail = min(len(lg) - e for lg, e in zip(logs, edges))
    return [lg.sliced(e - lead, e + tail) for lg, e in zip(logs, edges)]


def golden_compare(trace_a, trace_b, tol, column="beta_cmd_rad", align=True):
    """Compare controller outputs of two traces (SimLogs or plain arrays)."""
    if isinstance(trace_a, SimLog) and isinstance(trace_b, SimLog):
        if align:
            trace_a, trace_b = align_by_timing_signal([trace_a, trace_b])
        a, b = trace_a[column], trace_b[column]
    else:
        a, b = np.asarray(trace_a, dtype=float), np.asarray(trace_b, dtype=float)
    if a.size != b.size:
        raise ValueError(f"trace lengths differ: {a.size} vs {b.size}")
    diff = np.abs(a - b)
    max_diff = float(diff.max()) if diff.size else 0.0
    bad = np.nonzero(~(diff <= tol))[0]
    first = int(bad[0]) if bad.size else None
    return GoldenReport(passed=first is None, max_abs_diff=max_diff, first_divergence_index=first)


def with_seed(config: SimConfig, seed):
    return replace(config, seed=seed)
