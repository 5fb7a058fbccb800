"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import hil, sim
from .config import ConfigError, load_config
from .svg import write_chart
from .sysid import (LinearModel, collect_prbs_data, compare_models, identify_ls,
                    linear_prbs_amplitude)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

PLOT_CHANNELS = (("omega_err_rad_s", "speed error [rad/s]"), ("beta_rad", "pitch [rad]"),
                 ("beta_cmd_rad", "pitch command [rad]"), ("v_hub_mps", "hub wind [m/s]"))


def _out_dir(args, cfg):
    d = Path(args.out_dir or cfg.sim.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _plant(args, cfg):
    plant = cfg.plant()
    if getattr(args, "model", None):
        model = LinearModel.load(args.model)
        if model.Ts != cfg.sim.ctrl_period:
            raise ConfigError(f"model Ts {model.Ts} differs from sim.ctrl_period_s "
                              f"{cfg.sim.ctrl_period}")
        plant = sim.Plant(params=cfg.turbine, model=model)
    return plant


def _plot_logs(out_dir, stem, logs, title):
    """One SVG per channel, one line per (label, log)."""
    for col, label in PLOT_CHANNELS:
        series = [(name, lg["t_s"], lg[col]) for name, lg in logs]
        write_chart(out_dir / f"{stem}_{col}.svg", series, title=f"{title}: {label}",
                    xlabel="time [s]", ylabel=label)


def _json_dump(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_sysid(args, cfg):
    plant = cfg.plant()
    model = plant.model
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    print(f"linearized at v = {model.op_point.v} m/s, omega = {model.op_point.omega} rad/s, "
          f"beta = {model.op_point.beta:.6f} rad")
    print(f"A = {model.A.tolist()}\nB = {model.B.ravel().tolist()}\n"
          f"Bd = {model.Bd.ravel().tolist()}\nspectral radius = {model.spectral_radius():.6f}")
    print(f"wrote {out}")
    if not args.identify:
        return EXIT_OK
    amp = args.amplitude if args.amplitude is not None else linear_prbs_amplitude(cfg.turbine)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        io = collect_prbs_data(cfg.turbine, model.op_point, n_samples=args.samples,
                               amplitude=amp, Ts=cfg.sim.ctrl_period, dt_plant=cfg.sim.dt_plant)
        ident = identify_ls(io)
    err = compare_models(ident, model)
    print(f"identified from {args.samples} PRBS samples (amplitude {amp:.6g} rad)")
    print(f"A = {ident.A.tolist()}\nB = {ident.B.ravel().tolist()}")
    print(f"max relative entry error vs linearization: {err:.3e} (tolerance {args.tol})")
    if args.identified_out:
        ident.save(args.identified_out)
        print(f"wrote {args.identified_out}")
    return EXIT_OK if err <= args.tol else EXIT_FAIL


def cmd_simulate(args, cfg):
    plant = _plant(args, cfg)
    config = cfg.sim_config(args.scenario, args.controller, args.seed)
    res = sim.run_closed_loop(config, plant)
    out = _out_dir(args, cfg)
    stem = f"{config.inflow.name}_{config.controller.name}_s{config.seed}"
    res.log.to_csv(out / f"{stem}.csv")
    _json_dump(out / f"{stem}_metrics.json", dict(res.metrics.as_dict(), aborted=res.aborted))
    _plot_logs(out, stem, [(config.controller.name, res.log)], stem)
    for k, v in res.metrics.as_dict().items():
        print(f"{k:>22}: {v}")
    print(f"wrote {out / stem}.csv")
    return EXIT_FAIL if res.aborted else EXIT_OK


def cmd_compare(args, cfg):
    plant = _plant(args, cfg)
    repeats = args.repeats if args.repeats is not None else cfg.sim.repeats
    seed_base = args.seed_base if args.seed_base is not None else cfg.sim.seed_base
    scenarios = [cfg.scenario(n) for n in args.scenario] if args.scenario else \
        list(cfg.inflows.values())
    controllers = [cfg.controller(n) for n in args.controller] if args.controller else \
        list(cfg.controllers.values())
    rep = sim.run_comparison(scenarios, controllers, repeats=repeats, seed_base=seed_base,
                             plant=plant, dt_plant=cfg.sim.dt_plant,
                             ctrl_period=cfg.sim.ctrl_period, keep_logs=True)
    out = _out_dir(args, cfg)
    rep.to_csv(out / "compare.csv")
    print(rep.format_table())
    for s in rep.scenarios:
        logs = [(c, rep.example_logs[(s, c)]) for c in rep.controllers]
        _plot_logs(out, f"compare_{s}", logs, f"{s}, seed {rep.seeds[0]}")
    print(f"wrote {out / 'compare.csv'}")
    return EXIT_OK


def cmd_gen_inflow(args, cfg):
    spec = cfg.scenario(args.scenario)
    seq = spec.build(cfg.sim.dt_plant, args.seed if args.seed is not None else cfg.sim.seed_base)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    seq.to_csv(out)
    print(f"{spec.name}: {len(seq)} samples, mean {seq.samples.mean():.4f} m/s, "
          f"std {seq.samples.std():.4f} m/s -> {out}")
    return EXIT_OK


def _hil_address(args, cfg):
    return (args.host or cfg.hil.host, cfg.hil.port if args.port is None else args.port)


def cmd_hil_plant(args, cfg):
    plant = cfg.plant()
    config = cfg.sim_config(args.scenario, args.controller, args.seed)
    addr = _hil_address(args, cfg)
    deadline = args.deadline_us if args.deadline_us is not None else cfg.hil.deadline_us

    def announce(bound):
        print(f"listening on {bound[0]}:{bound[1]}", flush=True)

    res = hil.serve_plant(config, addr, deadline, cfg.hil.max_misses, args.mode or cfg.hil.mode,
                          plant=plant, on_listen=announce)
    out = _out_dir(args, cfg)
    stem = f"hil_{config.inflow.name}_{config.controller.name}_s{config.seed}"
    res.log.to_csv(out / f"{stem}.csv")
    _json_dump(out / f"{stem}_stats.json", res.stats.as_dict())
    for k, v in res.stats.as_dict().items():
        print(f"{k:>24}: {v}")
    return EXIT_FAIL if res.aborted else EXIT_OK


def cmd_hil_controller(args, cfg):
    plant = cfg.plant()
    ctrl = sim.build_controller(cfg.controller(args.controller), plant)
    rep = hil.run_controller_client(ctrl, _hil_address(args, cfg), plant.op,
                                    connect_timeout=args.connect_timeout,
                                    delay_s=args.delay_us * 1e-6)
    print(f"ticks served: {rep.ticks}, compute mean {rep.compute_mean_us:.1f} us, "
          f"p99 {rep.compute_p99_us:.1f} us, bye: {rep.bye_received}")
    if rep.error:
        print(f"error: {rep.error}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_replay_validate(args, cfg):
    plant = _plant(args, cfg)
    if args.record:
        config = cfg.sim_config(args.scenario, args.controller, args.seed)
        hil.record_golden(args.golden, config, plant)
        print(f"recorded {args.golden}")
    spec = cfg.controller(args.controller)
    ctrl = sim.build_controller(spec, plant)
    try:
        rep = hil.replay_validate(args.golden, ctrl, args.tol)
    except (OSError, hil.GoldenSchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    verdict = "PASS" if rep.passed else "FAIL"
    print(f"{verdict}: {rep.ticks} ticks, max |diff| = {rep.golden.max_abs_diff:.3e} "
          f"(tol {args.tol})")
    if not rep.passed:
        print(f"first divergence at row {rep.golden.first_divergence_index} "
              f"(controller tick {rep.first_divergence_tick})")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_tune_horizon(args, cfg):
    plant = cfg.plant()
    name = args.controller
    if name is None:  # first MPC table
        name = next((n for n, c in cfg.controllers.items() if c.type == "mpc"), None)
    spec = cfg.controller(name)
    if spec.type != "mpc":
        raise ConfigError(f"controller {spec.name!r} is not an MPC")
    grid = sorted(set(args.np_grid))
    config = cfg.sim_config(args.scenario, name, args.seed)
    config = replace(config, controller=replace(spec, Np=max(grid)))
    trials = hil.trial_inputs(plant, config, max(grid), args.trials)
    profile = hil.profile_horizons(spec, plant, trials, grid)
    for Np, t in profile.p99_us.items():
        print(f"Np = {Np:>3}: p99 solve {t:10.1f} us")
    for b in args.budget_us:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            Np = profile.select(b)
        note = f"  ({caught[0].message})" if caught else ""
        print(f"budget {b:>10g} us -> Np = {Np}{note}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file (defaults built in)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a configuration value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="scaledwt",
                                description="Preview pitch control for a scaled wind turbine")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sysid", parents=[common], help="linearize (and optionally identify)")
    s.add_argument("--out", default="model.json")
    s.add_argument("--identify", action="store_true", help="also fit a model to PRBS data")
    s.add_argument("--samples", type=int, default=3000)
    s.add_argument("--amplitude", type=float, help="PRBS amplitude in rad")
    s.add_argument("--tol", type=float, default=0.02, help="relative entry tolerance")
    s.add_argument("--identified-out")
    s.set_defaults(func=cmd_sysid)

    def run_opts(sp, seed=True):
        sp.add_argument("--scenario")
        sp.add_argument("--controller")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")

    s = sub.add_parser("simulate", parents=[common], help="one closed-loop run")
    run_opts(s)
    s.add_argument("--model", help="model.json to design against")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("compare", parents=[common], help="controllers x scenarios x repeats")
    s.add_argument("--scenario", action="append")
    s.add_argument("--controller", action="append")
    s.add_argument("--repeats", type=int)
    s.add_argument("--seed-base", type=int)
    s.add_argument("--out-dir")
    s.add_argument("--model", help="model.json to design against")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("gen-inflow", parents=[common], help="write a wind sequence CSV")
    s.add_argument("--scenario")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="inflow.csv")
    s.set_defaults(func=cmd_gen_inflow)

    s = sub.add_parser("hil-plant", parents=[common], help="serve the plant over TCP")
    run_opts(s)
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.add_argument("--deadline-us", type=float)
    s.add_argument("--mode", choices=("lockstep", "realtime"))
    s.set_defaults(func=cmd_hil_plant)

    s = sub.add_parser("hil-controller", parents=[common], help="connect a controller client")
    s.add_argument("--controller")
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.add_argument("--connect-timeout", type=float, default=10.0)
    s.add_argument("--delay-us", type=float, default=0.0, help="inject latency per tick")
    s.set_defaults(func=cmd_hil_controller)

    s = sub.add_parser("replay-validate", parents=[common],
                       help="open-loop replay of a golden trace")
    run_opts(s)
    s.add_argument("--golden", required=True)
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--record", action="store_true", help="record the golden file first")
    s.add_argument("--model", help="model.json to design against")
    s.set_defaults(func=cmd_replay_validate)

    s = sub.add_parser("tune-horizon", parents=[common], help="pick Np for solve budgets")
    run_opts(s)
    s.add_argument("--budget-us", type=float, action="append", required=True)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--np-grid", type=int, nargs="+", default=[1, 2, 5, 10, 15, 20, 30, 40])
    s.set_defaults(func=cmd_tune_horizon)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except hil.HandshakeError as exc:
        print(f"handshake rejected: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
