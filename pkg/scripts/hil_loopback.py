"""HIL loopback experiment: plant in this process, controller in a child process.

Runs the lockstep exchange, compares every logged channel with the
in-process simulation, and optionally repeats with an injected client
delay to exercise the deadline monitor.

    python scripts/hil_loopback.py [--duration 60] [--controller mpc] [--delay-us 25000]
"""
import argparse
import subprocess
import sys
from dataclasses import replace

import numpy as np

from scaledwt.config import load_config
from scaledwt.hil import serve_plant
from scaledwt.sim import LOG_COLUMNS, run_closed_loop


def serve(config, plant, controller, client_args, **kw):
    children = []

    def launch(addr):
        children.append(subprocess.Popen(
            [sys.executable, "-m", "scaledwt", "hil-controller", "--host", addr[0],
             "--port", str(addr[1]), "--controller", controller, *client_args]))

    try:
        return serve_plant(config, plant=plant, on_listen=launch, **kw)
    finally:
        for c in children:
            c.wait(timeout=60)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--scenario", default="gust")
    ap.add_argument("--controller", default="mpc")
    ap.add_argument("--duration", type=float, default=60.0)
    ap.add_argument("--delay-us", type=float, default=0.0,
                    help="also run with this client delay per tick")
    args = ap.parse_args()

    cfg = load_config(args.config)
    plant = cfg.plant()
    config = cfg.sim_config(args.scenario, args.controller)
    config = replace(config, inflow=replace(config.inflow, duration=args.duration))

    ref = run_closed_loop(config, plant)
    res = serve(config, plant, args.controller, [], deadline_us=30e6)
    print(f"lockstep run: {res.stats.ticks} ticks, link latency mean "
          f"{res.stats.latency_mean_us:.0f} us, p99 {res.stats.latency_p99_us:.0f} us")
    for c in LOG_COLUMNS:
        print(f"  {c:<18} max |HIL - in-process| = {np.max(np.abs(res.log[c] - ref.log[c])):.3e}")

    if args.delay_us > 0:
        slow = serve(config, plant, args.controller, ["--delay-us", str(args.delay_us)],
                     deadline_us=cfg.hil.deadline_us, max_misses=cfg.hil.max_misses)
        st = slow.stats
        print(f"delayed client ({args.delay_us:g} us per tick, deadline {cfg.hil.deadline_us:g} "
              f"us): misses {st.misses}, failsafe from tick {st.failsafe_tick}, final pitch "
              f"command {slow.log['beta_cmd_rad'][-1]:.3f} rad")


if __name__ == "__main__":
    main()
