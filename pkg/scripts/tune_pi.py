"""Gain sweep for the baseline PI controller on the wind-step scenario.

Prints the RMS speed error over a (Kp, Ki) grid and the best pair; the
winner is what configs/default.toml carries.

    python scripts/tune_pi.py [--beta-k 0.1]
"""
import argparse
import itertools

import numpy as np

from scaledwt.sim import ControllerSpec, InflowSpec, SimConfig, make_plant, run_closed_loop


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--beta-k", type=float, default=0.1)
    ap.add_argument("--kp", type=float, nargs="+",
                    default=[0.02, 0.05, 0.1, 0.2, 0.3, 0.5])
    ap.add_argument("--ki", type=float, nargs="+",
                    default=[0.2, 0.4, 0.8, 1.5, 3.0, 6.0])
    args = ap.parse_args()

    plant = make_plant()
    scen = InflowSpec(name="step", kind="step", v0=12.0, v1=13.0, t_step=2.0, duration=10.0,
                      preview_noise_std=0.0)
    seq = scen.build(0.001)
    best = None
    print(f"{'Kp':>8}{'Ki':>8}{'rms_err':>12}{'max_err':>12}")
    for kp, ki in itertools.product(args.kp, args.ki):
        spec = ControllerSpec(name="pi", type="pi", Np=1, kp=kp, ki=ki, beta_k=args.beta_k)
        res = run_closed_loop(SimConfig(inflow=scen, controller=spec), plant, seq)
        m = res.metrics
        rms = m.rms_speed_err if np.isfinite(m.rms_speed_err) and not res.aborted else np.inf
        print(f"{kp:>8.3f}{ki:>8.3f}{rms:>12.4f}{m.max_speed_err:>12.4f}")
        if best is None or rms < best[0]:
            best = (rms, kp, ki)
    print(f"best: kp={best[1]} ki={best[2]} rms={best[0]:.4f} rad/s")


if __name__ == "__main__":
    main()
