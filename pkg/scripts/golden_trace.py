"""Record a golden trace and validate controllers against it.

Records a closed-loop run of the reference controller, then replays the
recorded inputs through the reference and through perturbed copies
(Ru scaled by each factor) and reports where each one diverges.

    python scripts/golden_trace.py [--duration 60] [--factors 1.0 1.001 1.01] [--out results/golden.csv]
"""
import argparse
from dataclasses import replace
from pathlib import Path

from scaledwt.config import load_config
from scaledwt.hil import record_golden, replay_validate
from scaledwt.sim import build_controller


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--scenario", default="gust")
    ap.add_argument("--controller", default="mpc")
    ap.add_argument("--duration", type=float, default=60.0)
    ap.add_argument("--factors", type=float, nargs="+", default=[1.0, 1.0001, 1.001, 1.01])
    ap.add_argument("--tol", type=float, default=1e-9)
    ap.add_argument("--out", default="results/golden.csv")
    args = ap.parse_args()

    cfg = load_config(args.config)
    plant = cfg.plant()
    config = cfg.sim_config(args.scenario, args.controller)
    config = replace(config, inflow=replace(config.inflow, duration=args.duration))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    record_golden(out, config, plant)
    print(f"recorded {out} ({args.scenario}, {args.controller}, {args.duration:g} s)")
    for f in args.factors:
        spec = replace(config.controller, Ru=config.controller.Ru * f)
        rep = replay_validate(out, build_controller(spec, plant), args.tol)
        where = "" if rep.passed else f", first divergence at tick {rep.first_divergence_tick}"
        print(f"Ru x {f:<8g} {'PASS' if rep.passed else 'FAIL'}: "
              f"max |diff| {rep.golden.max_abs_diff:.3e}{where}")


if __name__ == "__main__":
    main()
