"""Controller comparison campaign: every controller on every scenario, seeded repeats.

Writes compare.csv, a per-repeat table (per_repeat.csv) and one SVG per
channel to the output directory, and prints how often each ordering held
per repeat.

    python scripts/run_compare.py [--config configs/default.toml] [--repeats 10] [--out results/compare]
"""
import argparse
import csv
import time
from pathlib import Path

from scaledwt.config import load_config
from scaledwt.sim import Metrics, run_comparison
from scaledwt.svg import write_chart

ORDERINGS = (("lqr_preview", "lqr"), ("mpc", "lqr_preview"))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--repeats", type=int)
    ap.add_argument("--out", default="results/compare")
    args = ap.parse_args()

    cfg = load_config(args.config, args.set)
    repeats = args.repeats or cfg.sim.repeats
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    rep = run_comparison(list(cfg.inflows.values()), list(cfg.controllers.values()),
                         repeats=repeats, seed_base=cfg.sim.seed_base, plant=cfg.plant(),
                         dt_plant=cfg.sim.dt_plant, ctrl_period=cfg.sim.ctrl_period,
                         keep_logs=True)
    elapsed = time.perf_counter() - t0
    rep.to_csv(out / "compare.csv")
    with open(out / "per_repeat.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "controller", "seed", *Metrics.FIELDS])
        for (s, c), runs in rep.runs.items():
            for seed, m in zip(rep.seeds, runs):
                w.writerow([s, c, seed, *(repr(v) for v in m.as_dict().values())])
    for s in rep.scenarios:
        series = [(c, rep.example_logs[(s, c)]["t_s"], rep.example_logs[(s, c)]["omega_err_rad_s"])
                  for c in rep.controllers]
        write_chart(out / f"{s}_speed_error.svg", series, title=f"{s}: speed error",
                    xlabel="time [s]", ylabel="rad/s")

    print(rep.format_table())
    print(f"\n{len(rep.scenarios)} scenarios x {len(rep.controllers)} controllers x "
          f"{repeats} repeats in {elapsed:.1f} s")
    for s in rep.scenarios:
        for better, worse in ORDERINGS:
            if (s, better) not in rep.runs or (s, worse) not in rep.runs:
                continue
            wins = sum(b.rms_speed_err < w.rms_speed_err
                       for b, w in zip(rep.runs[(s, better)], rep.runs[(s, worse)]))
            mb = rep.aggregate(s, better, "rms_speed_err")[0]
            mw = rep.aggregate(s, worse, "rms_speed_err")[0]
            print(f"{s:<12} {better} < {worse}: {wins}/{repeats} repeats, "
                  f"means {mb:.5f} vs {mw:.5f}")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
