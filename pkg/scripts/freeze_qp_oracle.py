"""Generate the 1000 random QPs used by the acceptance suite and freeze their
oracle solutions (tests/data/qp_cases.npz).

    python scripts/freeze_qp_oracle.py [--count 1000] [--seed 20261015]
"""
import argparse
import pathlib
import sys
import time

import numpy as np

ROOT = pathlib.Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from qp_oracles import oracle_solution, random_qp  # noqa: E402

NMAX, PMAX = 6, 8


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--count", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=20261015)
    ap.add_argument("--out", default=str(ROOT / "tests" / "data" / "qp_cases.npz"))
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    k = args.count
    H = np.zeros((k, NMAX, NMAX))
    g = np.zeros((k, NMAX))
    lb = np.zeros((k, NMAX))
    ub = np.zeros((k, NMAX))
    A = np.zeros((k, PMAX, NMAX))
    lbA = np.zeros((k, PMAX))
    ubA = np.zeros((k, PMAX))
    x = np.zeros((k, NMAX))
    ns = np.zeros(k, dtype=int)
    ps = np.zeros(k, dtype=int)
    t0 = time.time()
    for i in range(k):
        prob = random_qp(rng)
        n, p = prob["H"].shape[0], prob["A"].shape[0]
        ns[i], ps[i] = n, p
        H[i, :n, :n] = prob["H"]
        g[i, :n] = prob["g"]
        lb[i, :n] = prob["lb"]
        ub[i, :n] = prob["ub"]
        A[i, :p, :n] = prob["A"]
        lbA[i, :p] = prob["lbA"]
        ubA[i, :p] = prob["ubA"]
        x[i, :n] = oracle_solution(prob)
        if (i + 1) % 100 == 0:
            print(f"{i + 1}/{k} oracle solutions ({time.time() - t0:.1f} s)")
    pathlib.Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(args.out, H=H, g=g, lb=lb, ub=ub, A=A, lbA=lbA, ubA=ubA,
                        x_oracle=x, n=ns, p=ps, seed=args.seed)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
