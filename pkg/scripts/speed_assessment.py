"""Batch timing and accuracy study: both engines on shared simulated data.

    python3 scripts/speed_assessment.py --sizes 10 50 100 10000 --reps 50 --out results/speed
"""

import argparse
import logging

import numpy as np

from crossed_eb.simulate import SpeedConfig, run_speed_assessment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", type=int, nargs="+", default=[10, 50, 100])
    ap.add_argument("--reps", type=int, default=50)
    ap.add_argument("--engines", nargs="+", default=["naive", "streamlined"])
    ap.add_argument("--budget", type=float, default=45 * 60.0, help="seconds per fit")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="results/speed")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)

    cfg = SpeedConfig(sizes=tuple(args.sizes), reps=args.reps, engines=tuple(args.engines),
                      budget_seconds=args.budget, seed=args.seed)
    res = run_speed_assessment(cfg, workers=args.workers)
    res.write(args.out)

    print(f"{'m':>7} {'N':>9} {'engine':>12} {'mean s':>10} {'sd s':>9} {'NA':>4}")
    for m, dp, e, mean, sd, ok, na in res.summary_rows():
        fmt = (lambda v: f"{float(v):10.3f}") if mean != "NA" else (lambda v: f"{'NA':>10}")
        print(f"{m:>7} {dp:>9} {e:>12} {fmt(mean)} {fmt(sd)[1:]} {na:>4}")

    # paired comparison where both engines ran
    by = {(c.m, c.rep, c.engine): c.seconds for c in res.cells}
    for m in cfg.sizes:
        pairs = [(by.get((m, r, "naive")), by.get((m, r, "streamlined"))) for r in range(cfg.reps)]
        pairs = [(a, b) for a, b in pairs if a is not None and b is not None]
        if pairs:
            a, b = np.array(pairs).T
            print(f"m={m}: streamlined faster in {np.sum(b < a)}/{len(pairs)} reps, "
                  f"median speed-up {np.median(a / b):.2f}x")


if __name__ == "__main__":
    main()
