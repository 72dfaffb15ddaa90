"""Monte-Carlo calibration of the parameter-recovery envelope (naive EM).

Fits the naive engine to R independent batches at the generating values
(m=100, t=30, n=5), then bootstraps the median absolute error over 50
replications per component. The [0.1%, 99.9%] bootstrap quantiles form the
envelope that the recovery acceptance check compares against. Seeds here
(base 7919) are disjoint from the acceptance run (base 0).

    python3 scripts/calibrate_recovery.py --reps 200 --out tests/data/recovery_envelope.json
"""

import argparse
import json

import numpy as np

from crossed_eb.simulate import SpeedConfig, run_speed_assessment

CALIBRATION_SEED = 7919
QUANTILES = (0.001, 0.999)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--boot", type=int, default=20_000)
    ap.add_argument("--sample", type=int, default=50, help="replications per median")
    ap.add_argument("--out", default="tests/data/recovery_envelope.json")
    args = ap.parse_args()

    cfg = SpeedConfig(sizes=(100,), reps=args.reps, engines=("naive",), seed=CALIBRATION_SEED)
    res = run_speed_assessment(cfg)
    truth = cfg.gen.truth.components()
    errs = {k: [] for k in truth}
    for c in res.cells:
        for k, v in c.vc.components().items():
            errs[k].append(abs(v - truth[k]))
    rng = np.random.default_rng(CALIBRATION_SEED)
    env = {}
    for k, e in errs.items():
        e = np.array(e)
        boot = np.median(rng.choice(e, size=(args.boot, args.sample), replace=True), axis=1)
        lo, hi = np.quantile(boot, QUANTILES)
        env[k] = {"lo": float(lo), "hi": float(hi), "calibration_median": float(np.median(e))}
        print(f"{k:>14}: median {np.median(e):.4f}  envelope [{lo:.4f}, {hi:.4f}]")
    meta = {"m": 100, "t": cfg.gen.t, "n": cfg.gen.n, "engine": "naive", "reps": args.reps,
            "bootstrap": args.boot, "sample": args.sample, "quantiles": list(QUANTILES),
            "seed": CALIBRATION_SEED, "tol": cfg.tol}
    with open(args.out, "w") as fh:
        json.dump({"meta": meta, "envelope": env}, fh, indent=2)
        fh.write("\n")


if __name__ == "__main__":
    main()
