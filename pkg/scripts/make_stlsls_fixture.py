"""Write a small STLSLS problem and its dense-oracle solution as CSV matrices.

Other implementations can read tests/data/stlsls_blocks.csv (columns group,
b, B1..Bp, Bdot1..Bdotq; one row per block row) and compare against
tests/data/stlsls_solution.csv (long format: name, group, row, col, value).
"""

import argparse
import csv

import numpy as np


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--out", default="tests/data")
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    m, p, q = 4, 3, 2
    sizes = rng.integers(q, 7, size=m)
    rows = []
    for g, n in enumerate(sizes):
        for _ in range(n):
            rows.append([g, *rng.standard_normal(1 + p + q)])
    R = np.array(rows)
    with open(f"{args.out}/stlsls_blocks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "b"] + [f"B{k + 1}" for k in range(p)] + [f"Bdot{k + 1}" for k in range(q)])
        for r in R:
            w.writerow([int(r[0])] + [repr(float(v)) for v in r[1:]])

    # dense oracle
    Bfull = np.zeros((len(R), p + m * q))
    Bfull[:, :p] = R[:, 2:2 + p]
    for k, r in enumerate(R):
        g = int(r[0])
        Bfull[k, p + g * q:p + (g + 1) * q] = r[2 + p:]
    A = np.linalg.inv(Bfull.T @ Bfull)
    x = A @ Bfull.T @ R[:, 1]
    with open(f"{args.out}/stlsls_solution.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "group", "row", "col", "value"])
        for i in range(p):
            w.writerow(["x1", "", i, 0, repr(float(x[i]))])
            for j in range(p):
                w.writerow(["A11", "", i, j, repr(float(A[i, j]))])
        for g in range(m):
            sl = slice(p + g * q, p + (g + 1) * q)
            for i in range(q):
                w.writerow(["x2", g, i, 0, repr(float(x[sl][i]))])
                for j in range(q):
                    w.writerow(["A22", g, i, j, repr(float(A[sl, sl][i, j]))])
            for i in range(p):
                for j in range(q):
                    w.writerow(["A12", g, i, j, repr(float(A[:p, sl][i, j]))])


if __name__ == "__main__":
    main()
