"""Optimal variance-targeting flow and its objective over a range of interaction weights.

    python3 scripts/mfg_scan.py --lams 0.05,0.25,1.0 --out out/mfg_scan.csv
"""
import argparse
import csv

import numpy as np

from nelson.cost import CostFunction
from nelson.mfg import minimize_mkv, variance_target_problem


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lams", default="0.05,0.25,1.0")
    ap.add_argument("--factor", type=float, default=2.0)
    ap.add_argument("--max-evals", type=int, default=200)
    ap.add_argument("--out", default="mfg_scan.csv")
    args = ap.parse_args()
    rows = []
    for lam in map(float, args.lams.split(",")):
        prob = variance_target_problem(CostFunction.quadratic(), lam=lam, factor=args.factor)
        res = minimize_mkv(prob, max_evals=args.max_evals)
        var_end = res.flow.cov(prob.T)[0, 0]
        rows.append((lam, res.value, res.primal_value, res.r_value, var_end, res.n_evals,
                     " ".join(f"{e:.4f}" for e in np.asarray(res.eta))))
        print(*rows[-1])
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["lambda", "objective", "value", "interaction", "variance_at_T", "evals", "eta"])
        wr.writerows(rows)


if __name__ == "__main__":
    main()
