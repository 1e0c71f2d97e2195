"""Compare recovered drifts across costs on one 1D Gaussian flow, for several basis sizes.

    python3 scripts/universality.py --variance "(1 + t)**2" --out out/universality.csv
"""
import argparse
import csv

import numpy as np

from nelson.basis import TestFunctionBasis
from nelson.catalog import gaussian_entropic_case
from nelson.cost import CostFunction
from nelson.dual import maximize_dual
from nelson.marginals import spacetime_quadrature
from nelson.primal import recover_drift

COSTS = {
    "p2": CostFunction.quadratic(),
    "p3": CostFunction.power(3.0, 1.0 / 3.0),
    "p1.5": CostFunction.power(1.5, 1.0 / 1.5),
}


def l2_rel(flow, f, g):
    num = spacetime_quadrature(flow, lambda t, x: (f(t, x)[:, 0] - g(t, x)[:, 0]) ** 2)
    den = spacetime_quadrature(flow, lambda t, x: g(t, x)[:, 0] ** 2)
    return float(np.sqrt(num / den))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--variance", default="(1 + t)**2")
    ap.add_argument("--sizes", default="8x12,12x16,12x24", help="comma separated time x space knot counts")
    ap.add_argument("--out", default="universality.csv")
    args = ap.parse_args()
    case = gaussian_entropic_case(args.variance)
    rows = []
    for size in args.sizes.split(","):
        tk, sk = map(int, size.split("x"))
        basis = TestFunctionBasis.for_flow(case.flow, tk, sk)
        drifts, values = {}, {}
        for name, cost in COSTS.items():
            sol = maximize_dual(basis, case.spec, case.flow, cost)
            drifts[name], values[name] = recover_drift(sol, case.spec, cost), sol.dual_value
        for name in COSTS:
            rows.append((tk, sk, name, values[name], l2_rel(case.flow, drifts[name], case.oracle_drift),
                         l2_rel(case.flow, drifts[name], drifts["p2"])))
            print(*rows[-1])
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time_knots", "space_knots", "cost", "dual_value", "rel_err_oracle", "rel_diff_p2"])
        wr.writerows(rows)


if __name__ == "__main__":
    main()
