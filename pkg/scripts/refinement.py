"""Dual value and oracle error of the entropic Gaussian case as the basis is refined.

    python3 scripts/refinement.py --out out/refinement.csv
"""
import argparse
import csv
import time

from nelson.basis import TestFunctionBasis
from nelson.catalog import gaussian_entropic_case
from nelson.cost import CostFunction
from nelson.dual import dual_value_energy, maximize_dual


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--variance", default="(1 + t)**2")
    ap.add_argument("--sizes", default="3x5,4x8,6x10,8x12,12x16,16x24")
    ap.add_argument("--out", default="refinement.csv")
    args = ap.parse_args()
    case = gaussian_entropic_case(args.variance)
    cost = CostFunction.quadratic()
    rows = []
    for size in args.sizes.split(","):
        tk, sk = map(int, size.split("x"))
        t0 = time.perf_counter()
        sol = maximize_dual(TestFunctionBasis.for_flow(case.flow, tk, sk), case.spec, case.flow, cost)
        energy = dual_value_energy(sol, case.spec, case.flow, cost)
        rows.append((tk, sk, sol.basis.size, sol.dual_value, energy, case.oracle_value,
                     (case.oracle_value - sol.dual_value) / case.oracle_value, sol.iterations,
                     time.perf_counter() - t0))
        print(*rows[-1])
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time_knots", "space_knots", "n_coef", "dual_value", "energy_value", "oracle",
                     "rel_shortfall", "iterations", "seconds"])
        wr.writerows(rows)


if __name__ == "__main__":
    main()
