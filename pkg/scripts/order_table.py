"""Fitted convergence order of every integrator on every reference problem.

    python scripts/order_table.py --taus 0.1,0.05,0.025,0.0125 --csv runs/orders.csv
"""
import argparse
import csv
from pathlib import Path

from tmresnet.errors import DegenerateFit
from tmresnet.ode_core import GLOBAL_ORDER, PROBLEMS, IntegratorId, empirical_order, make_problem


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--taus", default="0.1,0.05,0.025,0.0125")
    ap.add_argument("--horizon", type=float, default=2.0)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()
    taus = [float(t) for t in args.taus.split(",")]

    rows = []
    print(f"{'problem':>12} " + " ".join(f"{m.value:>7}" for m in IntegratorId))
    for name in PROBLEMS:
        problem = make_problem(name)
        cells = []
        for m in IntegratorId:
            try:
                slope = empirical_order(m, problem, taus, args.horizon).slope
            except DegenerateFit:
                slope = float("nan")  # method is exact on this problem
            rows.append((name, m.value, GLOBAL_ORDER[m], slope))
            cells.append(f"{slope:7.3f}")
        print(f"{name:>12} " + " ".join(cells))
    print(f"{'theory':>12} " + " ".join(f"{GLOBAL_ORDER[m]:7d}" for m in IntegratorId))

    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["problem", "method", "theoretical_order", "fitted_order"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
