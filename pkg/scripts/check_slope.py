"""Recompute the log-log OLS slope of a rate CSV, independently of the package.

usage: python3 scripts/check_slope.py results/approx_rate_smooth1d.csv [--expect SLOPE]
"""

import argparse
import csv
import math
import sys


def slope(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    xs = [math.log(float(r[0])) for r in rows[1:]]
    ys = [math.log(float(r[1])) for r in rows[1:]]
    mx, my = sum(xs) / len(xs), sum(ys) / len(ys)
    sxx = sum((x - mx) ** 2 for x in xs)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    return sxy / sxx, len(xs)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv")
    ap.add_argument("--expect", type=float, default=None, help="slope reported by the experiment")
    ap.add_argument("--tol", type=float, default=1e-10)
    args = ap.parse_args()
    s, n = slope(args.csv)
    print(f"{args.csv}: {n} points, slope {s!r}")
    if args.expect is not None and abs(s - args.expect) > args.tol:
        print(f"mismatch: reported {args.expect!r}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
