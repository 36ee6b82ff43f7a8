#!/usr/bin/env python3
"""Node counts with and without root cuts on the desk-scale suite.

Writes the comparison CSV (same columns as ``rfl compare``) and prints the
share of instances where the cut mode needs no more nodes.

    python scripts/table_trend.py -o table_trend.csv
    python scripts/table_trend.py --instance 20:10:4 --instance 40:5:1
"""
import argparse
import csv
import logging
import time

import numpy as np

from rfl.bnb import BnbOptions
from rfl.cli import COMPARE_HEADER, DESK_SUITE, compare_rows
from rfl.instances import GenConfig, generate


def parse_instance(text):
    n, budget, seed = text.split(":")
    return int(n), float(budget), int(seed)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--instance", action="append", type=parse_instance, metavar="SITES:BUDGET:SEED",
                    help="instance to run (repeatable); default: the desk-scale suite")
    ap.add_argument("--time-limit", type=float, default=float("inf"), help="per-solve limit (s)")
    ap.add_argument("-o", "--output", default="table_trend.csv")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    suite = args.instance or list(DESK_SUITE)
    insts = [generate(GenConfig(n, b, seed=seed)) for n, b, seed in suite]
    start = time.perf_counter()
    rows, limited = compare_rows(insts, BnbOptions(time_limit=args.time_limit))
    total = time.perf_counter() - start

    with open(args.output, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COMPARE_HEADER)
        writer.writeheader()
        writer.writerows(rows)
    fewer = sum(r["Nodes_with_cuts"] <= r["Nodes_no_cuts"] for r in rows)
    ratio = np.mean([r["Nodes_with_cuts"] / max(1, r["Nodes_no_cuts"]) for r in rows])
    print(f"{fewer}/{len(rows)} instances with with_cuts nodes <= no_cuts; mean ratio {ratio:.3f}; "
          f"total {total:.0f}s{' (some runs hit the time limit)' if limited else ''} -> {args.output}")


if __name__ == "__main__":
    main()
