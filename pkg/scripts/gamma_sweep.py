#!/usr/bin/env python3
"""Ambiguity-level sweep over several seeded 10-site instances.

For each seed the instance is re-solved for every gamma2; the script checks
that the optimum never increases with gamma2 and lists open-set changes.

    python scripts/gamma_sweep.py --seeds 0 1 2 3 4 --budget 3
"""
import argparse
import json

from rfl.bnb import BnbOptions
from rfl.cli import DEFAULT_GAMMAS, check_monotone, open_set_changes, sweep_gamma
from rfl.instances import GenConfig, generate


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sites", type=int, default=10)
    ap.add_argument("--budget", type=float, default=3)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--gammas", type=float, nargs="+", default=list(DEFAULT_GAMMAS))
    ap.add_argument("-o", "--output", help="write all records as JSON")
    args = ap.parse_args(argv)

    everything = {}
    for seed in args.seeds:
        inst = generate(GenConfig(args.sites, args.budget, seed=seed))
        records = sweep_gamma(inst, args.gammas, BnbOptions())
        everything[inst.name] = records
        objs = " ".join(f"{r['objective']:.2f}" for r in records)
        print(f"{inst.name}: {objs}")
        for problem in check_monotone(records):
            print(f"  NOT MONOTONE: {problem}")
        for change in open_set_changes(records) or ["open set unchanged"]:
            print(f"  {change}")
    if args.output:
        with open(args.output, "w") as fh:
            json.dump(everything, fh, indent=2)


if __name__ == "__main__":
    main()
