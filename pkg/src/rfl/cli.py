"""Command-line entry point: ``rfl gen | solve | compare | sweep-gamma | example-2-4``.

Exit codes: 0 optimal, 2 time (or node) limit reached with an incumbent,
1 on any error.  Result files are only written on exit 0 or 2.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .conic import env_max_iters
from .bnb import BnbOptions, solve_with_protocol
from .hull import dump_cuts
from .instances import GenConfig, generate, illustrative_2_4, load_instance, save_instance
from .misocp import BuildOptions, build_misocp, dump_model
from .model import Instance, ModelError, recourse_value_fixed_y

log = logging.getLogger("rfl")

EXIT_OK, EXIT_ERROR, EXIT_LIMIT = 0, 1, 2
MODES = {"none": "no_cuts", "root": "with_cuts"}
DEFAULT_GAMMAS = (0.0, 0.2, 0.4, 0.6, 0.8)
MONOTONE_SLACK = 1e-6
REEVAL_TOL = 1e-5
COMPARE_HEADER = ["ID", "|S|", "B"] + [f"{col}_{mode}" for mode in ("no_cuts", "with_cuts")
                                       for col in ("Obj", "CPU_s", "Nodes", "DevCuts")]

# Desk-scale comparison suite as (sites, budget, seed): every budget at 20 sites for
# three seeds, plus the 40-site / budget-5 shape.  Larger 40-site runs take tens
# of minutes each with the built-in conic solver.
DESK_SUITE = tuple((20, b, seed) for seed in (1, 2, 3) for b in (5, 10, 15)) + ((40, 5, 1),)

# Reference optima of the three-site example: (case, expected y, low, high, published value)
EXAMPLE_CASES = (
    ("base", (1, 0, 0), 623.4, 623.6, 582.0),
    ("est1", (1, 0, 0), 548.0, 549.0, 548.0),
    ("est2", (0, 1, 0), 555.0, 557.0, 556.0),
)
BASE_NOTE = ("note: without ambiguity, opening facility 1 gives 8.5*20 + 8.2*30 + 8.3*25 = 623.5; "
             "the published 582 matches no feasible decision (623.5 / 608.5 / 555.5) "
             "and is treated as a misprint")


class CliError(Exception):
    pass


@dataclass
class RunResult:
    instance: str
    mode: str
    status: str
    objective: float
    y: list
    open_set: list
    flows: list = field(default_factory=list)      # [i, j, x_ij] with x_ij > 0
    stats: dict = field(default_factory=dict)
    reevaluated: float = math.nan
    sweep: list = field(default_factory=list)      # per-gamma records

    def to_dict(self) -> dict:
        return _json_safe(asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunResult":
        data = dict(data)
        for key in ("objective", "reevaluated"):
            if data.get(key) is None:
                data[key] = math.nan
        return cls(**data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _json_safe(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def _flow_list(x) -> list:
    x = np.asarray(x)
    return [[int(i), int(j), float(x[i, j])] for i, j in zip(*np.nonzero(x > 1e-9))]


def _check_env() -> None:
    try:
        env_max_iters()
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _bnb_options(args) -> BnbOptions:
    if args.gap < 0:
        raise CliError("--gap must be >= 0")
    if args.time_limit is not None and args.time_limit < 0:
        raise CliError("--time-limit must be >= 0")
    if args.threads < 1:
        raise CliError("--threads must be >= 1")
    build = BuildOptions(prune_pairs=not args.no_prune_pairs,
                         reduce_dominated=not args.no_reduce,
                         strengthen=not args.no_strengthen)
    return BnbOptions(
        gap=args.gap,
        time_limit=math.inf if args.time_limit is None else args.time_limit,
        threads=args.threads,
        max_rounds=args.max_rounds,
        cuts_every_k_nodes=args.cuts_every_k_nodes,
        conic_tol=args.conic_tol,
        log_every=args.log_every,
        build=build,
    )


def run_solve(inst: Instance, mode: str, opts: BnbOptions, build=None):
    """Solve and re-evaluate the incumbent through the closed forms."""
    sol, stats, cuts = solve_with_protocol(inst, mode, opts, build)
    if not math.isfinite(sol.objective):
        raise CliError(f"no feasible solution found (status {stats.status})")
    value, _ = recourse_value_fixed_y(inst, sol.y)
    check = float(inst.fixed_gains @ sol.y) + value
    if abs(check - sol.objective) > REEVAL_TOL * max(1.0, abs(check)):
        raise CliError(f"objective {sol.objective} does not re-evaluate ({check})")
    result = RunResult(inst.name, mode, stats.status, sol.objective,
                       [int(v) for v in sol.y], sol.open_set, _flow_list(sol.x),
                       stats.to_json(), check)
    return result, sol, stats, cuts


# --- commands ---------------------------------------------------------------------

def cmd_gen(args) -> int:
    lo, hi = args.demand_range
    cfg = GenConfig(n_sites=args.sites, budget=args.budget, seed=args.seed,
                    demand_range=(lo, hi), gamma_hi=args.gamma2,
                    full_matrices=args.full_matrices)
    inst = generate(cfg)
    out = Path(args.output or f"{inst.name}.json")
    save_instance(inst, out)
    print(f"wrote {out}: |S|={inst.n_sites} |F|={inst.n_facilities} "
          f"pairs={len(inst.ambiguity)} B={inst.budget:g} seed={args.seed}")
    return EXIT_OK


def cmd_solve(args) -> int:
    inst = load_instance(args.instance)
    opts = _bnb_options(args)
    build = build_misocp(inst, opts.build)
    if args.dump_model:
        dump_model(build[0], args.dump_model)
    result, sol, stats, cuts = run_solve(inst, MODES[args.cuts], opts, build)
    if args.dump_cuts:
        dump_cuts(cuts, args.dump_cuts)
    out = Path(args.output or f"{inst.name}.result.json")
    out.write_text(result.dumps())
    print(f"{inst.name}: status={stats.status} objective={sol.objective:.6f} "
          f"open={sol.open_set} nodes={stats.nodes} cuts={len(cuts)} "
          f"gap={stats.gap:.2e} time={stats.wall_time:.2f}s -> {out}")
    return EXIT_OK if stats.status == "optimal" else EXIT_LIMIT


def _instances_from_args(args) -> list[Instance]:
    insts = [load_instance(p) for p in args.instances]
    for spec in args.generate or []:
        try:
            n, b, seed = (float(t) for t in spec.split(":"))
        except ValueError:
            raise CliError(f"--generate expects SITES:BUDGET:SEED, got {spec!r}") from None
        insts.append(generate(GenConfig(int(n), b, int(seed))))
    if getattr(args, "suite", None) == "desk":
        insts += [generate(GenConfig(n, b, seed)) for n, b, seed in DESK_SUITE]
    if not insts:
        raise CliError("no instances given")
    return insts


def compare_rows(insts, opts: BnbOptions, echo=print):
    rows, limited = [], False
    for inst in insts:
        row = {"ID": inst.name, "|S|": inst.n_sites, "B": f"{inst.budget:g}"}
        objs = {}
        for mode in ("no_cuts", "with_cuts"):
            result, sol, stats, cuts = run_solve(inst, mode, opts)
            limited |= stats.status != "optimal"
            objs[mode] = sol.objective
            row.update({f"Obj_{mode}": f"{sol.objective:.6f}",
                        f"CPU_s_{mode}": f"{stats.wall_time:.2f}",
                        f"Nodes_{mode}": stats.nodes,
                        f"DevCuts_{mode}": len(cuts)})
        agree = abs(objs["no_cuts"] - objs["with_cuts"]) <= 1e-4 * max(1.0, abs(objs["no_cuts"]))
        echo(f"{inst.name}: obj {objs['no_cuts']:.4f} / {objs['with_cuts']:.4f} "
             f"nodes {row['Nodes_no_cuts']} / {row['Nodes_with_cuts']}"
             + ("" if agree else "  OBJECTIVES DISAGREE"))
        rows.append(row)
    return rows, limited


def cmd_compare(args) -> int:
    insts = _instances_from_args(args)
    rows, limited = compare_rows(insts, _bnb_options(args))
    out = Path(args.output)
    with out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COMPARE_HEADER)
        writer.writeheader()
        writer.writerows(rows)
    fewer = sum(r["Nodes_with_cuts"] <= r["Nodes_no_cuts"] for r in rows)
    ratios = [r["Nodes_with_cuts"] / max(1, r["Nodes_no_cuts"]) for r in rows]
    print(f"with_cuts nodes <= no_cuts on {fewer}/{len(rows)} instances; "
          f"mean node ratio {np.mean(ratios):.3f} -> {out}")
    return EXIT_LIMIT if limited else EXIT_OK


def _apply_patch(inst: Instance, patch_path: Optional[str]) -> Instance:
    if not patch_path:
        return inst
    data = json.loads(Path(patch_path).read_text())
    amb = dict(inst.ambiguity)
    for entry in data.get("pairs", []):
        key = (int(entry["i"]), int(entry["j"]))
        if key not in amb:
            raise CliError(f"patch refers to unknown pair {key}")
        amb[key] = amb[key].with_gamma_hi(float(entry["gamma2"]))
    return Instance(inst.sites, inst.facilities, inst.budget, inst.fixed_gains, amb, inst.name)


def sweep_gamma(inst: Instance, gammas, opts: BnbOptions, patch: Optional[str] = None):
    """Solve ``inst`` for each uniform gamma2; returns per-gamma records."""
    records = []
    for gamma in gammas:
        cur = _apply_patch(inst.with_gamma_hi(gamma), patch)
        result, sol, stats, _ = run_solve(cur, "no_cuts", opts)
        records.append({"gamma": float(gamma), "objective": sol.objective,
                        "open_set": sol.open_set, "flows": _flow_list(sol.x),
                        "status": stats.status, "nodes": stats.nodes,
                        "time_s": stats.wall_time})
    return records


def check_monotone(records, slack: float = MONOTONE_SLACK) -> list[str]:
    problems = []
    for a, b in zip(records, records[1:]):
        if b["objective"] > a["objective"] + slack * max(1.0, abs(a["objective"])):
            problems.append(f"objective rises from {a['objective']:.6f} (gamma {a['gamma']}) "
                            f"to {b['objective']:.6f} (gamma {b['gamma']})")
    return problems


def open_set_changes(records) -> list[str]:
    return [f"gamma {a['gamma']} -> {b['gamma']}: {a['open_set']} -> {b['open_set']}"
            for a, b in zip(records, records[1:]) if a["open_set"] != b["open_set"]]


def sweep_svg(inst: Instance, records, size: int = 260) -> str:
    """Panels of site locations, open facilities (squares) and flow arcs."""
    coords = np.array([s.coord for s in inst.sites])
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 20

    def pos(k):
        p = (coords[k] - lo) / span
        return pad + p[0] * (size - 2 * pad), pad + (1 - p[1]) * (size - 2 * pad)

    width = size * len(records)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{size + 30}" '
             f'font-family="sans-serif" font-size="11">']
    for panel, rec in enumerate(records):
        ox = panel * size
        parts.append(f'<g transform="translate({ox},0)">')
        parts.append(f'<rect x="1" y="1" width="{size - 2}" height="{size - 2}" fill="none" stroke="#999"/>')
        for i, j, amount in rec["flows"]:
            (x1, y1), (x2, y2) = pos(i), pos(j)
            parts.append(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" '
                         f'stroke="#3a7" stroke-width="{0.5 + amount / 40:.2f}"/>')
        for k in range(inst.n_sites):
            x, y = pos(k)
            if k in rec["open_set"]:
                parts.append(f'<rect x="{x - 5:.1f}" y="{y - 5:.1f}" width="10" height="10" fill="#c33"/>')
            else:
                parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="#333"/>')
            parts.append(f'<text x="{x + 5:.1f}" y="{y - 5:.1f}">{k + 1}</text>')
        parts.append(f'<text x="8" y="{size + 18}">gamma2={rec["gamma"]:g}  obj={rec["objective"]:.2f}</text>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_sweep_gamma(args) -> int:
    inst = load_instance(args.instance)
    gammas = args.gammas or list(DEFAULT_GAMMAS)
    if any(g < 0 for g in gammas):
        raise CliError("gamma values must be >= 0")
    records = sweep_gamma(inst, gammas, _bnb_options(args), args.patch)
    problems = check_monotone(records)
    if problems:
        raise CliError("swept objective is not nonincreasing: " + "; ".join(problems))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = inst.name
    with (out / f"{stem}.sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "objective", "open_set", "flows"])
        for r in records:
            w.writerow([r["gamma"], f"{r['objective']:.6f}", " ".join(str(k) for k in r["open_set"]),
                        " ".join(f"{i}>{j}:{x:.4g}" for i, j, x in r["flows"])])
    with (out / f"{stem}.sites.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "x", "y", "demand"])
        for s in inst.sites:
            w.writerow([s.id, s.coord[0], s.coord[1], s.demand])
    (out / f"{stem}.sweep.svg").write_text(sweep_svg(inst, records))
    result = RunResult(inst.name, "sweep", "optimal", records[0]["objective"],
                       [], records[0]["open_set"], sweep=records)
    (out / f"{stem}.sweep.json").write_text(result.dumps())
    for r in records:
        print(f"gamma2={r['gamma']:<5g} objective={r['objective']:.4f} open={r['open_set']}")
    changes = open_set_changes(records)
    print("open-set changes: " + ("; ".join(changes) if changes else "none"))
    limited = any(r["status"] != "optimal" for r in records)
    return EXIT_LIMIT if limited else EXIT_OK


def example_2_4_table(mode: str = "no_cuts", opts: Optional[BnbOptions] = None):
    opts = opts or BnbOptions()
    rows, failures = [], []
    for case, y_ref, lo, hi, published in EXAMPLE_CASES:
        result, sol, stats, _ = run_solve(illustrative_2_4(case), mode, opts)
        y = tuple(int(v) for v in sol.y)
        ok = y == y_ref and lo <= sol.objective <= hi
        rows.append((case, y, sol.objective, published, ok))
        if not ok:
            failures.append(case)
    return rows, failures


def cmd_example_2_4(args) -> int:
    rows, failures = example_2_4_table(MODES[args.cuts], _bnb_options(args))
    print(f"{'case':<6} {'y*':<10} {'objective':>11} {'published':>10}  check")
    for case, y, obj, published, ok in rows:
        print(f"{case:<6} {str(list(y)):<10} {obj:>11.4f} {published:>10.1f}  {'ok' if ok else 'FAIL'}")
    print(BASE_NOTE)
    if failures:
        print(f"deviation in: {', '.join(failures)}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gap", type=float, default=1e-4, help="relative optimality gap")
    p.add_argument("--time-limit", type=float, default=None, help="seconds (default: none)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--conic-tol", type=float, default=None,
                   help="feasibility/gap tolerance of every relaxation solve")
    p.add_argument("--max-rounds", type=int, default=5, help="root cut rounds")
    p.add_argument("--cuts-every-k-nodes", type=int, default=0)
    p.add_argument("--log-every", type=int, default=100, help="progress line every N nodes")
    p.add_argument("--no-prune-pairs", action="store_true", help="keep zero-utility pairs")
    p.add_argument("--no-reduce", action="store_true",
                   help="keep both utility branches even when one dominates")
    p.add_argument("--no-strengthen", action="store_true", help="omit the product rows")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a random instance")
    p.add_argument("--sites", type=int, required=True)
    p.add_argument("--budget", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma2", type=float, default=0.2)
    p.add_argument("--demand-range", type=int, nargs=2, default=(20, 80), metavar=("LO", "HI"))
    p.add_argument("--full-matrices", action="store_true")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("solve", help="solve one instance")
    p.add_argument("instance")
    p.add_argument("--cuts", choices=sorted(MODES), default="none")
    p.add_argument("--dump-cuts")
    p.add_argument("--dump-model")
    p.add_argument("-o", "--output")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("compare", help="solve with and without root cuts")
    p.add_argument("instances", nargs="*")
    p.add_argument("--generate", action="append", metavar="SITES:BUDGET:SEED")
    p.add_argument("--suite", choices=["desk"], help="add the built-in desk-scale suite")
    p.add_argument("-o", "--output", default="compare.csv")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-gamma", help="re-solve across variance levels")
    p.add_argument("instance")
    p.add_argument("--gammas", type=float, nargs="+")
    p.add_argument("--patch", help="JSON with per-pair gamma2 overrides")
    p.add_argument("--out-dir", default=".")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_sweep_gamma)

    p = sub.add_parser("example-2-4", help="three-site reference example")
    p.add_argument("--cuts", choices=sorted(MODES), default="none")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_example_2_4)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_env()
        return args.func(args)
    except (CliError, ModelError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"rfl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
