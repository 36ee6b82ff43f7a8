"""Branch-and-bound over the binaries of the location MISOCP.

Nodes are stored as fixings replayed onto one shared relaxed program
(variable bounds only; the constraint matrix never changes inside a tree).
Node selection is best-bound; the branching variable is the most
fractional y (ties to the lowest index), and s variables are branched on
only once every y is integral.  Nodes whose y are all fixed are closed
exactly by the fixed-y transportation oracle, restricted to the utility
branches that the node's s fixings allow.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .conic import ConicProgram, ConicResult, ConicWorkspace, Settings, Status
from .hull import TangentCut, gcut_f, gcut_g, pcut, validate_cut
from .misocp import (BuildOptions, NONE, VariableMap, attach_cuts, attached_cut_list,
                     build_misocp, relax)
from .model import Instance, Solution, recourse_value_fixed_y

log = logging.getLogger(__name__)

ROOT_TOL = 1e-7
DEEP_TOL = 1e-6
DEEP_DEPTH = 3
CUT_SOURCE_MIN = 1e-7
IMPLIED_TOL = 1e-12


class SolverError(RuntimeError):
    pass


@dataclass
class BnbOptions:
    gap: float = 1e-4
    time_limit: float = math.inf
    max_nodes: int = 10**7
    heuristic_every: int = 50
    log_every: int = 100
    threads: int = 1
    int_tol: float = 1e-6
    max_rounds: int = 5
    cuts_every_k_nodes: int = 0
    conic_tol: Optional[float] = None
    build: BuildOptions = field(default_factory=BuildOptions)
    on_incumbent: Optional[Callable] = None  # called as f(y, x, value) on every improvement


@dataclass(order=True)
class Node:
    sort_key: tuple = field(compare=True, repr=False)
    fixings: dict = field(compare=False, default_factory=dict)
    bound: float = field(compare=False, default=math.inf)
    depth: int = field(compare=False, default=0)
    id: int = field(compare=False, default=0)


@dataclass
class SolveStats:
    nodes: int = 0
    developed_cuts: int = 0
    root_rounds: int = 0
    wall_time: float = 0.0
    gap: float = math.inf
    incumbent: float = -math.inf
    bound: float = math.inf
    status: str = "optimal"
    root_bound: float = math.nan
    root_bound_no_cuts: float = math.nan
    max_bound_increase: float = 0.0

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                for k, v in self.__dict__.items()}


def relative_gap(bound: float, incumbent: float) -> float:
    if not math.isfinite(incumbent):
        return math.inf
    return (bound - incumbent) / max(1.0, abs(incumbent))


def _relaxation_bound(res: ConicResult) -> float:
    """Upper bound from a relaxation solve: the larger of the primal and the
    dual objective, so small solver inaccuracies never cut off optima."""
    vals = [v for v in (res.objective, res.dual_objective) if math.isfinite(v)]
    return max(vals) if vals else math.inf


def _settings(conic_tol: Optional[float]) -> Settings:
    tol = conic_tol or ROOT_TOL
    return Settings(tol_feas=tol, tol_gap=tol)


def solve_relaxation(ws: ConicWorkspace, lo, hi, tol: float) -> ConicResult:
    """Fast solve first (no iterative refinement), then refined, then looser."""
    res = ws.solve(lo, hi, tol, refine=False)
    if res.status in (Status.ITER_LIMIT, Status.NUMERICAL_ERROR):
        res = ws.solve(lo, hi, tol)
    if res.status in (Status.ITER_LIMIT, Status.NUMERICAL_ERROR):
        res = ws.solve(lo, hi, 10 * tol)
    return res


# --- root cuts ------------------------------------------------------------------

def separate(vmap: VariableMap, primal, known=()) -> list[TangentCut]:
    """Validated G- and P-cuts at the pair blocks of ``primal``."""
    inst = vmap.inst
    out = []
    for ij, pv in vmap.pairs.items():
        if pv.branch is not None:
            # one branch dominates: the epigraph is that branch's convex
            # hypograph, so every valid cut is implied by its cone
            continue
        v0 = np.maximum(primal[pv.v], 0.0)
        if v0.sum() < CUT_SOURCE_MIN:
            continue
        pair = inst.ambiguity[ij]
        cands = [gcut_f(pair, v0, ij), gcut_g(pair, v0, ij), pcut(pair, v0, ij)]
        for cut in cands:
            # alpha >= beta_hat is implied by U <= beta_hat.v on v >= 0
            if cut is None or np.all(cut.alpha >= pair.beta_hat - IMPLIED_TOL):
                continue
            if validate_cut(pair, cut):
                out.append(cut)
    return attached_cut_list(vmap, out, known)


def root_cut_loop(prog: ConicProgram, vmap: VariableMap, inst: Instance, max_rounds: int = 5,
                  settings: Optional[Settings] = None, info: Optional[dict] = None):
    """Alternate relaxation solves and cut separation at the root.

    Returns the program with all cuts attached and the list of cuts.  Stops
    after ``max_rounds`` rounds, when no new cut is found, or when a round
    lowers the bound by less than 1e-6 relative.  ``info`` (if given) receives
    ``rounds``, ``bound_before``, ``bounds`` (one entry per solve) and
    ``result``, the relaxation solution of the returned program.
    """
    if max_rounds < 0:
        raise ValueError("max_rounds must be >= 0")
    info = {} if info is None else info
    info.update(rounds=0, bounds=[])
    if max_rounds == 0:
        return prog, []
    settings = settings or _settings(None)
    cur = prog
    cuts: list[TangentCut] = []

    def solve(p):
        rel = relax(p)
        res = solve_relaxation(ConicWorkspace(rel, settings), rel.lo, rel.hi, settings.tol_feas)
        if not res.ok:
            raise SolverError(f"root relaxation failed: status={res.status} "
                              f"iterations={res.iterations} residuals={res.residuals}")
        info["bounds"].append(_relaxation_bound(res))
        return res

    res = solve(cur)
    info["bound_before"] = info["bounds"][0]
    for _ in range(max_rounds):
        fresh = separate(vmap, res.primal, cuts)
        if not fresh:
            break
        cur = attach_cuts(cur, vmap, fresh, cuts)
        cuts += fresh
        info["rounds"] += 1
        prev = info["bounds"][-1]
        res = solve(cur)
        if prev - info["bounds"][-1] < 1e-6 * max(1.0, abs(prev)):
            break
    info["result"] = res
    return cur, cuts


# --- branch and bound ------------------------------------------------------------

class _Tree:
    def __init__(self, prog: ConicProgram, vmap: VariableMap, inst: Instance, opts: BnbOptions):
        self.prog = prog
        self.vmap = vmap
        self.inst = inst
        self.opts = opts
        self.rel = relax(prog)
        self.ws = ConicWorkspace(self.rel, _settings(opts.conic_tol))
        self.s_to_pair = {pv.s: ij for ij, pv in vmap.pairs.items() if pv.s != NONE}
        self.y = vmap.y
        self.s = vmap.s_indices
        self.inc_value = -math.inf
        self.inc_y: Optional[np.ndarray] = None
        self.inc_x: Optional[np.ndarray] = None
        self.pruned_max = -math.inf
        self.cache: dict[tuple, tuple[float, np.ndarray]] = {}
        self.counter = itertools.count()
        self.heap: list[Node] = []
        self.stats = SolveStats()

    # oracle ---------------------------------------------------------------
    def oracle(self, y, allowed=None) -> tuple[float, np.ndarray]:
        key = (tuple(int(v) for v in y), tuple(sorted((allowed or {}).items())))
        if key not in self.cache:
            value, x = recourse_value_fixed_y(self.inst, y, allowed)
            self.cache[key] = (float(self.inst.fixed_gains @ y) + value, x)
        return self.cache[key]

    def offer(self, y) -> None:
        y = np.round(np.asarray(y, dtype=float))
        if not self.inst.is_budget_feasible(y):
            return
        value, x = self.oracle(y)
        if value > self.inc_value + 1e-9:
            self.inc_value, self.inc_y, self.inc_x = value, y, x
            if self.opts.on_incumbent is not None:
                self.opts.on_incumbent(y, x, value)

    def heuristic(self, y_relax) -> None:
        """Open the largest relaxed y greedily while the budget allows."""
        costs = self.inst.open_costs
        y = np.zeros(self.inst.n_facilities)
        spent = 0.0
        for k in np.argsort(-np.asarray(y_relax), kind="stable"):
            if y_relax[k] <= self.opts.int_tol:
                break
            if spent + costs[k] <= self.inst.budget + 1e-9:
                y[k] = 1.0
                spent += costs[k]
        self.offer(y)

    # nodes ----------------------------------------------------------------
    def push(self, fixings: dict, bound: float, depth: int) -> None:
        nid = next(self.counter)
        heapq.heappush(self.heap, Node((-bound, nid), fixings, bound, depth, nid))

    def bounds_for(self, fixings: dict) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.rel.lo.copy(), self.rel.hi.copy()
        for k, val in fixings.items():
            lo[k] = hi[k] = val
        return lo, hi

    def completed_y(self, fixings: dict) -> Optional[np.ndarray]:
        """The y vector a node pins down: every y fixed, or the fixed-open
        facilities leave too little budget to open any free one."""
        costs = self.inst.open_costs
        free = [pos for pos, k in enumerate(self.y) if k not in fixings]
        y = np.array([fixings.get(k, 0) for k in self.y], dtype=float)
        if free and np.any(float(costs @ y) + costs[free] <= self.inst.budget + 1e-9):
            return None
        return y

    def is_leaf(self, node: Node) -> bool:
        return self.completed_y(node.fixings) is not None

    def solve_node(self, node: Node) -> Optional[ConicResult]:
        if self.is_leaf(node):
            return None  # closed exactly by the oracle
        lo, hi = self.bounds_for(node.fixings)
        tol = self.opts.conic_tol or (ROOT_TOL if node.depth < DEEP_DEPTH else DEEP_TOL)
        return solve_relaxation(self.ws, lo, hi, tol)

    def gap_closed(self, bound: float) -> bool:
        return relative_gap(bound, self.inc_value) <= self.opts.gap

    def leaf_value(self, fixings: dict) -> float:
        """Exact optimum of a node whose y are all fixed."""
        y = self.completed_y(fixings)
        if not self.inst.is_budget_feasible(y):
            return -math.inf
        self.offer(y)
        allowed = {self.s_to_pair[k]: ("f" if v == 1 else "g")
                   for k, v in fixings.items() if k in self.s_to_pair}
        return self.oracle(y, allowed)[0] if allowed else self.oracle(y)[0]

    def process(self, node: Node, res: Optional[ConicResult]) -> None:
        opts = self.opts
        if self.is_leaf(node):
            value = self.leaf_value(node.fixings)
            if math.isfinite(value):
                self.pruned_max = max(self.pruned_max, value)
            return
        if res.status == Status.INFEASIBLE:
            return
        if res.ok:
            bound = min(_relaxation_bound(res), node.bound)
            self.stats.max_bound_increase = max(self.stats.max_bound_increase,
                                                _relaxation_bound(res) - node.bound)
            primal = res.primal
        else:
            log.warning("node %d: relaxation status %s; keeping parent bound", node.id, res.status)
            bound, primal = node.bound, None
        if self.gap_closed(bound):
            self.pruned_max = max(self.pruned_max, bound)
            return

        if primal is None:
            k = next(k for k in self.y if k not in node.fixings)
        else:
            yv = primal[self.y]
            frac = np.abs(yv - np.round(yv))
            if np.all(frac <= opts.int_tol):
                self.offer(yv)
                if self.gap_closed(bound):
                    self.pruned_max = max(self.pruned_max, bound)
                    return
                k = self._pick_s(primal, node)
                if k is None:
                    # integral relaxation optimum but the gap is still open
                    # (solver tolerance, or a relaxation that is only exact
                    # for fixed y): fix a free y, open ones first
                    free = [k for k in self.y if k not in node.fixings]
                    k = max(free, key=lambda k: primal[k])
            else:
                k = int(self.y[int(np.argmax(frac))])
        for val in (1, 0):  # branch-up first
            child = dict(node.fixings)
            child[k] = val
            self.push(child, bound, node.depth + 1)

    def _pick_s(self, primal, node: Node) -> Optional[int]:
        free = [k for k in self.s if k not in node.fixings]
        if not free:
            return None
        sv = primal[free]
        frac = np.abs(sv - np.round(sv))
        if np.max(frac) <= self.opts.int_tol:
            return None
        return int(free[int(np.argmax(frac))])

    def global_bound(self) -> float:
        top = -self.heap[0].sort_key[0] if self.heap else -math.inf
        return max(top, self.pruned_max, self.inc_value)

    def log_progress(self) -> None:
        ub = self.global_bound()
        log.info("node=%d bound=%.6f incumbent=%.6f gap=%.3e", self.stats.nodes, ub,
                 self.inc_value, relative_gap(ub, self.inc_value))


def branch_and_bound(prog: ConicProgram, vmap: VariableMap, inst: Instance,
                     opts: Optional[BnbOptions] = None, stats: Optional[SolveStats] = None,
                     cuts: Optional[list] = None,
                     root_result: Optional[ConicResult] = None) -> tuple[Solution, SolveStats]:
    """``root_result`` may carry an already computed relaxation of ``prog``."""
    opts = opts or BnbOptions()
    start = time.perf_counter()
    tree = _Tree(prog, vmap, inst, opts)
    if stats is not None:
        tree.stats = stats
    st = tree.stats
    cuts = list(cuts or [])

    root = Node((-math.inf, next(tree.counter)), {}, math.inf, 0, 0)
    res = root_result if root_result is not None else tree.solve_node(root)
    st.nodes = 1
    if res.status == Status.INFEASIBLE:
        st.status = "infeasible"
        st.wall_time = time.perf_counter() - start
        return Solution(np.zeros(inst.n_facilities), np.zeros((inst.n_sites, inst.n_facilities)),
                        -math.inf, -math.inf, math.inf, 1, len(cuts), "infeasible"), st
    if not res.ok:
        raise SolverError(f"root relaxation failed: status={res.status} residuals={res.residuals}")
    st.root_bound = _relaxation_bound(res)
    tree.heuristic(res.primal[vmap.y])
    tree.process(root, res)

    status = "optimal"
    pool = ThreadPoolExecutor(opts.threads) if opts.threads > 1 else None
    try:
        while tree.heap:
            if tree.gap_closed(-tree.heap[0].sort_key[0]):
                tree.pruned_max = max(tree.pruned_max, -tree.heap[0].sort_key[0])
                tree.heap.clear()
                break
            if time.perf_counter() - start >= opts.time_limit:
                status = "time_limit"
                break
            if st.nodes >= opts.max_nodes:
                status = "node_limit"
                break
            batch = [heapq.heappop(tree.heap) for _ in range(min(opts.threads, len(tree.heap)))]
            if pool is None:
                results = [tree.solve_node(batch[0])]
            else:
                results = list(pool.map(tree.solve_node, batch))
            for node, r in zip(batch, results):
                st.nodes += 1
                tree.process(node, r)
                if r is not None and r.ok and opts.heuristic_every and st.nodes % opts.heuristic_every == 0:
                    tree.heuristic(r.primal[vmap.y])
                if r is not None and r.ok and opts.cuts_every_k_nodes and st.nodes % opts.cuts_every_k_nodes == 0:
                    fresh = separate(vmap, r.primal, cuts)
                    if fresh:
                        tree.prog = attach_cuts(tree.prog, vmap, fresh, cuts)
                        cuts += fresh
                        tree.rel = relax(tree.prog)
                        tree.ws = ConicWorkspace(tree.rel, _settings(opts.conic_tol))
                if opts.log_every and st.nodes % opts.log_every == 0:
                    tree.log_progress()
    finally:
        if pool is not None:
            pool.shutdown()

    st.wall_time = time.perf_counter() - start
    st.developed_cuts = len(cuts)
    if tree.inc_y is None:
        st.status = "infeasible" if status == "optimal" else status
        st.bound = tree.global_bound()
        return Solution(np.zeros(inst.n_facilities), np.zeros((inst.n_sites, inst.n_facilities)),
                        -math.inf, st.bound, math.inf, st.nodes, len(cuts), st.status), st
    st.incumbent = tree.inc_value
    st.bound = tree.global_bound()
    st.gap = max(relative_gap(st.bound, st.incumbent), 0.0)
    st.status = status
    tree.log_progress()
    sol = Solution(tree.inc_y, tree.inc_x, tree.inc_value, st.bound, st.gap, st.nodes, len(cuts),
                   status, reevaluated=tree.inc_value, consistent=True)
    return sol, st


def solve_with_protocol(inst: Instance, mode: str = "no_cuts", opts: Optional[BnbOptions] = None,
                        build: Optional[tuple[ConicProgram, VariableMap]] = None):
    """Build, optionally run the root cut loop, then branch and bound.

    Returns (Solution, SolveStats, cuts)."""
    if mode not in ("no_cuts", "with_cuts"):
        raise ValueError("mode must be 'no_cuts' or 'with_cuts'")
    opts = opts or BnbOptions()
    start = time.perf_counter()
    prog, vmap = build or build_misocp(inst, opts.build)
    stats = SolveStats()
    cuts: list[TangentCut] = []
    info: dict = {}
    if mode == "with_cuts":
        prog, cuts = root_cut_loop(prog, vmap, inst, opts.max_rounds, _settings(opts.conic_tol), info)
        stats.root_rounds = info["rounds"]
        stats.root_bound_no_cuts = info.get("bound_before", math.nan)
    remaining = opts.time_limit - (time.perf_counter() - start)
    bnb_opts = BnbOptions(**{**opts.__dict__, "time_limit": max(remaining, 0.0)})
    sol, stats = branch_and_bound(prog, vmap, inst, bnb_opts, stats, cuts, info.get("result"))
    stats.wall_time = time.perf_counter() - start
    return sol, stats, cuts
