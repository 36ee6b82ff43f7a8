"""The location problem as a mixed 0-1 second-order cone program.

Per effective pair (i, j) the model carries the lifted flow vector
v = x_ij * y (exact product linearization with constant R = min(D_i, C_j)),
its split v = v1 + v2 between the two utility branches, the utilities
U = U1 + U2 and a binary s selecting the branch:

    U1 <= beta.v1 - b  * t1,   t1 >= ||A^{-1/2} v1||,   v1 <= R s
    U2 <= beta.v2 - sg * t2,   t2 >= ||Sigma^{1/2} v2||, v2 <= R (1 - s)

Objective: c.y + sum U.  Each norm is encoded through a triangular factor
(QR of the symmetric square root), which leaves the norm unchanged and
halves the cone nonzeros.

Two optional, exactness-preserving refinements (both on by default):

* ``reduce_dominated``: when one branch provably dominates the other on the
  nonnegative orthant (``model.dominant_branch``) the pair keeps only that
  branch: v1 (or v2) is v itself, U1 (or U2) is U, and there is no s.
* ``strengthen``: valid rows obtained by multiplying model rows with bound
  factors, which the product linearization alone does not imply:
      x_ij <= R y_j                        (flow only to open facilities)
      v_j = x_ij                           (own component: x_ij y_j = x_ij)
      sum_k b_k v_k <= B x_ij              (budget row times x_ij)
      sum_j v^{ij}_k <= D_i y_k            (demand row times y_k)

Upper bounds: x <= R and U <= R * sum(beta^+) are explicit; v, v1, v2 <= R
and the norm variables are bounded implicitly through the rows.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .conic import ConicProgram, ProgramBuilder
from .hull import TangentCut, dedupe
from .model import (Instance, ModelError, PairAmbiguity, Solution, dominant_branch, f_value,
                    g_value)

log = logging.getLogger(__name__)

INT_TOL = 1e-6
OBJ_CHECK_TOL = 1e-5
NONE = -1

__all__ = [
    "BuildOptions", "ConicProgram", "FractionalSolution", "PairVars", "VariableMap",
    "attach_cuts", "big_r", "build_misocp", "check_invariants", "dump_model",
    "extract_solution", "lift_point", "relax",
]


class FractionalSolution(ValueError):
    """Raised by ``extract_solution`` when a binary is not within tolerance of 0/1."""


@dataclass
class BuildOptions:
    prune_pairs: bool = True
    reduce_dominated: bool = True
    strengthen: bool = True


@dataclass(frozen=True)
class PairVars:
    """Indices of one pair's variables.  ``branch`` is None for the full
    disjunction; for a reduced pair it names the kept branch, the kept
    copies alias v / U, and the dropped ones (and s) are ``NONE`` / empty."""

    i: int
    j: int
    big_r: float
    x: int
    v: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    u: int
    u1: int
    u2: int
    s: int
    t1: int
    t2: int
    branch: Optional[str] = None


@dataclass
class VariableMap:
    inst: Instance
    y: np.ndarray
    pairs: dict[tuple[int, int], PairVars] = field(default_factory=dict)
    num_vars: int = 0

    @property
    def s_indices(self) -> np.ndarray:
        return np.array([p.s for p in self.pairs.values() if p.s != NONE], dtype=int)

    @property
    def binaries(self) -> np.ndarray:
        return np.concatenate([self.y, self.s_indices])

    def ranges(self) -> list[np.ndarray]:
        """All index groups; they are disjoint and cover 0..num_vars-1."""
        out = [self.y]
        for p in self.pairs.values():
            if p.branch is None:
                out += [np.array([p.x]), p.v, p.v1, p.v2,
                        np.array([p.u, p.u1, p.u2, p.s, p.t1, p.t2])]
            else:
                t = p.t1 if p.branch == "f" else p.t2
                out += [np.array([p.x]), p.v, np.array([p.u, t])]
        return out

    def flows(self, primal) -> np.ndarray:
        x = np.zeros((self.inst.n_sites, self.inst.n_facilities))
        for (i, j), p in self.pairs.items():
            x[i, j] = primal[p.x]
        return x


def big_r(inst: Instance, i: int, j: int) -> float:
    return float(min(inst.sites[i].demand, inst.facilities[j].capacity))


def _tri_factor(mat_sqrt: np.ndarray) -> np.ndarray:
    """Upper-triangular R with ||R v|| = ||mat_sqrt v|| for all v."""
    r = np.linalg.qr(mat_sqrt, mode="r")
    r[np.abs(r) < 1e-14] = 0.0
    return r


def _pair_list(inst: Instance, opts: BuildOptions):
    n = inst.n_facilities
    if opts.prune_pairs:
        items = [(ij, p) for ij, p in inst.ambiguity.items() if np.any(p.beta_hat != 0)]
    else:
        items = [((i, j), inst.ambiguity.get((i, j)) or PairAmbiguity.zero(n))
                 for i in range(inst.n_sites) for j in range(n)]
    return [(ij, p) for ij, p in items if big_r(inst, *ij) > 0]


def _add_branch(b: ProgramBuilder, pair: PairAmbiguity, which: str, u: int, v: np.ndarray) -> int:
    """U <= beta.v - coef * t,  t >= ||factor v||; returns t."""
    if which == "f":
        coef, fac = pair.ellipsoid_radius, _tri_factor(pair.a_inv_sqrt)
    else:
        coef, fac = pair.sqrt_gamma, _tri_factor(pair.cov_sqrt)
    t = b.add_var(0.0)
    b.add_row(np.r_[u, v, t], np.r_[1.0, -pair.beta_hat, coef], "<", 0.0)
    b.add_soc(t, v, fac)
    return t


def build_misocp(inst: Instance, opts: Optional[BuildOptions] = None) -> tuple[ConicProgram, VariableMap]:
    opts = opts or BuildOptions()
    n = inst.n_facilities
    b = ProgramBuilder()
    y = b.add_vars(n, 0.0, 1.0, integer=True)
    vmap = VariableMap(inst, y)
    pairs = _pair_list(inst, opts)
    costs = inst.open_costs

    xs = {ij: b.add_var(0.0, big_r(inst, *ij)) for ij, _ in pairs}
    b.add_objective(y, inst.fixed_gains)
    b.add_row(y, costs, "<", inst.budget)

    for ij, pair in pairs:
        i, j = ij
        r = big_r(inst, i, j)
        x = xs[ij]
        branch = dominant_branch(pair) if opts.reduce_dominated else None
        u_max = max(0.0, float(np.maximum(pair.beta_hat, 0.0).sum()) * r)
        v = b.add_vars(n, 0.0)
        u = b.add_var(0.0, u_max)
        b.add_objective(u, 1.0)
        xcol = np.full(n, x)
        b.add_rows(np.c_[v, y], [1.0, -r], "<", 0.0)               # v_k <= R y_k
        b.add_rows(np.c_[v, xcol], [1.0, -1.0], "<", 0.0)          # v_k <= x
        b.add_rows(np.c_[v, xcol, y], [1.0, -1.0, -r], ">", -r)    # v_k >= x - R(1 - y_k)

        if branch == "f":
            t = _add_branch(b, pair, "f", u, v)
            pv = PairVars(i, j, r, x, v, v, np.zeros(0, int), u, u, NONE, NONE, t, NONE, "f")
        elif branch == "g":
            t = _add_branch(b, pair, "g", u, v)
            pv = PairVars(i, j, r, x, v, np.zeros(0, int), v, u, NONE, u, NONE, NONE, t, "g")
        else:
            v1, v2 = b.add_vars(n, 0.0), b.add_vars(n, 0.0)
            u1, u2 = b.add_var(0.0, u_max), b.add_var(0.0, u_max)
            s = b.add_var(0.0, 1.0, integer=True)
            scol = np.full(n, s)
            b.add_rows(np.c_[v, v1, v2], [1.0, -1.0, -1.0], "=", 0.0)    # v = v1 + v2
            b.add_rows(np.c_[v1, scol], [1.0, -r], "<", 0.0)             # v1 <= R s
            b.add_rows(np.c_[v2, scol], [1.0, r], "<", r)                # v2 <= R (1 - s)
            b.add_row([u, u1, u2], [1.0, -1.0, -1.0], "=", 0.0)
            t1 = _add_branch(b, pair, "f", u1, v1)
            t2 = _add_branch(b, pair, "g", u2, v2)
            pv = PairVars(i, j, r, x, v, v1, v2, u, u1, u2, s, t1, t2)
        vmap.pairs[ij] = pv

        if opts.strengthen:
            b.add_row([x, y[j]], [1.0, -r], "<", 0.0)
            b.add_row([v[j], x], [1.0, -1.0], "=", 0.0)
            b.add_row(np.r_[v, x], np.r_[costs, -inst.budget], "<", 0.0)

    for j in range(n):
        idx = [xs[ij] for ij, _ in pairs if ij[1] == j]
        b.add_row(np.r_[idx, y[j]], np.r_[np.ones(len(idx)), -inst.facilities[j].capacity], "<", 0.0)
    for i in range(inst.n_sites):
        mine = [vmap.pairs[ij] for ij, _ in pairs if ij[0] == i]
        if not mine:
            continue
        b.add_row([pv.x for pv in mine], 1.0, "<", inst.sites[i].demand)
        if not opts.strengthen:
            continue
        vv = np.array([pv.v for pv in mine]).T          # (n, pairs of site i)
        b.add_rows(np.c_[vv, y], np.r_[np.ones(len(mine)), -inst.sites[i].demand], "<", 0.0)

    prog = b.build()
    vmap.num_vars = prog.num_vars
    return prog, vmap


def attach_cuts(prog: ConicProgram, vmap: VariableMap, cuts, existing=()) -> ConicProgram:
    """Append ``U <= alpha.v + offset`` rows.  Cuts duplicating each other or
    one in ``existing`` (already attached) are dropped."""
    existing = list(existing)
    fresh = dedupe(existing + list(cuts))[len(dedupe(existing)):]
    rows, rhs = [], []
    for cut in fresh:
        pv = vmap.pairs.get(tuple(cut.pair))
        if pv is None:
            log.warning("cut on elided pair %s skipped", cut.pair)
            continue
        row = np.zeros(prog.num_vars)
        row[pv.u] = 1.0
        row[pv.v] = -np.asarray(cut.alpha, dtype=float)
        rows.append(row)
        rhs.append(cut.offset)
    if not rows:
        return prog
    return prog.add_rows(np.array(rows), ["<"] * len(rows), rhs)


def attached_cut_list(vmap: VariableMap, cuts, existing=()) -> list[TangentCut]:
    """The subset of ``cuts`` that ``attach_cuts`` would add."""
    existing = list(existing)
    fresh = dedupe(existing + list(cuts))[len(dedupe(existing)):]
    return [c for c in fresh if tuple(c.pair) in vmap.pairs]


def relax(prog: ConicProgram) -> ConicProgram:
    out = prog.copy()
    if out.integer_vars.size:
        k = out.integer_vars
        out.lo[k] = np.maximum(out.lo[k], 0.0)
        out.hi[k] = np.minimum(out.hi[k], 1.0)
        out.integer_vars = np.zeros(0, dtype=int)
    return out


def closed_form_objective(inst: Instance, y, x) -> float:
    """c.y + sum x_ij max(f, g)(y)^+ over pairs with flow."""
    y = np.asarray(y, dtype=float)
    total = float(inst.fixed_gains @ y)
    for (i, j), pair in inst.ambiguity.items():
        if x[i, j] > 0 and y[j] > 0.5:
            total += x[i, j] * max(f_value(pair, y), g_value(pair, y), 0.0)
    return total


def extract_solution(prog: ConicProgram, vmap: VariableMap, raw_primal) -> Solution:
    primal = np.asarray(raw_primal, dtype=float)
    binaries = vmap.binaries
    vals = primal[binaries]
    frac = np.abs(vals - np.round(vals))
    if np.any(frac > INT_TOL):
        k = int(np.argmax(frac))
        raise FractionalSolution(f"binary variable {binaries[k]} = {vals[k]:.6g} is fractional")
    y = np.round(primal[vmap.y])
    x = vmap.flows(primal)
    objective = prog.evaluate(primal)
    check = closed_form_objective(vmap.inst, y, x)
    ok = abs(check - objective) <= OBJ_CHECK_TOL * max(1.0, abs(check))
    if not ok:
        log.warning("objective %.8g disagrees with closed-form value %.8g", objective, check)
    return Solution(y=y, x=x, objective=objective, reevaluated=check, consistent=ok)


def lift_point(vmap: VariableMap, y, x, allowed=None) -> np.ndarray:
    """Full model vector for binary ``y`` and flows ``x`` with every auxiliary
    variable at its tight value.  Each pair uses its larger branch, or
    ``allowed[(i, j)]`` when given (ignored for reduced pairs)."""
    inst = vmap.inst
    y = np.asarray(y, dtype=float)
    out = np.zeros(vmap.num_vars)
    out[vmap.y] = y
    for ij, pv in vmap.pairs.items():
        pair = inst.ambiguity.get(ij) or PairAmbiguity.zero(inst.n_facilities)
        fy, gy = f_value(pair, y), g_value(pair, y)
        branch = pv.branch or (allowed or {}).get(ij) or ("f" if fy >= gy else "g")
        flow = float(x[ij]) if y[ij[1]] > 0.5 else 0.0
        v = flow * y
        util = max(fy if branch == "f" else gy, 0.0) * flow
        out[pv.x] = flow
        out[pv.v] = v
        out[pv.u] = util
        if branch == "f":
            out[pv.v1] = v
            out[pv.u1] = util
            out[pv.t1] = float(np.linalg.norm(pair.a_inv_sqrt @ v))
        else:
            out[pv.v2] = v
            out[pv.u2] = util
            out[pv.t2] = float(np.linalg.norm(pair.cov_sqrt @ v))
        if pv.s != NONE:
            out[pv.s] = 1.0 if branch == "f" else 0.0
    return out


def check_invariants(vmap: VariableMap, primal) -> dict[str, float]:
    """Largest violations of the disjunction and the product linearization at
    an integral point.

    disjunction: with s = 1 the g-copy (v2, U2) vanishes and U <= f(v); with
    s = 0 symmetrically.  Reduced pairs only check U <= branch(v).
    linearization: |v_k - x y_k|.
    """
    inst = vmap.inst
    primal = np.asarray(primal, dtype=float)
    y = np.round(primal[vmap.y])
    disj = lin = 0.0
    for ij, pv in vmap.pairs.items():
        pair = inst.ambiguity.get(ij) or PairAmbiguity.zero(inst.n_facilities)
        u, v = primal[pv.u], primal[pv.v]
        if pv.branch is not None:
            which, off = pv.branch, 0.0
        elif primal[pv.s] > 0.5:
            which = "f"
            off = max(np.max(np.abs(primal[pv.v2]), initial=0.0), abs(primal[pv.u2]))
        else:
            which = "g"
            off = max(np.max(np.abs(primal[pv.v1]), initial=0.0), abs(primal[pv.u1]))
        over = u - (f_value(pair, v) if which == "f" else g_value(pair, v))
        disj = max(disj, off, over)
        lin = max(lin, float(np.max(np.abs(v - primal[pv.x] * y))))
    return {"disjunction": disj, "linearization": lin}


def dump_model(prog: ConicProgram, path: Union[str, Path]) -> None:
    """Write the program as plain text.

    Layout::

        rfl-model 1
        vars <n> rows <m> socs <k> ints <p>
        obj <constant> idx:coef ...
        bounds idx lo hi              (one line per variable)
        int idx ...
        <sense> idx:coef ... <rhs>    (sense is <, = or >)
        soc <head> | idx:coef ... | idx:coef ...   (one group per tail row)
    """
    lines = ["rfl-model 1",
             f"vars {prog.num_vars} rows {prog.num_rows} socs {len(prog.socs)} "
             f"ints {prog.integer_vars.size}"]

    def terms(idx, vals):
        return " ".join(f"{int(k)}:{v:.17g}" for k, v in zip(idx, vals))

    nz = np.flatnonzero(prog.objective)
    lines.append(f"obj {prog.constant:.17g} {terms(nz, prog.objective[nz])}".rstrip())
    for k in range(prog.num_vars):
        lines.append(f"bounds {k} {prog.lo[k]:.17g} {prog.hi[k]:.17g}")
    lines.append("int " + " ".join(str(int(k)) for k in prog.integer_vars))
    rows = prog.rows.tocsr()
    for r in range(prog.num_rows):
        lo, hi = rows.indptr[r], rows.indptr[r + 1]
        lines.append(f"{prog.sense[r]} {terms(rows.indices[lo:hi], rows.data[lo:hi])} {prog.rhs[r]:.17g}")
    for blk in prog.socs:
        tail = blk.tail.tocsr()
        groups = [terms(tail.indices[tail.indptr[r]:tail.indptr[r + 1]],
                        tail.data[tail.indptr[r]:tail.indptr[r + 1]]) for r in range(tail.shape[0])]
        lines.append(f"soc {blk.head} | " + " | ".join(groups))
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path: Union[str, Path]) -> ConicProgram:
    """Inverse of ``dump_model``."""
    import scipy.sparse as sp

    from .conic import SocBlock

    def parse_terms(text):
        idx, vals = [], []
        for tok in text.split():
            k, v = tok.split(":")
            idx.append(int(k))
            vals.append(float(v))
        return idx, vals

    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "rfl-model 1":
        raise ModelError("not an rfl model file")
    head = lines[1].split()
    n = int(head[1])
    obj_tok = lines[2].split(maxsplit=2)
    constant = float(obj_tok[1])
    objective = np.zeros(n)
    if len(obj_tok) > 2:
        idx, vals = parse_terms(obj_tok[2])
        objective[idx] = vals
    lo, hi = np.zeros(n), np.zeros(n)
    ints: list[int] = []
    ri, ci, data, sense, rhs, socs = [], [], [], [], [], []
    for line in lines[3:]:
        tag, _, rest = line.partition(" ")
        if tag == "bounds":
            k, a, b = rest.split()
            lo[int(k)], hi[int(k)] = float(a), float(b)
        elif tag == "int":
            ints = [int(t) for t in rest.split()]
        elif tag in ("<", "=", ">"):
            parts = rest.split()
            idx, vals = parse_terms(" ".join(parts[:-1]))
            r = len(rhs)
            ri += [r] * len(idx)
            ci += idx
            data += vals
            sense.append(tag)
            rhs.append(float(parts[-1]))
        elif tag == "soc":
            groups = rest.split("|")
            h = int(groups[0])
            tr, tc, tv = [], [], []
            for r, g in enumerate(groups[1:]):
                idx, vals = parse_terms(g)
                tr += [r] * len(idx)
                tc += idx
                tv += vals
            socs.append(SocBlock(h, sp.csr_matrix((tv, (tr, tc)), shape=(len(groups) - 1, n))))
    rows = sp.csr_matrix((data, (ri, ci)), shape=(len(rhs), n))
    return ConicProgram(n, objective, rows, np.array(sense, dtype="<U1"), np.array(rhs), socs,
                        lo, hi, np.array(ints, dtype=int), constant)
