"""Continuous conic programs (linear rows + second-order cones) and solvers.

``solve_conic`` runs Clarabel, a homogeneous self-dual interior point
method with Nesterov-Todd scaling.  ``solve_lp_fast`` runs HiGHS through
scipy for pure LPs.  Both return a ``ConicResult`` and never raise on a
well-formed program.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import scipy.sparse as sp


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITER_LIMIT = "iter_limit"
    NUMERICAL_ERROR = "numerical_error"

    def __str__(self):
        return self.value


LE, EQ, GE = "<", "=", ">"


@dataclass(frozen=True)
class SocBlock:
    """``||tail @ x|| <= x[head]``; ``tail`` is a sparse (k, n) matrix."""

    head: int
    tail: sp.csr_matrix


@dataclass
class ConicProgram:
    """Maximize ``objective @ x + constant`` subject to linear rows, SOC blocks
    and variable bounds.  ``integer_vars`` marks binaries for branch-and-bound;
    continuous solvers reject programs that still carry them."""

    num_vars: int
    objective: np.ndarray
    rows: sp.csr_matrix
    sense: np.ndarray
    rhs: np.ndarray
    socs: list[SocBlock] = field(default_factory=list)
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    integer_vars: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    constant: float = 0.0

    def __post_init__(self):
        n = self.num_vars
        self.objective = np.asarray(self.objective, dtype=float).reshape(n)
        self.rows = sp.csr_matrix(self.rows, shape=(len(self.rhs), n)) if self.rows is not None \
            else sp.csr_matrix((0, n))
        self.sense = np.asarray(self.sense, dtype="<U1").reshape(-1)
        self.rhs = np.asarray(self.rhs, dtype=float).reshape(-1)
        self.lo = np.full(n, -np.inf) if self.lo is None else np.asarray(self.lo, dtype=float)
        self.hi = np.full(n, np.inf) if self.hi is None else np.asarray(self.hi, dtype=float)
        self.integer_vars = np.asarray(self.integer_vars, dtype=int)
        if self.rows.shape[0] != self.rhs.size or self.sense.size != self.rhs.size:
            raise ValueError("rows, sense and rhs disagree in length")
        if not set(np.unique(self.sense)) <= {LE, EQ, GE}:
            raise ValueError("row sense must be one of '<', '=', '>'")
        for blk in self.socs:
            if not 0 <= blk.head < n or blk.tail.shape[1] != n:
                raise ValueError("SOC block index out of range")

    @property
    def num_rows(self) -> int:
        return self.rhs.size

    def copy(self) -> "ConicProgram":
        return replace(
            self, objective=self.objective.copy(), rows=self.rows.copy(),
            sense=self.sense.copy(), rhs=self.rhs.copy(), socs=list(self.socs),
            lo=self.lo.copy(), hi=self.hi.copy(), integer_vars=self.integer_vars.copy(),
        )

    def add_rows(self, rows, sense, rhs) -> "ConicProgram":
        out = self.copy()
        out.rows = sp.vstack([self.rows, sp.csr_matrix(rows, shape=(len(rhs), self.num_vars))]).tocsr()
        out.sense = np.concatenate([self.sense, np.asarray(sense, dtype="<U1")])
        out.rhs = np.concatenate([self.rhs, np.asarray(rhs, dtype=float)])
        return out

    def evaluate(self, x) -> float:
        return float(self.objective @ x + self.constant)

    def max_violation(self, x) -> float:
        """Largest absolute violation of rows, bounds and cones at ``x``."""
        x = np.asarray(x, dtype=float)
        viol = [0.0]
        if self.num_rows:
            ax = self.rows @ x - self.rhs
            viol.append(float(np.max(np.where(self.sense == LE, ax, 0.0), initial=0.0)))
            viol.append(float(np.max(np.where(self.sense == GE, -ax, 0.0), initial=0.0)))
            viol.append(float(np.max(np.where(self.sense == EQ, np.abs(ax), 0.0), initial=0.0)))
        viol.append(float(np.max(self.lo - x, initial=0.0)))
        viol.append(float(np.max(x - self.hi, initial=0.0)))
        for blk in self.socs:
            viol.append(float(np.linalg.norm(blk.tail @ x) - x[blk.head]))
        return max(viol)


DEFAULT_MAX_ITERS = 200


def env_max_iters() -> int:
    """Iteration cap from ``RFL_CONIC_MAX_ITERS`` (default 200); rejects junk."""
    raw = os.environ.get("RFL_CONIC_MAX_ITERS")
    if raw is None or raw.strip() == "":
        return DEFAULT_MAX_ITERS
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value < 1:
        raise ValueError(f"RFL_CONIC_MAX_ITERS must be a positive integer, got {raw!r}")
    return value


@dataclass
class Settings:
    tol_feas: float = 1e-7
    tol_gap: float = 1e-7
    max_iter: int = field(default_factory=env_max_iters)
    time_limit: float = float("inf")
    refine: bool = True  # iterative refinement of KKT solves; off is ~1.5x faster on big models


@dataclass
class ConicResult:
    status: Status
    primal: np.ndarray
    dual: np.ndarray
    objective: float
    dual_objective: float = float("nan")
    iterations: int = 0
    residuals: tuple[float, float, float] = (float("nan"),) * 3

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL


def _clarabel():
    import clarabel

    return clarabel


class ConicWorkspace:
    """Clarabel problem data for one program structure.

    Variable bounds live in the right-hand side so that branch-and-bound can
    re-solve with new bounds through ``solve(lo, hi)`` without re-assembling
    the constraint matrix.
    """

    def __init__(self, prog: ConicProgram, settings: Optional[Settings] = None):
        if prog.integer_vars.size:
            raise ValueError("continuous solver called on a program with integer variables")
        self.prog = prog
        self.settings = settings or Settings()
        n = prog.num_vars
        blocks, rhs, cones = [], [], []
        cl = _clarabel()

        eq = prog.sense == EQ
        if eq.any():
            blocks.append(prog.rows[eq])
            rhs.append(prog.rhs[eq])
            cones.append(cl.ZeroConeT(int(eq.sum())))
        le, ge = prog.sense == LE, prog.sense == GE
        n_lin = int(le.sum() + ge.sum())
        if n_lin:
            blocks.append(prog.rows[le])
            rhs.append(prog.rhs[le])
            blocks.append(-prog.rows[ge])
            rhs.append(-prog.rhs[ge])
        # bound rows: one per finite side, values filled per solve
        self._lo_idx = np.flatnonzero(np.isfinite(prog.lo))
        self._hi_idx = np.flatnonzero(np.isfinite(prog.hi))
        eye = sp.identity(n, format="csr")
        blocks.append(-eye[self._lo_idx])
        blocks.append(eye[self._hi_idx])
        n_nonneg = n_lin + self._lo_idx.size + self._hi_idx.size
        if n_nonneg:
            cones.append(cl.NonnegativeConeT(n_nonneg))
        self._bound_offset = sum(r.size for r in rhs)
        rhs.append(np.zeros(self._lo_idx.size + self._hi_idx.size))
        for blk in prog.socs:
            head = sp.csr_matrix(([-1.0], ([0], [blk.head])), shape=(1, n))
            blocks.append(head)
            blocks.append(-blk.tail)
            rhs.append(np.zeros(1 + blk.tail.shape[0]))
            cones.append(cl.SecondOrderConeT(1 + blk.tail.shape[0]))
        self._a = sp.vstack(blocks).tocsc() if blocks else sp.csc_matrix((0, n))
        self._b = np.concatenate(rhs) if rhs else np.zeros(0)
        self._cones = cones

    def _settings(self, tol_feas: Optional[float] = None, refine: Optional[bool] = None):
        cl = _clarabel()
        s = cl.DefaultSettings()
        s.verbose = False
        tol = tol_feas or self.settings.tol_feas
        s.tol_feas = tol
        s.tol_gap_abs = self.settings.tol_gap
        s.tol_gap_rel = self.settings.tol_gap
        s.max_iter = self.settings.max_iter
        s.presolve_enable = False
        s.iterative_refinement_enable = self.settings.refine if refine is None else refine
        s.max_threads = 1
        if np.isfinite(self.settings.time_limit):
            s.time_limit = self.settings.time_limit
        return s

    def solve(self, lo=None, hi=None, tol_feas: Optional[float] = None,
              refine: Optional[bool] = None) -> ConicResult:
        prog = self.prog
        lo = prog.lo if lo is None else np.asarray(lo, dtype=float)
        hi = prog.hi if hi is None else np.asarray(hi, dtype=float)
        if np.any(lo > hi + 1e-12):
            n = prog.num_vars
            return ConicResult(Status.INFEASIBLE, np.full(n, np.nan), np.zeros(0), -np.inf)
        b = self._b.copy()
        k = self._bound_offset
        b[k:k + self._lo_idx.size] = -lo[self._lo_idx]
        k += self._lo_idx.size
        b[k:k + self._hi_idx.size] = hi[self._hi_idx]
        return self._run(b, tol_feas, refine)

    def _run(self, b: np.ndarray, tol_feas: Optional[float], refine: Optional[bool] = None) -> ConicResult:
        cl = _clarabel()
        prog = self.prog
        n = prog.num_vars
        p = sp.csc_matrix((n, n))
        q = -prog.objective
        settings = self._settings(tol_feas, refine)
        solver = cl.DefaultSolver(p, q, self._a, b, self._cones, settings)
        sol = solver.solve()
        status = _map_status(sol.status)
        x = np.asarray(sol.x, dtype=float)
        z = np.asarray(sol.z, dtype=float)
        info = solver.get_info()
        residuals = (float(info.res_primal), float(info.res_dual), float(info.gap_rel))
        if status == Status.OPTIMAL:
            obj = prog.evaluate(x)
            dual_obj = float(b @ z) + prog.constant
        elif status == Status.INFEASIBLE:
            obj, dual_obj = -np.inf, -np.inf
        elif status == Status.UNBOUNDED:
            obj, dual_obj = np.inf, np.inf
        else:
            obj = dual_obj = float("nan")
        return ConicResult(status, x, z, obj, dual_obj, int(sol.iterations), residuals)


def _map_status(status) -> Status:
    name = str(status).split(".")[-1]
    if name in ("Solved", "AlmostSolved"):
        return Status.OPTIMAL
    if name in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return Status.INFEASIBLE
    if name in ("DualInfeasible", "AlmostDualInfeasible"):
        return Status.UNBOUNDED
    if name in ("MaxIterations", "MaxTime"):
        return Status.ITER_LIMIT
    return Status.NUMERICAL_ERROR


def solve_conic(prog: ConicProgram, settings: Optional[Settings] = None) -> ConicResult:
    """Solve a continuous conic program (maximization)."""
    return ConicWorkspace(prog, settings).solve()


@dataclass
class LinearProgram:
    """max objective @ x  s.t.  a_ub x <= b_ub,  a_eq x = b_eq,  lo <= x <= hi."""

    objective: np.ndarray
    a_ub: Optional[sp.spmatrix] = None
    b_ub: Optional[np.ndarray] = None
    a_eq: Optional[sp.spmatrix] = None
    b_eq: Optional[np.ndarray] = None
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None

    @classmethod
    def from_conic(cls, prog: ConicProgram) -> "LinearProgram":
        if prog.socs:
            raise ValueError("program has cone blocks; not an LP")
        le, ge, eq = prog.sense == LE, prog.sense == GE, prog.sense == EQ
        a_ub = sp.vstack([prog.rows[le], -prog.rows[ge]]).tocsr()
        b_ub = np.concatenate([prog.rhs[le], -prog.rhs[ge]])
        return cls(prog.objective, a_ub, b_ub, prog.rows[eq], prog.rhs[eq], prog.lo, prog.hi)


def solve_lp_fast(lp: LinearProgram | ConicProgram, settings: Optional[Settings] = None,
                  constant: float = 0.0) -> ConicResult:
    """Solve an LP with HiGHS dual simplex (maximization)."""
    from scipy.optimize import linprog

    if isinstance(lp, ConicProgram):
        constant = lp.constant
        lp = LinearProgram.from_conic(lp)
    c = np.asarray(lp.objective, dtype=float)
    n = c.size
    lo = np.zeros(n) if lp.lo is None else np.asarray(lp.lo, dtype=float)
    hi = np.full(n, np.inf) if lp.hi is None else np.asarray(lp.hi, dtype=float)
    bounds = np.column_stack([np.where(np.isfinite(lo), lo, -np.inf),
                              np.where(np.isfinite(hi), hi, np.inf)])
    has_ub = lp.a_ub is not None and lp.a_ub.shape[0] > 0
    has_eq = lp.a_eq is not None and lp.a_eq.shape[0] > 0
    res = linprog(
        -c,
        A_ub=lp.a_ub if has_ub else None,
        b_ub=lp.b_ub if has_ub else None,
        A_eq=lp.a_eq if has_eq else None,
        b_eq=lp.b_eq if has_eq else None,
        bounds=bounds,
        method="highs-ds",
        options={"primal_feasibility_tolerance": (settings or Settings()).tol_feas,
                 "dual_feasibility_tolerance": (settings or Settings()).tol_feas},
    )
    if res.status == 0:
        x = np.asarray(res.x, dtype=float)
        # scipy's marginals are sensitivities of the min objective; negate for max sense
        duals = []
        dual_obj = constant
        if has_ub:
            lam = -np.asarray(res.ineqlin.marginals)
            duals.append(lam)
            dual_obj += float(np.asarray(lp.b_ub) @ lam)
        if has_eq:
            mu = -np.asarray(res.eqlin.marginals)
            duals.append(mu)
            dual_obj += float(np.asarray(lp.b_eq) @ mu)
        lo_m = -np.asarray(res.lower.marginals)
        hi_m = -np.asarray(res.upper.marginals)
        on_lo, on_hi = lo_m != 0, hi_m != 0
        dual_obj += float(lo_m[on_lo] @ bounds[on_lo, 0]) + float(hi_m[on_hi] @ bounds[on_hi, 1])
        objective = float(c @ x) + constant
        gap = abs(dual_obj - objective) / max(1.0, abs(objective))
        return ConicResult(Status.OPTIMAL, x, np.concatenate(duals) if duals else np.zeros(0),
                           objective, dual_obj, int(res.nit), (0.0, 0.0, gap))
    status = {1: Status.ITER_LIMIT, 2: Status.INFEASIBLE, 3: Status.UNBOUNDED}.get(
        res.status, Status.NUMERICAL_ERROR)
    obj = {Status.INFEASIBLE: -np.inf, Status.UNBOUNDED: np.inf}.get(status, float("nan"))
    return ConicResult(status, np.full(n, np.nan), np.zeros(0), obj, obj, int(res.nit or 0))


class ProgramBuilder:
    """Incremental assembly of a ``ConicProgram`` from COO triplets."""

    def __init__(self):
        self.n = 0
        self._lo: list[np.ndarray] = []
        self._hi: list[np.ndarray] = []
        self._int: list[np.ndarray] = []
        self._obj: dict[int, float] = {}
        self._ri: list[np.ndarray] = []
        self._ci: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self._sense: list[str] = []
        self._rhs: list[float] = []
        self._socs: list[tuple[int, np.ndarray, np.ndarray, np.ndarray, int]] = []
        self.constant = 0.0

    def add_vars(self, count: int, lo=0.0, hi=np.inf, integer: bool = False) -> np.ndarray:
        idx = np.arange(self.n, self.n + count)
        self.n += count
        self._lo.append(np.broadcast_to(np.asarray(lo, dtype=float), (count,)).copy())
        self._hi.append(np.broadcast_to(np.asarray(hi, dtype=float), (count,)).copy())
        if integer:
            self._int.append(idx)
        return idx

    def add_var(self, lo=0.0, hi=np.inf, integer: bool = False) -> int:
        return int(self.add_vars(1, lo, hi, integer)[0])

    def add_objective(self, idx, coef) -> None:
        for k, c in zip(np.atleast_1d(idx), np.broadcast_to(coef, np.shape(np.atleast_1d(idx)))):
            self._obj[int(k)] = self._obj.get(int(k), 0.0) + float(c)

    def add_row(self, idx, coef, sense: str, rhs: float) -> int:
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape)
        r = len(self._rhs)
        self._ri.append(np.full(idx.size, r))
        self._ci.append(idx)
        self._vals.append(np.array(coef))
        self._sense.append(sense)
        self._rhs.append(float(rhs))
        return r

    def add_rows(self, idx, coef, sense: str, rhs) -> None:
        """Add m rows at once; ``idx`` and ``coef`` have shape (m, k)."""
        idx = np.atleast_2d(np.asarray(idx, dtype=int))
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape)
        m = idx.shape[0]
        r0 = len(self._rhs)
        self._ri.append(np.repeat(np.arange(r0, r0 + m), idx.shape[1]))
        self._ci.append(idx.reshape(-1))
        self._vals.append(np.array(coef).reshape(-1))
        self._sense.extend([sense] * m)
        self._rhs.extend(np.broadcast_to(np.asarray(rhs, dtype=float), (m,)).tolist())

    def add_soc(self, head: int, idx, mat) -> None:
        """``||mat @ x[idx]|| <= x[head]``."""
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        rows, cols = np.nonzero(mat)
        self._socs.append((head, rows, np.asarray(idx)[cols], mat[rows, cols], mat.shape[0]))

    def build(self) -> ConicProgram:
        n = self.n
        if self._rhs:
            rows = sp.csr_matrix(
                (np.concatenate(self._vals), (np.concatenate(self._ri), np.concatenate(self._ci))),
                shape=(len(self._rhs), n))
        else:
            rows = sp.csr_matrix((0, n))
        obj = np.zeros(n)
        for k, c in self._obj.items():
            obj[k] = c
        socs = [SocBlock(head, sp.csr_matrix((v, (r, c)), shape=(k, n)))
                for head, r, c, v, k in self._socs]
        return ConicProgram(
            num_vars=n, objective=obj, rows=rows, sense=np.array(self._sense, dtype="<U1"),
            rhs=np.array(self._rhs), socs=socs,
            lo=np.concatenate(self._lo) if self._lo else np.zeros(0),
            hi=np.concatenate(self._hi) if self._hi else np.zeros(0),
            integer_vars=np.concatenate(self._int) if self._int else np.zeros(0, dtype=int),
            constant=self.constant,
        )
