"""Valid inequalities for conv{(U, v): 0 <= U <= max(f(v), g(v)), v >= 0}.

Both f and g are positively homogeneous, so the set is a cone and every
tangent inequality passes through the origin.  Gradient cuts come from
tangent planes of one branch and are kept only if they also dominate the
other branch; projection cuts come from the Euclidean projection of
(beta_hat.v0, v0) onto the Minkowski sum of the two branch cones.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .conic import ProgramBuilder, Settings, Status, solve_conic
from .model import PairAmbiguity, f_value, g_value

VALIDATION_TOL = 1e-7
PROJECTION_TOL = 1e-7
DEGENERATE_TOL = 1e-9
SUBPROBLEM_TOL = 1e-10


class CutError(RuntimeError):
    pass


class CutFamily(str, Enum):
    GRAD_F = "G1"
    GRAD_G = "G2"
    PROJECT = "P"

    def __str__(self):
        return self.value


@dataclass(frozen=True, eq=False)
class TangentCut:
    """``U <= alpha @ v + offset`` on the (U, v) block of one pair."""

    pair: tuple[int, int]
    alpha: np.ndarray
    offset: float
    family: CutFamily
    source_point: tuple[float, tuple[float, ...]] = field(default=(0.0, ()))

    def rhs(self, v) -> float:
        return float(self.alpha @ np.asarray(v, dtype=float) + self.offset)

    def violation(self, u: float, v) -> float:
        return u - self.rhs(v)

    def key(self) -> tuple:
        src = hashlib.sha1(np.asarray(self.source_point[1], dtype=float).tobytes()).hexdigest()
        return (self.pair, self.family.value, src)

    def to_json(self) -> dict:
        return {"pair": list(self.pair), "alpha": self.alpha.tolist(), "offset": self.offset,
                "family": self.family.value}

    @classmethod
    def from_json(cls, obj: dict) -> "TangentCut":
        return cls(tuple(obj["pair"]), np.asarray(obj["alpha"], dtype=float), float(obj["offset"]),
                   CutFamily(obj["family"]))


@dataclass
class ProjectionResult:
    u_star: float
    v_star: np.ndarray
    decomposition: tuple[float, float, np.ndarray, np.ndarray]
    distance: float


def _branch(pair: PairAmbiguity, which: str) -> tuple[float, np.ndarray]:
    if which == "f":
        return pair.ellipsoid_radius, pair.a_inv_sqrt
    return pair.sqrt_gamma, pair.cov_sqrt


def _nonzero_source(v0) -> np.ndarray:
    v0 = np.asarray(v0, dtype=float).reshape(-1)
    if np.any(v0 < -1e-12):
        raise ValueError("source point must be nonnegative")
    if not np.any(v0 > 0):
        raise ValueError("gradient cuts are undefined at v = 0")
    return np.maximum(v0, 0.0)


def _gradient(pair: PairAmbiguity, which: str, v0: np.ndarray) -> np.ndarray:
    coef, mat = _branch(pair, which)
    w = mat @ v0
    nw = float(np.linalg.norm(w))
    if coef == 0.0 or nw == 0.0:
        return pair.beta_hat.copy()
    return pair.beta_hat - coef * (mat.T @ w) / nw


def gcut_f(pair: PairAmbiguity, v0, ij=(0, 0)) -> TangentCut:
    """Tangent plane of the f-branch at v0 (offset 0 by Euler's identity)."""
    v0 = _nonzero_source(v0)
    return TangentCut(tuple(ij), _gradient(pair, "f", v0), 0.0, CutFamily.GRAD_F,
                      (f_value(pair, v0), tuple(v0)))


def gcut_g(pair: PairAmbiguity, v0, ij=(0, 0)) -> TangentCut:
    v0 = _nonzero_source(v0)
    return TangentCut(tuple(ij), _gradient(pair, "g", v0), 0.0, CutFamily.GRAD_G,
                      (g_value(pair, v0), tuple(v0)))


def branch_slack(pair: PairAmbiguity, alpha: np.ndarray, which: str) -> Optional[float]:
    """min of alpha.v - U over {v >= 0, sum(v) = 1, 0 <= U <= branch(v)}.

    Returns +inf when the branch is negative on the whole simplex (its cone
    is the origin only) and None when the solver fails.
    """
    n = pair.dim
    coef, mat = _branch(pair, which)
    b = ProgramBuilder()
    v = b.add_vars(n)
    u = b.add_var()
    b.add_row(v, np.ones(n), "=", 1.0)
    b.add_objective(u, 1.0)
    b.add_objective(v, -np.asarray(alpha, dtype=float))
    if coef > 0.0:
        t = b.add_var()
        b.add_row(np.r_[u, v, t], np.r_[1.0, -pair.beta_hat, coef], "<", 0.0)
        b.add_soc(t, v, mat)
    else:
        b.add_row(np.r_[u, v], np.r_[1.0, -pair.beta_hat], "<", 0.0)
    res = solve_conic(b.build(), Settings(tol_feas=SUBPROBLEM_TOL, tol_gap=SUBPROBLEM_TOL))
    if res.status == Status.INFEASIBLE:
        return math.inf
    if not res.ok:
        return None
    return -res.objective


def validate_cut(pair: PairAmbiguity, cut: TangentCut, tol: float = VALIDATION_TOL) -> bool:
    """True iff the cut holds on both branch cones (hence on their hull)."""
    if cut.offset < -tol:
        return False
    order = ("g", "f") if cut.family == CutFamily.GRAD_F else ("f", "g")
    for which in order:
        slack = branch_slack(pair, cut.alpha, which)
        if slack is None or slack < -tol:
            return False
    return True


def project_to_hull(pair: PairAmbiguity, u0: float, v0, ij=(0, 0)) -> ProjectionResult:
    """Closest point of the hull to (u0, v0) via the Minkowski decomposition."""
    v0 = np.asarray(v0, dtype=float).reshape(-1)
    if v0.size != pair.dim or not np.all(np.isfinite(v0)) or not math.isfinite(u0):
        raise ValueError("source point must be finite and match the pair dimension")
    n = pair.dim
    b = ProgramBuilder()
    v1, v2 = b.add_vars(n), b.add_vars(n)
    u1, u2 = b.add_var(), b.add_var()
    r = b.add_var()
    for vk, uk, which in ((v1, u1, "f"), (v2, u2, "g")):
        coef, mat = _branch(pair, which)
        if coef > 0.0:
            t = b.add_var()
            b.add_row(np.r_[uk, vk, t], np.r_[1.0, -pair.beta_hat, coef], "<", 0.0)
            b.add_soc(t, vk, mat)
        else:
            b.add_row(np.r_[uk, vk], np.r_[1.0, -pair.beta_hat], "<", 0.0)
    # residual e = (u0 - u1 - u2, v0 - v1 - v2), ||e|| <= r
    e = b.add_vars(n + 1, lo=-np.inf)
    b.add_row(np.r_[e[0], u1, u2], [1.0, 1.0, 1.0], "=", u0)
    for k in range(n):
        b.add_row([e[k + 1], v1[k], v2[k]], [1.0, 1.0, 1.0], "=", v0[k])
    b.add_soc(r, e, np.eye(n + 1))
    b.add_objective(r, -1.0)
    res = solve_conic(b.build(), Settings(tol_feas=SUBPROBLEM_TOL, tol_gap=SUBPROBLEM_TOL))
    if not res.ok:
        raise CutError(f"projection subproblem failed for pair {tuple(ij)}: {res.status}")
    x = res.primal
    uu1, uu2 = max(x[u1], 0.0), max(x[u2], 0.0)
    vv1, vv2 = np.maximum(x[v1], 0.0), np.maximum(x[v2], 0.0)
    u_star, v_star = uu1 + uu2, vv1 + vv2
    dist = float(math.sqrt((u0 - u_star) ** 2 + np.sum((v0 - v_star) ** 2)))
    return ProjectionResult(u_star, v_star, (uu1, uu2, vv1, vv2), dist)


def pcut(pair: PairAmbiguity, v0, ij=(0, 0)) -> Optional[TangentCut]:
    """Separating cut for (beta_hat.v0, v0), or None if that point is in the hull."""
    v0 = _nonzero_source(v0)
    scale = float(v0.sum())
    vn = v0 / scale
    u0 = float(pair.beta_hat @ vn)
    proj = project_to_hull(pair, u0, vn, ij)
    if proj.distance <= PROJECTION_TOL:
        return None
    du = u0 - proj.u_star
    if du <= DEGENERATE_TOL:
        return None
    # The hull is a cone, so the plane through the projection contains the
    # origin.  The projected point is only accurate to ~sqrt(solver tol); the
    # exact min-slack over the simplex then shifts alpha onto the hull.
    alpha = -(vn - proj.v_star) / du
    alpha = tangent_lift(pair, alpha)
    if alpha is None or u0 - float(alpha @ vn) <= 1e-8:
        return None
    return TangentCut(tuple(ij), alpha, 0.0, CutFamily.PROJECT, (u0 * scale, tuple(v0)))


def tangent_lift(pair: PairAmbiguity, alpha: np.ndarray) -> Optional[np.ndarray]:
    """Shift a homogeneous cut by a multiple of 1 so it touches the hull."""
    slacks = [branch_slack(pair, alpha, which) for which in ("f", "g")]
    if any(s is None for s in slacks):
        return None
    s = min(slacks)
    if not math.isfinite(s):
        return None
    return alpha - s


def max_branch(pair: PairAmbiguity, v) -> float:
    return max(f_value(pair, v), g_value(pair, v))


def upper_envelope_2d(pair: PairAmbiguity, grid_n: int) -> tuple[np.ndarray, np.ndarray]:
    """Vertices (t, h) of the concave envelope of h(t) = max(f, g)(t, 1 - t) over
    grid points where h >= 0."""
    if pair.dim != 2:
        raise ValueError("brute-force hull needs |F| = 2")
    if not 1 <= grid_n <= 2000:
        raise ValueError("grid_n must be in [1, 2000]")
    ts = np.linspace(0.0, 1.0, grid_n + 1)
    hs = np.array([max_branch(pair, (t, 1.0 - t)) for t in ts])
    keep = hs >= 0.0
    pts = list(zip(ts[keep], hs[keep]))
    hull: list[tuple[float, float]] = []
    for p in pts:  # monotone chain, upper half
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) >= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    arr = np.array(hull) if hull else np.zeros((0, 2))
    return arr[:, 0], arr[:, 1]


def brute_force_hull_2d(pair: PairAmbiguity, grid_n: int = 1000, ij=(0, 0)) -> list[TangentCut]:
    """Facets of the sampled hull as homogeneous cuts on (v1, v2)."""
    ts, hs = upper_envelope_2d(pair, grid_n)
    cuts = []
    for k in range(len(ts) - 1):
        slope = (hs[k + 1] - hs[k]) / (ts[k + 1] - ts[k])
        alpha = np.array([hs[k] + slope * (1.0 - ts[k]), hs[k] - slope * ts[k]])
        cuts.append(TangentCut(tuple(ij), alpha, 0.0, CutFamily.PROJECT,
                               (float(hs[k]), (float(ts[k]), float(1.0 - ts[k])))))
    return dedupe(cuts)  # collinear samples can repeat a facet


def dedupe(cuts, tol: float = 1e-9) -> list[TangentCut]:
    """Drop cuts whose (pair, alpha, offset) repeats an earlier one within tol."""
    out: list[TangentCut] = []
    seen: dict[tuple[int, int], list[TangentCut]] = {}
    for cut in cuts:
        prev = seen.setdefault(cut.pair, [])
        if any(np.max(np.abs(c.alpha - cut.alpha)) <= tol and abs(c.offset - cut.offset) <= tol
               for c in prev):
            continue
        prev.append(cut)
        out.append(cut)
    return out


def dump_cuts(cuts, path) -> None:
    with open(path, "w") as fh:
        json.dump([c.to_json() for c in cuts], fh, indent=1)
