"""Domain model, closed-form worst-case utilities and the fixed-y oracle."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

PD_EIG_MIN = 1e-8
PSD_EIG_MIN = -1e-10
SQRT_EIG_CLAMP = 1e-12
FLOW_TOL = 1e-7
ENUM_LIMIT = 10**6


class ModelError(ValueError):
    """Invalid instance data or an infeasible request."""


def _sym_sqrt(mat: np.ndarray, inverse: bool = False) -> np.ndarray:
    w, q = np.linalg.eigh(mat)
    if inverse:
        d = 1.0 / np.sqrt(w)
    else:
        d = np.sqrt(np.where(w < SQRT_EIG_CLAMP, 0.0, w))
    return (q * d) @ q.T


def _readonly(arr) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Site:
    id: int
    coord: tuple[float, float]
    demand: float

    def __post_init__(self):
        if self.demand < 0:
            raise ModelError(f"site {self.id}: negative demand {self.demand}")


@dataclass(frozen=True)
class Facility:
    id: int
    coord: tuple[float, float]
    capacity: float
    open_cost: float = 1.0

    def __post_init__(self):
        if self.capacity < 0 or self.open_cost < 0:
            raise ModelError(f"facility {self.id}: capacity and open cost must be >= 0")


@dataclass(frozen=True, eq=False)
class PairAmbiguity:
    """Ambiguity data of one (site, facility) pair.

    ``f(v) = beta_hat.v - b ||A^{-1/2} v||`` comes from the mean ellipsoid,
    ``g(v) = beta_hat.v - sqrt(gamma_hi) ||Sigma^{1/2} v||`` from the variance
    bound.  ``gamma_lo`` is stored but never affects the optimal value.
    """

    beta_hat: np.ndarray
    ellipsoid_shape: np.ndarray
    ellipsoid_radius: float
    cov_hat: np.ndarray
    gamma_lo: float
    gamma_hi: float
    a_inv_sqrt: np.ndarray = field(init=False, repr=False)
    a_inv: np.ndarray = field(init=False, repr=False)
    cov_sqrt: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = _readonly(self.beta_hat).reshape(-1)
        n = beta.size
        a = _readonly(self.ellipsoid_shape)
        cov = _readonly(self.cov_hat)
        if a.shape != (n, n) or cov.shape != (n, n):
            raise ModelError(f"matrix shapes {a.shape}, {cov.shape} do not match |F|={n}")
        if not (np.allclose(a, a.T) and np.allclose(cov, cov.T)):
            raise ModelError("ellipsoid_shape and cov_hat must be symmetric")
        a_eigs = np.linalg.eigvalsh(a)
        if a_eigs[0] < PD_EIG_MIN:
            raise ModelError(
                f"ellipsoid_shape must be positive definite (min eigenvalue {a_eigs[0]:.3g})"
            )
        if np.linalg.eigvalsh(cov)[0] < PSD_EIG_MIN:
            raise ModelError("cov_hat must be positive semidefinite")
        if self.ellipsoid_radius < 0:
            raise ModelError("ellipsoid_radius must be >= 0")
        if not 0 <= self.gamma_lo <= self.gamma_hi:
            raise ModelError(f"need 0 <= gamma_lo <= gamma_hi, got {self.gamma_lo}, {self.gamma_hi}")
        set_ = object.__setattr__
        set_(self, "beta_hat", beta)
        set_(self, "ellipsoid_shape", a)
        set_(self, "cov_hat", cov)
        set_(self, "ellipsoid_radius", float(self.ellipsoid_radius))
        set_(self, "gamma_lo", float(self.gamma_lo))
        set_(self, "gamma_hi", float(self.gamma_hi))
        set_(self, "a_inv_sqrt", _readonly(_sym_sqrt(a, inverse=True)))
        set_(self, "a_inv", _readonly(np.linalg.inv(a)))
        set_(self, "cov_sqrt", _readonly(_sym_sqrt(cov)))

    @property
    def dim(self) -> int:
        return self.beta_hat.size

    @property
    def sqrt_gamma(self) -> float:
        return math.sqrt(self.gamma_hi)

    def with_gamma_hi(self, gamma_hi: float) -> "PairAmbiguity":
        return PairAmbiguity(
            self.beta_hat, self.ellipsoid_shape, self.ellipsoid_radius,
            self.cov_hat, min(self.gamma_lo, gamma_hi), gamma_hi,
        )

    @classmethod
    def zero(cls, dim: int) -> "PairAmbiguity":
        eye = np.eye(dim)
        return cls(np.zeros(dim), eye, 0.0, np.zeros((dim, dim)), 0.0, 0.0)


@dataclass(frozen=True)
class RobustMeanProblem:
    """min E[u] over measures on [support_lo, support_hi] with mean in
    [mean_lo, mean_hi] and second moment about ref_mean in [var_lo, var_hi]."""

    support_lo: float
    support_hi: float
    mean_lo: float
    mean_hi: float
    var_lo: float
    var_hi: float
    ref_mean: float

    def check(self) -> None:
        ok = (
            self.support_lo <= self.mean_lo <= self.ref_mean <= self.mean_hi <= self.support_hi
            and 0 <= self.var_lo <= self.var_hi
            and (self.ref_mean - self.mean_lo) ** 2 >= self.var_lo
        )
        if not ok:
            raise ModelError(f"infeasible robust-mean problem: {self}")


@dataclass
class Instance:
    sites: list[Site]
    facilities: list[Facility]
    budget: float
    fixed_gains: np.ndarray
    ambiguity: dict[tuple[int, int], PairAmbiguity]
    name: str = "instance"

    def __post_init__(self):
        if not self.sites or not self.facilities:
            raise ModelError("need at least one site and one facility")
        if self.budget < 0:
            raise ModelError("budget must be >= 0")
        self.fixed_gains = np.asarray(self.fixed_gains, dtype=float).reshape(-1)
        if self.fixed_gains.size != self.n_facilities:
            raise ModelError("fixed_gains length must equal |F|")
        for (i, j), pair in self.ambiguity.items():
            if not (0 <= i < self.n_sites and 0 <= j < self.n_facilities):
                raise ModelError(f"pair ({i}, {j}) out of range")
            if pair.dim != self.n_facilities:
                raise ModelError(f"pair ({i}, {j}) has dimension {pair.dim} != |F|")

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def n_facilities(self) -> int:
        return len(self.facilities)

    @property
    def demands(self) -> np.ndarray:
        return np.array([s.demand for s in self.sites])

    @property
    def capacities(self) -> np.ndarray:
        return np.array([f.capacity for f in self.facilities])

    @property
    def open_costs(self) -> np.ndarray:
        return np.array([f.open_cost for f in self.facilities])

    def pair(self, i: int, j: int) -> Optional[PairAmbiguity]:
        return self.ambiguity.get((i, j))

    def is_budget_feasible(self, y) -> bool:
        y = np.asarray(y, dtype=float)
        return float(self.open_costs @ y) <= self.budget + 1e-9

    def with_gamma_hi(self, gamma_hi: float) -> "Instance":
        amb = {k: p.with_gamma_hi(gamma_hi) for k, p in self.ambiguity.items()}
        return Instance(self.sites, self.facilities, self.budget, self.fixed_gains, amb, self.name)


@dataclass
class Solution:
    y: np.ndarray
    x: np.ndarray
    objective: float
    bound: float = math.nan
    gap: float = 0.0
    nodes: int = 0
    cuts: int = 0
    status: str = "optimal"
    reevaluated: float = math.nan
    consistent: bool = True

    @property
    def open_set(self) -> list[int]:
        return [int(j) for j in np.flatnonzero(np.asarray(self.y) > 0.5)]


def _check_dim(pair: PairAmbiguity, v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != pair.dim:
        raise ValueError(f"vector of length {v.size} does not match |F|={pair.dim}")
    return v


def f_value(pair: PairAmbiguity, v) -> float:
    v = _check_dim(pair, v)
    return float(pair.beta_hat @ v - pair.ellipsoid_radius * np.linalg.norm(pair.a_inv_sqrt @ v))


def g_value(pair: PairAmbiguity, v) -> float:
    v = _check_dim(pair, v)
    return float(pair.beta_hat @ v - pair.sqrt_gamma * np.linalg.norm(pair.cov_sqrt @ v))


def worst_case_utility(pair: PairAmbiguity, y) -> float:
    """Worst-case expected utility of the pair under decision ``y``."""
    return max(f_value(pair, y), g_value(pair, y))


def dominant_branch(pair: PairAmbiguity) -> Optional[str]:
    """'f' if f >= g on the whole nonnegative orthant, 'g' for the reverse,
    None when no certificate is found.

    Certificates (v >= 0, so (1.v)^2 >= ||v||^2):
      gamma v'Sigma v >= gamma min(Sigma) ||v||^2 when Sigma >= 0 entrywise, and
      b^2 v'A^{-1} v <= b^2 lambda_max(A^{-1}) ||v||^2; symmetrically for 'g'.
    """
    b2, gam = pair.ellipsoid_radius ** 2, pair.gamma_hi
    if b2 == 0.0:
        return "f"
    if gam == 0.0:
        return "g"
    cov, a_inv = pair.cov_hat, pair.a_inv
    if cov.min() >= 0 and gam * cov.min() >= b2 * np.linalg.eigvalsh(a_inv)[-1]:
        return "f"
    if a_inv.min() >= 0 and b2 * a_inv.min() >= gam * np.linalg.eigvalsh(cov)[-1]:
        return "g"
    return None


def robust_mean_bounds(pair: PairAmbiguity, y) -> tuple[float, float]:
    y = _check_dim(pair, y)
    centre = float(pair.beta_hat @ y)
    radius = pair.ellipsoid_radius * float(np.linalg.norm(pair.a_inv_sqrt @ y))
    return centre - radius, centre + radius


def mean_maximizer(pair: PairAmbiguity, y) -> np.ndarray:
    """The coefficient vector in the ellipsoid that attains the upper mean bound."""
    y = _check_dim(pair, y)
    scale = float(np.linalg.norm(pair.a_inv_sqrt @ y))
    if scale == 0.0:
        return pair.beta_hat.copy()
    return pair.beta_hat + pair.ellipsoid_radius * (pair.a_inv @ y) / scale


def variance_bounds(pair: PairAmbiguity, y) -> tuple[float, float]:
    y = _check_dim(pair, y)
    quad = float(y @ pair.cov_hat @ y)
    return pair.gamma_lo * quad, pair.gamma_hi * quad


def solve_robust_mean(p: RobustMeanProblem) -> float:
    # the optimum ignores mean_hi and var_lo
    p.check()
    return max(p.mean_lo, p.ref_mean - math.sqrt(p.var_hi))


def robust_mean_problem(pair: PairAmbiguity, y, support=(-1e6, 1e6)) -> RobustMeanProblem:
    lo, hi = robust_mean_bounds(pair, y)
    vlo, vhi = variance_bounds(pair, y)
    mu = float(pair.beta_hat @ np.asarray(y, dtype=float))
    # with var_lo above (mu - lo)^2 the problem is infeasible; gamma_lo is inert anyway
    vlo = min(vlo, (mu - lo) ** 2)
    return RobustMeanProblem(support[0], support[1], lo, hi, vlo, vhi, mu)


def utility_matrix(inst: Instance, y) -> np.ndarray:
    """Flow coefficients max{U^ij(y), 0}; zero for pairs without ambiguity data."""
    y = np.asarray(y, dtype=float)
    coef = np.zeros((inst.n_sites, inst.n_facilities))
    for (i, j), pair in inst.ambiguity.items():
        if y[j] > 0.5:
            coef[i, j] = max(worst_case_utility(pair, y), 0.0)
    return coef


def transport_lp(coef: np.ndarray, demands, capacities):
    """max sum coef*x over {x >= 0, row sums <= demand, column sums <= capacity}.

    Only entries with positive coefficient get a column.  Returns (value, x).
    """
    from .conic import LinearProgram, solve_lp_fast

    n_s, n_f = coef.shape
    idx = np.argwhere(coef > 0)
    x = np.zeros((n_s, n_f))
    if idx.size == 0:
        return 0.0, x
    m = len(idx)
    cols = np.arange(m)
    import scipy.sparse as sp

    rows_d = sp.csr_matrix((np.ones(m), (idx[:, 0], cols)), shape=(n_s, m))
    rows_c = sp.csr_matrix((np.ones(m), (idx[:, 1], cols)), shape=(n_f, m))
    lp = LinearProgram(
        objective=coef[idx[:, 0], idx[:, 1]],
        a_ub=sp.vstack([rows_d, rows_c]).tocsr(),
        b_ub=np.concatenate([np.asarray(demands, float), np.asarray(capacities, float)]),
    )
    res = solve_lp_fast(lp)
    if res.status != "optimal":
        raise ModelError(f"transportation LP failed with status {res.status}")
    x[idx[:, 0], idx[:, 1]] = np.maximum(res.primal, 0.0)
    return res.objective, x


def recourse_value_fixed_y(inst: Instance, y, allowed=None) -> tuple[float, np.ndarray]:
    """Optimal worst-case utility Q(y) and the flow attaining it.

    ``allowed`` optionally restricts each pair to one utility branch
    ({(i, j): "f" | "g"}); used by branch-and-bound leaves with fixed s.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != inst.n_facilities or np.any((y != 0) & (y != 1)):
        raise ModelError("y must be a binary vector of length |F|")
    if not inst.is_budget_feasible(y):
        raise ModelError(f"y={y.astype(int).tolist()} exceeds the budget {inst.budget}")
    if allowed:
        coef = np.zeros((inst.n_sites, inst.n_facilities))
        for (i, j), pair in inst.ambiguity.items():
            if y[j] < 0.5:
                continue
            branch = allowed.get((i, j))
            if branch == "f":
                u = f_value(pair, y)
            elif branch == "g":
                u = g_value(pair, y)
            else:
                u = worst_case_utility(pair, y)
            coef[i, j] = max(u, 0.0)
    else:
        coef = utility_matrix(inst, y)
    caps = inst.capacities * y
    return transport_lp(coef, inst.demands, caps)


def total_objective(inst: Instance, y) -> float:
    y = np.asarray(y, dtype=float)
    value, _ = recourse_value_fixed_y(inst, y)
    return float(inst.fixed_gains @ y) + value


def feasible_decisions(inst: Instance, limit: int = ENUM_LIMIT) -> Iterator[tuple[int, ...]]:
    """Budget-feasible binary vectors in lexicographic order."""
    n = inst.n_facilities
    costs = inst.open_costs
    count = 0
    for y in itertools.product((0, 1), repeat=n):
        if float(costs @ np.array(y)) <= inst.budget + 1e-9:
            count += 1
            if count > limit:
                raise ModelError(f"more than {limit} budget-feasible decisions; refusing to enumerate")
            yield y


def count_feasible(inst: Instance, limit: int = ENUM_LIMIT) -> int:
    costs = inst.open_costs
    if np.allclose(costs, costs[0]) and costs[0] > 0:
        k_max = min(inst.n_facilities, int(math.floor(inst.budget / costs[0] + 1e-9)))
        return sum(math.comb(inst.n_facilities, k) for k in range(k_max + 1))
    if inst.n_facilities > 40:
        raise ModelError("cannot count decisions for more than 40 non-uniform facilities")
    return sum(1 for _ in feasible_decisions(inst, limit))


def enumerate_optimal(inst: Instance, limit: int = ENUM_LIMIT) -> Solution:
    """Brute-force maximizer of c.y + Q(y); ties go to the lexicographically smallest y."""
    count = count_feasible(inst, limit)
    if count > limit:
        raise ModelError(f"{count} budget-feasible decisions exceed the limit {limit}")
    best = None
    for y in feasible_decisions(inst, limit):
        y_arr = np.array(y, dtype=float)
        value, x = recourse_value_fixed_y(inst, y_arr)
        total = float(inst.fixed_gains @ y_arr) + value
        if best is None or total > best.objective + 1e-9:
            best = Solution(y=y_arr, x=x, objective=total, bound=total)
    return best


def check_flow(inst: Instance, y, x, tol: float = FLOW_TOL) -> None:
    """Raise if ``x`` violates the flow constraints for ``y``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x < -tol):
        raise ModelError("negative flow")
    if np.any(x.sum(axis=0) > inst.capacities * y + tol):
        raise ModelError("capacity violated")
    if np.any(x.sum(axis=1) > inst.demands + tol):
        raise ModelError("demand violated")
