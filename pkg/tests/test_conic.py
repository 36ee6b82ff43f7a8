import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from rfl.conic import (LinearProgram, ProgramBuilder, Settings, Status, env_max_iters,
                       solve_conic, solve_lp_fast)


def test_pure_lp():
    b = ProgramBuilder()
    x = b.add_var()
    b.add_row([x], [1.0], "<", 3.0)
    b.add_objective(x, 1.0)
    prog = b.build()
    res = solve_conic(prog)
    assert res.ok and res.objective == pytest.approx(3.0, abs=1e-7)
    assert solve_lp_fast(prog).objective == pytest.approx(3.0)


def test_soc_on_simplex_edge():
    # max beta.v - 0.5 ||v||  s.t. sum v = 1, v >= 0  -> v = e1, value 0.5
    b = ProgramBuilder()
    v = b.add_vars(2)
    t = b.add_var()
    b.add_row(v, [1.0, 1.0], "=", 1.0)
    b.add_soc(t, v, np.eye(2))
    b.add_objective(v, [1.0, 0.0])
    b.add_objective(t, -0.5)
    res = solve_conic(b.build())
    assert res.ok
    assert res.objective == pytest.approx(0.5, abs=1e-6)
    assert res.primal[v] == pytest.approx([1.0, 0.0], abs=1e-5)


def test_infeasible_and_unbounded():
    b = ProgramBuilder()
    x = b.add_var()
    b.add_row([x], [1.0], ">", 2.0)
    b.add_row([x], [1.0], "<", 1.0)
    b.add_objective(x, 1.0)
    assert solve_conic(b.build()).status == Status.INFEASIBLE
    b = ProgramBuilder()
    x = b.add_var()
    b.add_objective(x, 1.0)
    assert solve_conic(b.build()).status == Status.UNBOUNDED


def test_rejects_integer_marks():
    b = ProgramBuilder()
    y = b.add_var(hi=1.0, integer=True)
    b.add_objective(y, 1.0)
    with pytest.raises(ValueError):
        solve_conic(b.build())


def test_degenerate_zero_cost_lp():
    lp = LinearProgram(np.zeros(3), sp.csr_matrix(np.ones((1, 3))), np.array([1.0]))
    assert solve_lp_fast(lp).objective == 0.0


def random_lp(seed):
    rng = np.random.default_rng(seed)
    m, n = rng.integers(1, 6), rng.integers(1, 6)
    b = ProgramBuilder()
    x = b.add_vars(n, hi=10.0)
    a = rng.uniform(0, 1, size=(m, n))
    for row in range(m):
        b.add_row(x, a[row], "<", rng.uniform(1, 5))
    b.add_objective(x, rng.uniform(-1, 2, size=n))
    return b.build()


@given(st.integers(0, 2**32))
def test_random_lp_paths_agree(seed):
    prog = random_lp(seed)
    a, b = solve_conic(prog), solve_lp_fast(prog)
    assert a.ok and b.ok
    assert a.objective == pytest.approx(b.objective, abs=1e-6, rel=1e-6)
    # weak duality, max sense
    assert a.objective <= a.dual_objective + 1e-6
    assert prog.max_violation(a.primal) <= 1e-6


@given(st.integers(0, 2**32))
def test_scaling_invariance(seed):
    tight = Settings(tol_feas=1e-10, tol_gap=1e-10)
    prog = random_lp(seed)
    base = solve_conic(prog, tight).objective
    prog.objective = prog.objective * 10
    assert solve_conic(prog, tight).objective == pytest.approx(10 * base, rel=1e-8, abs=1e-8)


def test_deterministic():
    prog = random_lp(3)
    a, b = solve_conic(prog), solve_conic(prog)
    assert np.array_equal(a.primal, b.primal) and a.objective == b.objective


def test_iteration_cap(monkeypatch):
    monkeypatch.setenv("RFL_CONIC_MAX_ITERS", "1")
    assert Settings().max_iter == 1
    res = solve_conic(random_lp(5))
    assert res.status in (Status.ITER_LIMIT, Status.OPTIMAL)
    monkeypatch.setenv("RFL_CONIC_MAX_ITERS", "nope")
    with pytest.raises(ValueError):
        env_max_iters()
    monkeypatch.delenv("RFL_CONIC_MAX_ITERS")
    assert env_max_iters() == 200
