import logging
import math
import re

import numpy as np
import pytest

from rfl.bnb import (BnbOptions, branch_and_bound, relative_gap, root_cut_loop, separate,
                     solve_with_protocol)
from rfl.conic import solve_conic
from rfl.hull import validate_cut
from rfl.instances import GenConfig, generate, illustrative_2_4
from rfl.misocp import BuildOptions, build_misocp, relax
from rfl.model import Instance, enumerate_optimal


def linear_instance(seed=1):
    """Generated instance with every radius and gamma set to zero."""
    inst = generate(GenConfig(6, 2, seed=seed)).with_gamma_hi(0.0)
    amb = {k: type(p)(p.beta_hat, p.ellipsoid_shape, 0.0, p.cov_hat, 0.0, 0.0)
           for k, p in inst.ambiguity.items()}
    return Instance(inst.sites, inst.facilities, inst.budget, inst.fixed_gains, amb, "linear")


@pytest.mark.parametrize("mode", ["no_cuts", "with_cuts"])
@pytest.mark.parametrize("case,y", [("est1", [1, 0, 0]), ("est2", [0, 1, 0]), ("base", [1, 0, 0])])
def test_examples(mode, case, y):
    inst = illustrative_2_4(case)
    sol, stats, _ = solve_with_protocol(inst, mode)
    assert sol.y.tolist() == y and stats.status == "optimal"
    assert sol.objective == pytest.approx(enumerate_optimal(inst).objective, rel=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_small_random_against_enumeration(seed):
    inst = generate(GenConfig(5, 2, seed=seed))
    ref = enumerate_optimal(inst).objective
    for build in (BuildOptions(), BuildOptions(False, False, False)):
        sol, stats = branch_and_bound(*build_misocp(inst, build), inst)
        assert abs(sol.objective - ref) <= 1e-4 * abs(ref)
        assert stats.gap >= -1e-9


def test_root_loop_zero_rounds():
    inst = illustrative_2_4("est1")
    prog, vmap = build_misocp(inst)
    out, cuts = root_cut_loop(prog, vmap, inst, max_rounds=0)
    assert out is prog and cuts == []
    with pytest.raises(ValueError):
        root_cut_loop(prog, vmap, inst, max_rounds=-1)


def test_root_loop_bounds_nonincreasing():
    inst = generate(GenConfig(8, 2, seed=3))
    prog, vmap = build_misocp(inst, BuildOptions(reduce_dominated=False))
    info = {}
    _, cuts = root_cut_loop(prog, vmap, inst, 5, info=info)
    b = info["bounds"]
    assert cuts
    assert all(later <= earlier + 1e-6 * abs(earlier) for earlier, later in zip(b, b[1:]))
    assert all(validate_cut(inst.ambiguity[c.pair], c) for c in cuts)


def test_dominated_pairs_get_no_cuts():
    # with one branch dominant the epigraph is already convex
    inst = generate(GenConfig(8, 2, seed=3))
    a, sa, ca = solve_with_protocol(inst, "no_cuts")
    b, sb, cb = solve_with_protocol(inst, "with_cuts")
    assert ca == cb == []
    assert sa.nodes == sb.nodes and a.objective == b.objective and np.array_equal(a.y, b.y)


def test_no_cuts_without_ambiguity():
    inst = linear_instance()
    prog, vmap = build_misocp(inst, BuildOptions(reduce_dominated=False))
    _, cuts = root_cut_loop(prog, vmap, inst)
    assert cuts == []


def test_separate_skips_empty_blocks():
    inst = illustrative_2_4("est2")
    prog, vmap = build_misocp(inst)
    assert separate(vmap, np.zeros(prog.num_vars)) == []
    res = solve_conic(relax(prog))
    assert all(validate_cut(inst.ambiguity[c.pair], c) for c in separate(vmap, res.primal))


def test_time_limit_zero_returns_incumbent():
    inst = generate(GenConfig(10, 3, seed=7))
    sol, stats, _ = solve_with_protocol(inst, "no_cuts", BnbOptions(time_limit=0.0))
    assert stats.status == "time_limit"
    assert math.isfinite(sol.objective) and stats.gap > 1e-4


def test_deterministic_and_threaded():
    inst = generate(GenConfig(10, 3, seed=7))
    a, sa, _ = solve_with_protocol(inst)
    b, sb, _ = solve_with_protocol(inst)
    assert sa.nodes == sb.nodes and np.array_equal(a.y, b.y) and a.objective == b.objective
    c, sc, _ = solve_with_protocol(inst, opts=BnbOptions(threads=3))
    assert abs(c.objective - a.objective) <= 1e-4 * abs(a.objective)
    d, sd, cuts = solve_with_protocol(inst, "with_cuts", BnbOptions(cuts_every_k_nodes=2))
    assert abs(d.objective - a.objective) <= 1e-4 * abs(a.objective)


def test_node_limit():
    inst = generate(GenConfig(10, 3, seed=7))
    sol, stats, _ = solve_with_protocol(inst, opts=BnbOptions(max_nodes=1))
    assert stats.status == "node_limit" and stats.nodes == 1


def test_progress_lines(caplog):
    with caplog.at_level(logging.INFO, logger="rfl"):
        solve_with_protocol(generate(GenConfig(10, 3, seed=7)), opts=BnbOptions(log_every=1))
    lines = [r.getMessage() for r in caplog.records if r.getMessage().startswith("node=")]
    assert lines
    pat = re.compile(r"^node=\d+ bound=-?[\d.]+ incumbent=-?[\d.]+ gap=\S+$")
    assert all(pat.match(line) for line in lines)


def test_relative_gap():
    assert relative_gap(10.0, -math.inf) == math.inf
    assert relative_gap(101.0, 100.0) == pytest.approx(0.01)
    assert relative_gap(0.5, 0.0) == 0.5


def test_bad_mode():
    with pytest.raises(ValueError):
        solve_with_protocol(illustrative_2_4("est1"), "sometimes")
