import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rfl.conic import solve_conic
from rfl.hull import CutFamily, TangentCut, gcut_f
from rfl.instances import GenConfig, generate, illustrative_2_4
from rfl.misocp import (NONE, BuildOptions, FractionalSolution, attach_cuts, big_r, build_misocp,
                        check_invariants, dump_model, extract_solution, lift_point, load_model,
                        relax)
from rfl.model import Instance, enumerate_optimal, feasible_decisions, recourse_value_fixed_y, total_objective

FULL = BuildOptions(prune_pairs=False, reduce_dominated=False, strengthen=False)
VARIANTS = [FULL, BuildOptions(), BuildOptions(strengthen=False), BuildOptions(reduce_dominated=False)]


def relax_value(prog):
    res = solve_conic(relax(prog))
    assert res.ok
    return res.objective


def fixed(prog, idx, values):
    out = prog.copy()
    out.lo[idx] = values
    out.hi[idx] = values
    return out


def test_big_r(small_instance):
    assert big_r(small_instance, 0, 1) == min(small_instance.sites[0].demand,
                                              small_instance.facilities[1].capacity)
    inst = generate(GenConfig(8, 2, seed=1))
    r = [big_r(inst, i, j) for i in range(8) for j in range(8)]
    assert min(inst.demands) <= min(r) and max(r) <= 180


def test_variable_count_full_2x2():
    inst = generate(GenConfig(2, 1, seed=0, full_matrices=True))
    prog, vmap = build_misocp(inst, FULL)
    # y(2) + per pair [x, v(2), v1(2), v2(2), U, U1, U2, s, t1, t2] over 4 pairs
    assert prog.num_vars == 2 + 4 * 13 == 54
    assert len(vmap.pairs) == 4
    assert set(vmap.binaries) == set(prog.integer_vars)


@pytest.mark.parametrize("opts", VARIANTS)
def test_ranges_disjoint_and_exhaustive(opts):
    prog, vmap = build_misocp(generate(GenConfig(6, 2, seed=2)), opts)
    allidx = np.concatenate(vmap.ranges())
    assert sorted(allidx.tolist()) == list(range(prog.num_vars))


def test_soc_heads_nonnegative(small_instance):
    prog, _ = build_misocp(small_instance, FULL)
    assert all(prog.lo[blk.head] >= 0 for blk in prog.socs)


def test_budget_zero_relaxation_is_zero(small_instance):
    inst = Instance(small_instance.sites, small_instance.facilities, 0.0,
                    small_instance.fixed_gains, small_instance.ambiguity)
    for opts in VARIANTS:
        assert relax_value(build_misocp(inst, opts)[0]) == pytest.approx(0.0, abs=1e-6)


def test_relax_idempotent(small_instance):
    prog, _ = build_misocp(small_instance)
    once = relax(prog)
    twice = relax(once)
    assert once.integer_vars.size == 0
    assert np.array_equal(once.lo, twice.lo) and np.array_equal(once.hi, twice.hi)


@pytest.mark.parametrize("case", ["base", "est1", "est2"])
def test_example_relaxation_bounds_optimum(case):
    inst = illustrative_2_4(case)
    best = enumerate_optimal(inst).objective
    for opts in VARIANTS:
        assert relax_value(build_misocp(inst, opts)[0]) >= best - 1e-7 * abs(best)  # solver gap


def _small(seed, n, budget):
    return generate(GenConfig(n, budget, seed=seed))


@given(st.integers(0, 10_000), st.sampled_from([2, 3]), st.sampled_from([1, 2]),
       st.sampled_from(range(len(VARIANTS))))
def test_lift_point_exact(seed, n, budget, which):
    """Lifted oracle points are feasible, tight, and satisfy both invariants."""
    inst = _small(seed, n, budget)
    prog, vmap = build_misocp(inst, VARIANTS[which])
    for y in feasible_decisions(inst):
        value, x = recourse_value_fixed_y(inst, y)
        z = lift_point(vmap, y, x)
        assert prog.max_violation(z) <= 1e-7
        assert prog.evaluate(z) == pytest.approx(value, abs=1e-6, rel=1e-9)
        inv = check_invariants(vmap, z)
        assert inv["disjunction"] <= 1e-7 and inv["linearization"] <= 1e-7
        sol = extract_solution(prog, vmap, z)
        assert sol.consistent and np.array_equal(sol.y, y)


def test_fixed_binaries_relaxation_equals_value():
    inst = illustrative_2_4("est2")
    prog, vmap = build_misocp(inst, FULL)
    for y in feasible_decisions(inst):
        _, x = recourse_value_fixed_y(inst, y)
        z = lift_point(vmap, y, x)
        b = vmap.binaries
        val = relax_value(fixed(prog, b, z[b]))
        assert val == pytest.approx(total_objective(inst, y), abs=1e-5)


def test_extract_rejects_fractional(small_instance):
    prog, vmap = build_misocp(small_instance)
    z = np.zeros(prog.num_vars)
    z[vmap.y[0]] = 0.5
    with pytest.raises(FractionalSolution):
        extract_solution(prog, vmap, z)


def test_reduced_pairs_have_no_switch():
    inst = generate(GenConfig(6, 2, seed=2))
    _, vmap = build_misocp(inst)
    assert all(p.s == NONE for p in vmap.pairs.values() if p.branch is not None)
    _, full = build_misocp(inst, BuildOptions(reduce_dominated=False))
    assert all(p.s != NONE for p in full.pairs.values())


def test_prune_drops_zero_utility_pairs():
    inst = generate(GenConfig(6, 2, seed=2, full_matrices=True))
    _, pruned = build_misocp(inst)
    _, kept = build_misocp(inst, BuildOptions(prune_pairs=False))
    assert len(kept.pairs) == 36 > len(pruned.pairs)


def test_attach_cuts(caplog):
    inst = illustrative_2_4("est1")
    prog, vmap = build_misocp(inst, FULL)
    assert attach_cuts(prog, vmap, []) is prog
    base = relax_value(prog)
    pair = inst.pair(0, 0)
    cut = TangentCut((0, 0), gcut_f(pair, [1.0, 0.2, 0.1]).alpha, 0.0, CutFamily.GRAD_F)
    one = attach_cuts(prog, vmap, [cut])
    assert one.num_rows == prog.num_rows + 1
    assert relax_value(one) <= base + 1e-6
    dup = TangentCut((0, 0), cut.alpha + 1e-12, 0.0, CutFamily.GRAD_G)
    assert attach_cuts(prog, vmap, [cut, dup]).num_rows == prog.num_rows + 1
    assert attach_cuts(one, vmap, [dup], existing=[cut]) is one
    with caplog.at_level(logging.WARNING):
        out = attach_cuts(prog, vmap, [TangentCut((7, 7), cut.alpha, 0.0, CutFamily.GRAD_F)])
    assert out is prog and "elided" in caplog.text


def test_dump_load_round_trip(tmp_path, small_instance):
    prog, _ = build_misocp(small_instance)
    path = tmp_path / "m.txt"
    dump_model(prog, path)
    text = path.read_text().splitlines()
    assert text[0] == "rfl-model 1" and text[1].startswith(f"vars {prog.num_vars} ")
    back = load_model(path)
    assert back.num_vars == prog.num_vars and back.num_rows == prog.num_rows
    assert np.array_equal(back.objective, prog.objective)
    assert np.array_equal(back.integer_vars, prog.integer_vars)
    assert abs(back.rows - prog.rows).max() == 0
    assert len(back.socs) == len(prog.socs)
    assert relax_value(back) == pytest.approx(relax_value(prog), rel=1e-9)
