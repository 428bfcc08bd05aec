import numpy as np
import pytest
from hypothesis import given, strategies as st

from pdpsat.classical import (DecimationConfig, ReinforceState, SpConfig, SpSurveys, bp_guided_decimate,
                              bp_marginals, local_search_fallback, reinforce_solve, sp_bias, sp_bias_array,
                              sp_guided_decimate, sp_sweep, unit_propagate)
from pdpsat.formula import CnfFormula, build_factor_graph
from pdpsat.generators import gen_uniform

from oracles import brute_marginals, random_tree_formula


def ref_sp_sweep(formula, eta):
    """Loop-based warning-survey update for every edge (a -> i)."""
    edges = [(a, lit) for a, c in enumerate(formula.clauses) for lit in c]
    new = np.zeros(len(edges))
    for e, (a, lit_i) in enumerate(edges):
        prod = 1.0
        for lit_j in formula.clauses[a]:
            if lit_j == lit_i:
                continue
            same, opp = 1.0, 1.0
            for f, (b, lit) in enumerate(edges):
                if b == a or abs(lit) != abs(lit_j):
                    continue
                if (lit > 0) == (lit_j > 0):
                    same *= 1 - eta[f]
                else:
                    opp *= 1 - eta[f]
            pu, ps, p0 = (1 - opp) * same, (1 - same) * opp, same * opp
            den = pu + ps + p0
            prod *= pu / den if den > 0 else 0.0
        new[e] = prod
    return new


def test_bp_single_clause_two_thirds():
    res = bp_marginals(build_factor_graph(CnfFormula(2, ((1, 2),))), eps_factor=1e-12)
    assert res.converged
    assert np.allclose(res.marginals[:, 1], 2 / 3, atol=1e-9)


def test_bp_isolated_variable():
    res = bp_marginals(build_factor_graph(CnfFormula(2, ((1,),))))
    assert np.allclose(res.marginals[1], [0.5, 0.5])
    assert res.marginals[0, 1] == pytest.approx(1.0, abs=1e-8)


def test_bp_exact_on_trees(rng):
    for _ in range(20):
        f = random_tree_formula(rng)
        res = bp_marginals(build_factor_graph(f))
        assert np.allclose(res.marginals[:, 1], brute_marginals(f), atol=1e-6)


def test_bp_decimate_unit_and_chain():
    f = CnfFormula(4, ((1,), (-1, 2), (-2, 3), (-3, 4)))
    res = bp_guided_decimate(f)
    assert res.is_solved and res.assignment.tolist() == [1, 1, 1, 1]


def test_sp_sweep_matches_reference(rng):
    f = gen_uniform(12, 3, 40, 2)
    g = build_factor_graph(f)
    eta = rng.random(g.num_edges)
    got = sp_sweep(g, SpSurveys(eta)).eta
    assert np.allclose(got, ref_sp_sweep(f, eta), atol=1e-12)


def test_sp_unit_clause_hard_warning():
    g = build_factor_graph(CnfFormula(2, ((1,), (1, 2))))
    s = sp_sweep(g, SpSurveys(np.array([0.3, 0.3, 0.3])))
    assert s.eta[0] == 1.0


def test_sp_lone_clause_fixed_point_zero(rng):
    g = build_factor_graph(CnfFormula(2, ((1, 2),)))
    s = sp_sweep(g, SpSurveys(rng.random(2)))
    assert np.array_equal(s.eta, [0.0, 0.0])
    assert sp_sweep(g, s).converged


@given(st.integers(0, 10_000), st.floats(0, 0.99))
def test_surveys_stay_in_unit_interval(seed, damping):
    rng = np.random.default_rng(seed)
    g = build_factor_graph(gen_uniform(10, 3, 40, seed))
    s = SpSurveys(rng.random(g.num_edges))
    for _ in range(5):
        s = sp_sweep(g, s, SpConfig(damping=damping))
        assert np.all((s.eta >= 0) & (s.eta <= 1))


def test_sp_converges_below_threshold():
    g = build_factor_graph(gen_uniform(50, 3, 175, 3))
    s = SpSurveys(np.random.default_rng(0).random(g.num_edges))
    for _ in range(1000):
        s = sp_sweep(g, s)
        if s.converged:
            break
    assert s.converged


def test_sp_bias_examples():
    g = build_factor_graph(CnfFormula(2, ((1,),)))
    b = sp_bias(g, SpSurveys(np.array([1.0])))
    assert b[0].w_plus == 1.0
    assert b[1].w_plus == b[1].w_minus == b[1].w_zero == pytest.approx(1 / 3)


@given(st.integers(0, 10_000))
def test_sp_bias_normalised(seed):
    rng = np.random.default_rng(seed)
    g = build_factor_graph(gen_uniform(8, 3, 20, seed))
    w = sp_bias_array(g, rng.random(g.num_edges))
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9) and np.all(w >= 0)


def test_sp_decimate_unit_clauses_one_round():
    f = CnfFormula(3, ((1,), (-2,), (3,)))
    res = sp_guided_decimate(f)
    assert res.is_solved and res.iterations_run == 0 and res.info["fallback"] is None


def test_sp_decimate_lone_clause_uses_fallback():
    res = sp_guided_decimate(CnfFormula(2, ((1, 2),)))
    assert res.is_solved and res.info["fallback"] == "paramagnetic"


def test_sp_decimate_random_instances():
    solved = sum(sp_guided_decimate(gen_uniform(30, 3, 90, [8, i]), SpConfig(seed=i)).is_solved
                 for i in range(5))
    assert solved == 5


def test_reinforce_unit_clauses_align():
    f = CnfFormula(3, ((1,), (-2,), (3,)))
    res = reinforce_solve(f, ReinforceState.zeros(3, pi=1.0), t_max=5)
    assert res.is_solved and res.solved_at[0] <= 2
    assert np.array_equal(np.sign(res.info["field"]), [1, -1, 1])


def test_reinforce_pi_one_commits_to_first_bias():
    f = gen_uniform(20, 3, 60, 4)
    g = build_factor_graph(f)
    one = reinforce_solve(f, ReinforceState.zeros(20, pi=1.0), t_max=1, seed=3)
    # same survey initialisation, one sweep, then the bias
    rng = np.random.default_rng(3)
    s = sp_sweep(g, SpSurveys(rng.uniform(0.0, 1.0, g.num_edges)), SpConfig(), np.zeros(20))
    w = sp_bias_array(g, s.eta, np.zeros(20))
    assert np.allclose(one.info["field"], w[:, 0] - w[:, 1])
    assert np.array_equal(one.assignment, (w[:, 0] - w[:, 1] >= 0).astype(int))


def test_reinforce_state_validation():
    with pytest.raises(ValueError):
        ReinforceState(np.zeros(2), pi=0.0)


def test_unit_propagate_examples():
    f = CnfFormula(2, ((1,), (-1, 2)))
    res, assign, conflict = unit_propagate(f, [-1, -1])
    assert not conflict and res.num_clauses == 0 and assign.tolist() == [1, 1]
    _, _, conflict = unit_propagate(CnfFormula(1, ((1,), (-1,))), [-1])
    assert conflict


@given(st.integers(0, 10_000))
def test_unit_propagate_idempotent_and_sound(seed):
    rng = np.random.default_rng(seed)
    f = gen_uniform(8, 3, 20, seed)
    partial = np.where(rng.random(8) < 0.3, rng.integers(0, 2, 8), -1)
    res, assign, conflict = unit_propagate(f, partial)
    if conflict:
        return
    res2, assign2, _ = unit_propagate(f, assign)
    assert res2.clauses == res.clauses and np.array_equal(assign, assign2)
    # any completion that satisfies the residual satisfies the original
    free = np.flatnonzero(assign == -1)
    for bits in range(min(2 ** free.size, 64)):
        x = assign.copy()
        x[free] = (bits >> np.arange(free.size)) & 1
        if res.evaluate(x)[0]:
            assert f.evaluate(x)[0]


def test_local_search_examples():
    f = CnfFormula(2, ((1, 2),))
    assert local_search_fallback(f, [1, 1]).info["flips"] == 0
    res = local_search_fallback(CnfFormula(1, ((1,),)), [0])
    assert res.is_solved and res.info["flips"] == 1


def test_local_search_respects_frozen():
    f = CnfFormula(2, ((1, 2),))
    res = local_search_fallback(f, [0, 0], frozen=[1])
    assert res.is_solved and res.assignment.tolist() == [0, 1]


def test_local_search_random_easy():
    solved = sum(local_search_fallback(gen_uniform(50, 3, 150, [2, i]), np.full(50, -1), seed=i).is_solved
                 for i in range(20))
    assert solved >= 19


def test_solved_results_pass_evaluate():
    for i in range(5):
        f = gen_uniform(20, 3, 50, [6, i])
        for res in (bp_guided_decimate(f, DecimationConfig(seed=i)), sp_guided_decimate(f),
                    reinforce_solve(f, t_max=200, seed=i)):
            if res.is_solved:
                assert f.evaluate(res.assignment)[0]
