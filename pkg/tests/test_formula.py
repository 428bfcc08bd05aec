import numpy as np
import pytest
from hypothesis import given, strategies as st

from pdpsat.formula import (CnfFormula, DimacsError, build_factor_graph, concat_batch, harden,
                            parse_dimacs, replicate, write_dimacs)
from pdpsat.generators import gen_uniform


@st.composite
def formulas(draw, max_n=8, max_m=12):
    n = draw(st.integers(1, max_n))
    lit = st.integers(1, n).flatmap(lambda v: st.sampled_from([v, -v]))
    clauses = draw(st.lists(st.lists(lit, min_size=1, max_size=4), max_size=max_m))
    return CnfFormula.from_clauses(n, clauses)


def test_from_clauses_dedups_and_drops_tautologies():
    f = CnfFormula.from_clauses(3, [[1, 1, -2], [2, -2, 3], [3]])
    assert f.clauses == ((1, -2), (3,))
    assert f.provenance["tautologies_dropped"] == 1


@pytest.mark.parametrize("clauses", [[[]], [[4]], [[0, 1]]])
def test_invalid_clauses_rejected(clauses):
    with pytest.raises(ValueError):
        CnfFormula(3, tuple(tuple(c) for c in clauses))


def test_evaluate_reports_unsat_clauses():
    f = CnfFormula(2, ((1, 2), (-1,), (-2, 1)))
    ok, unsat = f.evaluate(np.array([0, 1]))
    assert not ok and unsat == [2]
    assert f.evaluate(np.array([0, 0]))[1] == [0]
    with pytest.raises(ValueError):
        f.evaluate(np.array([0, 1, 1]))


def test_harden_threshold():
    assert harden([0.2, 0.5, 0.7]).tolist() == [0, 1, 1]


def test_parse_dimacs_basic():
    text = "c hi\np cnf 3 2\n1 -2 0\n2 3\n0\n%\n"
    f = parse_dimacs(text)
    assert f.num_variables == 3 and f.clauses == ((1, -2), (2, 3))
    assert f.provenance["declared_clauses"] == 2


@pytest.mark.parametrize("text", [
    "1 2 0\n",                      # clause before header
    "p cnf 2 1\n1 3 0\n",           # literal out of range
    "p cnf 2 1\n1 2\n",             # unterminated
    "p cnf 2 1\n0\n",               # empty clause
    "p cnf x 1\n",                  # malformed header
    "p cnf 2 1\np cnf 2 1\n",       # duplicate header
    "",                             # missing header
])
def test_parse_dimacs_errors(text):
    with pytest.raises(DimacsError):
        parse_dimacs(text)


@given(formulas())
def test_dimacs_roundtrip_property(f):
    g = parse_dimacs(write_dimacs(f, comments=["x"]))
    assert g == f


@given(formulas())
def test_factor_graph_edges_match_literals(f):
    g = build_factor_graph(f)
    assert g.num_edges == sum(len(c) for c in f.clauses)
    for e in range(g.num_edges):
        lit = f.clauses[g.edge_clause[e]]
        assert (g.edge_var[e] + 1) * g.edge_sign[e] in lit


def test_unsat_counts_agree_with_evaluate(rng):
    fs = [gen_uniform(10, 3, 30, [1, i]) for i in range(5)]
    g = concat_batch([build_factor_graph(f) for f in fs])
    hard = rng.integers(0, 2, g.num_variables)
    counts = g.unsat_counts(hard)
    for k, f in enumerate(fs):
        x = hard[g.var_offsets[k]:g.var_offsets[k + 1]]
        assert counts[k] == len(f.evaluate(x)[1])


def test_concat_and_extract_roundtrip():
    fs = [gen_uniform(n, 3, 2 * n, [2, n]) for n in (5, 7, 9)]
    gs = [build_factor_graph(f) for f in fs]
    b = concat_batch(gs)
    assert b.num_instances == 3 and b.replica_of.tolist() == [0, 1, 2]
    for k, g in enumerate(gs):
        sub = b.instance(k)
        for name in ("edge_var", "edge_clause", "edge_sign"):
            assert np.array_equal(getattr(sub, name), getattr(g, name))


def test_replicate_maps_to_source():
    g = build_factor_graph(gen_uniform(6, 3, 10, 0))
    r = replicate(g, 4)
    assert r.num_instances == 4 and r.replica_of.tolist() == [0, 0, 0, 0]
    both = concat_batch([r, replicate(g, 2)])
    assert both.replica_of.tolist() == [0, 0, 0, 0, 4, 4]
    with pytest.raises(ValueError):
        replicate(g, 0)


def test_segments_sum_and_counts():
    g = build_factor_graph(CnfFormula(3, ((1, 2), (-2, 3), (2,))))
    seg = g.var_segments
    assert seg.counts().tolist() == [1, 3, 1]
    x = np.arange(g.num_edges, dtype=float)[:, None]
    assert seg.sum(x).ravel().tolist() == [0.0, 1 + 2 + 4, 3.0]
