"""CNF formulas, DIMACS I/O and signed factor graphs.

Clauses are stored DIMACS-style as tuples of nonzero signed ints; the
factor graph flattens them into per-edge arrays so message passing can be
vectorised over edges.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class DimacsError(ValueError):
    pass


@dataclass(frozen=True)
class CnfFormula:
    num_variables: int
    clauses: tuple[tuple[int, ...], ...]
    provenance: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.num_variables < 0:
            raise ValueError("num_variables must be nonnegative")
        cleaned = []
        for clause in self.clauses:
            clause = normalize_clause(clause)
            if clause is None:
                raise ValueError("tautological clause; use from_clauses to drop it")
            if not clause:
                raise ValueError("empty clause")
            for lit in clause:
                if abs(lit) > self.num_variables:
                    raise ValueError(f"literal {lit} exceeds N={self.num_variables}")
            cleaned.append(clause)
        object.__setattr__(self, "clauses", tuple(cleaned))

    @classmethod
    def from_clauses(cls, num_variables: int, clauses: Iterable[Iterable[int]], **provenance) -> "CnfFormula":
        """Build a formula, deduplicating literals and dropping tautologies."""
        kept = []
        dropped = 0
        for clause in clauses:
            c = normalize_clause(clause)
            if c is None:
                dropped += 1
                continue
            kept.append(c)
        if dropped:
            provenance.setdefault("tautologies_dropped", dropped)
        return cls(num_variables, tuple(kept), dict(provenance))

    @property
    def num_clauses(self) -> int:
        return len(self.clauses)

    @property
    def alpha(self) -> float:
        return self.num_clauses / self.num_variables if self.num_variables else float("nan")

    def evaluate(self, hard) -> tuple[bool, list[int]]:
        return evaluate(self, hard)


def normalize_clause(clause: Iterable[int]) -> tuple[int, ...] | None:
    """Deduplicate literals preserving first occurrence; None for a tautology."""
    seen: dict[int, int] = {}
    for lit in clause:
        lit = int(lit)
        if lit == 0:
            raise ValueError("literal 0 is not allowed inside a clause")
        var = abs(lit)
        if var in seen:
            if seen[var] != lit:
                return None
            continue
        seen[var] = lit
    return tuple(seen.values())


def parse_dimacs(data: bytes | str | io.IOBase) -> CnfFormula:
    if hasattr(data, "read"):
        data = data.read()
    if isinstance(data, bytes):
        data = data.decode("ascii", errors="strict")

    header = None
    clauses: list[list[int]] = []
    current: list[int] = []
    for lineno, raw in enumerate(data.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("c") or line.startswith("%"):
            continue
        if line.startswith("p"):
            parts = line.split()
            if header is not None:
                raise DimacsError(f"line {lineno}: duplicate header")
            if len(parts) != 4 or parts[1] != "cnf":
                raise DimacsError(f"line {lineno}: malformed header {line!r}")
            try:
                header = (int(parts[2]), int(parts[3]))
            except ValueError:
                raise DimacsError(f"line {lineno}: malformed header {line!r}") from None
            if header[0] < 0 or header[1] < 0:
                raise DimacsError(f"line {lineno}: negative counts in header")
            continue
        if header is None:
            raise DimacsError(f"line {lineno}: clause before header")
        for tok in line.split():
            try:
                lit = int(tok)
            except ValueError:
                raise DimacsError(f"line {lineno}: bad token {tok!r}") from None
            if lit == 0:
                if not current:
                    raise DimacsError(f"line {lineno}: empty clause (trivially UNSAT input)")
                clauses.append(current)
                current = []
            else:
                if abs(lit) > header[0]:
                    raise DimacsError(f"line {lineno}: literal {lit} exceeds N={header[0]}")
                current.append(lit)
    if header is None:
        raise DimacsError("missing 'p cnf' header")
    if current:
        raise DimacsError("last clause is not terminated by 0")
    formula = CnfFormula.from_clauses(header[0], clauses)
    formula.provenance["declared_clauses"] = header[1]
    return formula


def read_dimacs(path) -> CnfFormula:
    with open(path, "rb") as fh:
        formula = parse_dimacs(fh.read())
    formula.provenance.setdefault("path", str(path))
    return formula


def write_dimacs(formula: CnfFormula, comments: Sequence[str] = ()) -> bytes:
    out = [f"c {c}" for c in comments]
    out.append(f"p cnf {formula.num_variables} {formula.num_clauses}")
    out.extend(" ".join(map(str, clause)) + " 0" for clause in formula.clauses)
    return ("\n".join(out) + "\n").encode("ascii")


def evaluate(formula: CnfFormula, hard) -> tuple[bool, list[int]]:
    hard = np.asarray(hard)
    if hard.shape != (formula.num_variables,):
        raise ValueError(f"assignment has length {hard.size}, expected {formula.num_variables}")
    unsat = []
    for a, clause in enumerate(formula.clauses):
        if not any((hard[abs(l) - 1] == 1) == (l > 0) for l in clause):
            unsat.append(a)
    return not unsat, unsat


def harden(soft) -> np.ndarray:
    """Threshold soft assignments at 0.5 (ties go to 1)."""
    return (np.asarray(soft).reshape(-1) >= 0.5).astype(np.int8)


class Segments:
    """Row index -> segment map with a cached sparse summation matrix."""

    def __init__(self, index: np.ndarray, num_segments: int):
        self.index = np.asarray(index, dtype=np.int64)
        self.num_segments = int(num_segments)
        n = self.index.size
        self.matrix = sp.csr_matrix(
            (np.ones(n), (self.index, np.arange(n))), shape=(self.num_segments, n)
        )

    def sum(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix @ x)

    def counts(self) -> np.ndarray:
        return np.bincount(self.index, minlength=self.num_segments)


@dataclass(eq=False)
class FactorGraph:
    """Bipartite variable/clause graph; one row per (variable, clause) edge.

    Variables and clauses are 0-based here. ``var_offsets`` etc. delimit the
    instances of a batched graph; ``replica_of`` maps each instance to the
    source instance it replicates (itself when not replicated).
    """

    num_variables: int
    num_clauses: int
    edge_var: np.ndarray
    edge_clause: np.ndarray
    edge_sign: np.ndarray
    var_offsets: np.ndarray
    clause_offsets: np.ndarray
    edge_offsets: np.ndarray
    replica_of: np.ndarray

    @property
    def num_edges(self) -> int:
        return int(self.edge_var.size)

    @property
    def num_instances(self) -> int:
        return int(self.var_offsets.size - 1)

    @cached_property
    def var_segments(self) -> Segments:
        return Segments(self.edge_var, self.num_variables)

    @cached_property
    def clause_segments(self) -> Segments:
        return Segments(self.edge_clause, self.num_clauses)

    @cached_property
    def var_instance(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_instances), np.diff(self.var_offsets))

    @cached_property
    def clause_instance(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_instances), np.diff(self.clause_offsets))

    @cached_property
    def edge_instance(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_instances), np.diff(self.edge_offsets))

    def var_edges(self, i: int) -> np.ndarray:
        """Edge ids incident to variable i (the set written as ∂i)."""
        return np.flatnonzero(self.edge_var == i)

    def clause_edges(self, a: int) -> np.ndarray:
        return np.flatnonzero(self.edge_clause == a)

    def unsat_counts(self, hard: np.ndarray) -> np.ndarray:
        """Number of violated clauses per instance under a hard assignment."""
        lit_true = (hard[self.edge_var] == 1) == (self.edge_sign > 0)
        clause_sat = np.bincount(self.edge_clause, weights=lit_true, minlength=self.num_clauses) > 0
        return np.bincount(self.clause_instance, weights=~clause_sat, minlength=self.num_instances).astype(int)

    def instance(self, k: int) -> "FactorGraph":
        """Extract instance k as a standalone single-instance graph."""
        v0, v1 = self.var_offsets[k], self.var_offsets[k + 1]
        c0, c1 = self.clause_offsets[k], self.clause_offsets[k + 1]
        e0, e1 = self.edge_offsets[k], self.edge_offsets[k + 1]
        return FactorGraph(
            num_variables=int(v1 - v0),
            num_clauses=int(c1 - c0),
            edge_var=self.edge_var[e0:e1] - v0,
            edge_clause=self.edge_clause[e0:e1] - c0,
            edge_sign=self.edge_sign[e0:e1].copy(),
            var_offsets=np.array([0, v1 - v0]),
            clause_offsets=np.array([0, c1 - c0]),
            edge_offsets=np.array([0, e1 - e0]),
            replica_of=np.array([0]),
        )


def build_factor_graph(formula: CnfFormula) -> FactorGraph:
    edge_var, edge_clause, edge_sign = [], [], []
    for a, clause in enumerate(formula.clauses):
        for lit in clause:
            edge_var.append(abs(lit) - 1)
            edge_clause.append(a)
            edge_sign.append(1.0 if lit > 0 else -1.0)
    E = len(edge_var)
    return FactorGraph(
        num_variables=formula.num_variables,
        num_clauses=formula.num_clauses,
        edge_var=np.array(edge_var, dtype=np.int64),
        edge_clause=np.array(edge_clause, dtype=np.int64),
        edge_sign=np.array(edge_sign, dtype=np.float64),
        var_offsets=np.array([0, formula.num_variables]),
        clause_offsets=np.array([0, formula.num_clauses]),
        edge_offsets=np.array([0, E]),
        replica_of=np.array([0]),
    )


def concat_batch(graphs: Sequence[FactorGraph]) -> FactorGraph:
    if not graphs:
        raise ValueError("concat_batch needs at least one graph")
    ev, ec, es = [], [], []
    vo, co, eo, rep = [0], [0], [0], []
    for g in graphs:
        base_v, base_c, base_inst = vo[-1], co[-1], len(rep)
        ev.append(g.edge_var + base_v)
        ec.append(g.edge_clause + base_c)
        es.append(g.edge_sign)
        vo.extend((g.var_offsets[1:] + base_v).tolist())
        co.extend((g.clause_offsets[1:] + base_c).tolist())
        eo.extend((g.edge_offsets[1:] + eo[-1]).tolist())
        rep.extend((g.replica_of + base_inst).tolist())
    return FactorGraph(
        num_variables=int(vo[-1]),
        num_clauses=int(co[-1]),
        edge_var=np.concatenate(ev),
        edge_clause=np.concatenate(ec),
        edge_sign=np.concatenate(es),
        var_offsets=np.array(vo),
        clause_offsets=np.array(co),
        edge_offsets=np.array(eo),
        replica_of=np.array(rep),
    )


def replicate(graph: FactorGraph, replicas: int) -> FactorGraph:
    """Concatenate R copies of a single-instance graph, all mapped to source 0."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    if graph.num_instances != 1:
        raise ValueError("replicate expects a single-instance graph")
    out = concat_batch([graph] * replicas)
    out.replica_of = np.zeros(replicas, dtype=np.int64)
    return out
