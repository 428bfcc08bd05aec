"""Non-learned PDP instantiations: BP, SP and Reinforce, plus WalkSAT.

BP and SP are written as :class:`~pdpsat.engine.PdpModel` subclasses so a
single engine step is one synchronous sweep. Both use two-column messages:

* BP keeps unnormalised log-messages over the two values (x=0, x=1).
* SP's variable-to-clause message holds the "forced to violate" ratio for
  both possible signs of the variable in the receiving clause; the clause
  side picks the column matching the edge sign. Clause-to-variable
  messages are the warning survey, duplicated in both columns.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import InitScheme, MessageState, PdpModel, RunResult, init_messages, step
from .formula import CnfFormula, FactorGraph, build_factor_graph

UNSET = -1


def _log_normalize(logm: np.ndarray) -> np.ndarray:
    return logm - np.logaddexp(logm[:, :1], logm[:, 1:])


def _leave_one_out_product(values: np.ndarray, segments, tiny: float = 1e-300):
    """Per-row product of ``values`` over the row's segment, excluding the row.

    Exact zeros are counted separately so a zero factor in the row itself
    does not poison the quotient.
    """
    zero = values <= tiny
    logs = np.log(np.where(zero, 1.0, values))
    seg_log = segments.sum(logs)
    seg_zero = segments.sum(zero.astype(float))
    idx = segments.index
    rest_zero = seg_zero[idx] - zero
    rest = np.exp(seg_log[idx] - logs)
    return np.where(rest_zero > 0.5, 0.0, rest)


# -- belief propagation -------------------------------------------------------

class BpModel(PdpModel):
    """Sum-product on the measure prod_a max(c_a, eps)."""

    message_dim = 2

    def __init__(self, eps: float = 1e-9):
        self.eps = eps

    def propagate_var(self, graph, d_c2v):
        if graph.num_edges == 0:
            return d_c2v
        total = graph.var_segments.sum(d_c2v)
        return _log_normalize(total[graph.edge_var] - d_c2v)

    def propagate_clause(self, graph, d_v2c):
        if graph.num_edges == 0:
            return d_v2c
        logmu = _log_normalize(d_v2c)
        pos = graph.edge_sign > 0
        # log P(literal false) for each incoming variable
        log_false = np.where(pos, logmu[:, 0], logmu[:, 1])
        total = graph.clause_segments.sum(log_false)
        log_u = np.minimum(total[graph.edge_clause] - log_false, 0.0)
        unsat_part = np.log1p(-(1.0 - self.eps) * np.exp(log_u))
        out = np.empty_like(d_v2c)
        out[:, 1] = np.where(pos, 0.0, unsat_part)
        out[:, 0] = np.where(pos, unsat_part, 0.0)
        return out

    def decimate_var(self, graph, p, d_prev):
        return p

    def decimate_clause(self, graph, p, d_prev):
        return p

    def beliefs(self, graph, d_c2v) -> np.ndarray:
        """Normalised marginals, shape (N, 2)."""
        logb = graph.var_segments.sum(d_c2v) if graph.num_edges else np.zeros((graph.num_variables, 2))
        return np.exp(_log_normalize(logb))

    def predict(self, graph, d_c2v):
        return self.beliefs(graph, d_c2v)[:, 1]


@dataclass
class BpResult:
    marginals: np.ndarray
    converged: bool
    sweeps: int


def bp_marginals(graph: FactorGraph, max_sweeps: int = 200, epsilon: float = 1e-10,
                 eps_factor: float = 1e-9) -> BpResult:
    model = BpModel(eps_factor)
    state = init_messages(graph, 2, scheme=InitScheme("zeros"))
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        new, _ = step(state, graph, model)
        # compare messages in both directions: with the lagged schedule the
        # beliefs alone can stand still for a sweep before they have converged
        delta = max((np.max(np.abs(np.exp(a) - np.exp(b))) if a.size else 0.0)
                    for a, b in ((new.d_var_to_clause, state.d_var_to_clause),
                                 (new.d_clause_to_var, state.d_clause_to_var)))
        state = new
        if delta < epsilon:
            converged = True
            break
    return BpResult(model.beliefs(graph, state.d_clause_to_var), converged, sweeps)


@dataclass
class DecimationConfig:
    max_sweeps: int = 200
    epsilon: float = 1e-6
    eps_factor: float = 1e-9
    seed: int = 0


def bp_guided_decimate(formula: CnfFormula, config: DecimationConfig = DecimationConfig()) -> RunResult:
    """Fix the most polarised variable, unit-propagate, repeat."""
    N = formula.num_variables
    assign = np.full(N, UNSET, dtype=np.int8)
    rounds = 0
    while True:
        residual, assign, conflict = unit_propagate(formula, assign)
        if conflict:
            return _fail(formula, assign, rounds, reason="conflict")
        if residual.num_clauses == 0:
            break
        rounds += 1
        graph = build_factor_graph(residual)
        res = bp_marginals(graph, config.max_sweeps, config.epsilon, config.eps_factor)
        active = np.zeros(N, dtype=bool)
        active[graph.edge_var] = True
        polar = np.abs(res.marginals[:, 1] - res.marginals[:, 0])
        polar[~active] = -1.0
        i = int(np.argmax(polar))
        assign[i] = 1 if res.marginals[i, 1] >= res.marginals[i, 0] else 0
    return _finish(formula, assign, rounds)


# -- survey propagation -------------------------------------------------------

@dataclass
class SpConfig:
    epsilon: float = 1e-3
    max_sweeps: int = 1000
    damping: float = 0.0
    # None fixes a single variable per round
    decimation_fraction: float | None = None
    paramagnetic_threshold: float = 0.01
    max_flips: int = 100_000
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0 or self.max_sweeps < 1:
            raise ValueError("need epsilon > 0 and max_sweeps >= 1")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must be in [0, 1)")


@dataclass
class SpSurveys:
    eta: np.ndarray
    converged: bool = False
    sweeps_used: int = 0


@dataclass
class VariableBias:
    w_plus: float
    w_minus: float
    w_zero: float


def _signed_products(graph: FactorGraph, eta: np.ndarray, field: np.ndarray | None = None):
    """Leave-one-out products of (1 - eta) split by the sign of each edge.

    Returns arrays over edges: product over the other clauses of the edge's
    variable where that variable appears positively / negatively. An
    external field f_i behaves as one more clause with survey |f_i| and
    sign sign(f_i).
    """
    one_minus = 1.0 - eta
    pos = graph.edge_sign > 0
    prods = []
    for mask in (pos, ~pos):
        vals = np.where(mask, one_minus, 1.0)
        loo = _leave_one_out_product(vals, graph.var_segments)
        if field is not None:
            f = field[graph.edge_var]
            same = (f > 0) if mask is pos else (f < 0)
            loo = loo * np.where(same, 1.0 - np.abs(f), 1.0)
        prods.append(loo)
    return prods


class SpModel(PdpModel):
    """Survey propagation for SAT; damping lives in the clause-side decimator."""

    message_dim = 2

    def __init__(self, damping: float = 0.0, field: np.ndarray | None = None):
        self.damping = damping
        self.field = field

    def propagate_var(self, graph, d_c2v):
        if graph.num_edges == 0:
            return d_c2v
        prod_pos, prod_neg = _signed_products(graph, d_c2v[:, 0], self.field)
        out = np.empty((graph.num_edges, 2))
        for col, (same, opp) in enumerate(((prod_pos, prod_neg), (prod_neg, prod_pos))):
            pu = (1.0 - opp) * same
            ps = (1.0 - same) * opp
            p0 = same * opp
            den = pu + ps + p0
            out[:, col] = np.where(den > 0, pu / np.where(den > 0, den, 1.0), 0.0)
        return out

    def propagate_clause(self, graph, d_v2c):
        if graph.num_edges == 0:
            return d_v2c
        ratio = np.where(graph.edge_sign > 0, d_v2c[:, 0], d_v2c[:, 1])
        eta = _leave_one_out_product(ratio, graph.clause_segments)
        eta = np.clip(eta, 0.0, 1.0)
        return np.column_stack([eta, eta])

    def decimate_var(self, graph, p, d_prev):
        return p

    def decimate_clause(self, graph, p, d_prev):
        if self.damping == 0.0:
            return p
        return np.clip((1.0 - self.damping) * p + self.damping * d_prev, 0.0, 1.0)

    def predict(self, graph, d_c2v):
        w = sp_bias_array(graph, d_c2v[:, 0], self.field)
        return w[:, 0] + 0.5 * w[:, 2]


def _state_from_eta(graph: FactorGraph, model: "SpModel", eta: np.ndarray) -> MessageState:
    # the clause side of a step reads variable messages from the previous
    # step, so seed them from the current surveys to make one step one sweep
    e2 = np.column_stack([eta, eta])
    v2c = model.propagate_var(graph, e2)
    return MessageState(v2c, e2, v2c, e2)


def sp_sweep(graph: FactorGraph, surveys: SpSurveys, config: SpConfig = SpConfig(),
             field: np.ndarray | None = None) -> SpSurveys:
    """One synchronous SP update of every warning survey."""
    model = SpModel(config.damping, field)
    state, _ = step(_state_from_eta(graph, model, surveys.eta), graph, model)
    eta = state.d_clause_to_var[:, 0]
    delta = float(np.max(np.abs(eta - surveys.eta))) if eta.size else 0.0
    return SpSurveys(eta=eta, converged=delta < config.epsilon, sweeps_used=surveys.sweeps_used + 1)


def sp_converge(graph: FactorGraph, config: SpConfig, rng: np.random.Generator,
                field: np.ndarray | None = None) -> SpSurveys:
    surveys = SpSurveys(rng.uniform(0.0, 1.0, graph.num_edges))
    for _ in range(config.max_sweeps):
        surveys = sp_sweep(graph, surveys, config, field)
        if surveys.converged:
            break
    return surveys


def sp_bias_array(graph: FactorGraph, eta: np.ndarray, field: np.ndarray | None = None) -> np.ndarray:
    """Columns (w_plus, w_minus, w_zero) per variable."""
    N = graph.num_variables
    one_minus = 1.0 - eta
    pos = graph.edge_sign > 0
    prods = []
    for mask in (pos, ~pos):
        vals = np.where(mask, one_minus, 1.0)
        zero = vals <= 1e-300
        logs = graph.var_segments.sum(np.log(np.where(zero, 1.0, vals))) if graph.num_edges else np.zeros(N)
        nz = graph.var_segments.sum(zero.astype(float)) if graph.num_edges else np.zeros(N)
        prods.append(np.where(nz > 0.5, 0.0, np.exp(logs)))
    prod_pos, prod_neg = prods
    if field is not None:
        prod_pos = prod_pos * np.where(field > 0, 1.0 - np.abs(field), 1.0)
        prod_neg = prod_neg * np.where(field < 0, 1.0 - np.abs(field), 1.0)
    p_plus = (1.0 - prod_pos) * prod_neg
    p_minus = (1.0 - prod_neg) * prod_pos
    p_zero = prod_pos * prod_neg
    w = np.column_stack([p_plus, p_minus, p_zero])
    norm = w.sum(axis=1, keepdims=True)
    # all-zero normaliser and clause-free variables both get the flat (1/3, 1/3, 1/3)
    flat = (norm <= 0) | (graph.var_segments.counts() == 0)[:, None] if graph.num_edges else norm <= 0
    return np.where(flat, 1.0 / 3.0, w / np.where(norm > 0, norm, 1.0))


def sp_bias(graph: FactorGraph, surveys: SpSurveys) -> list[VariableBias]:
    return [VariableBias(*map(float, row)) for row in sp_bias_array(graph, surveys.eta)]


def sp_guided_decimate(formula: CnfFormula, config: SpConfig = SpConfig()) -> RunResult:
    rng = np.random.default_rng(config.seed)
    N = formula.num_variables
    assign = np.full(N, UNSET, dtype=np.int8)
    rounds = 0
    info = {"fallback": None, "sweeps": 0}
    while True:
        residual, assign, conflict = unit_propagate(formula, assign)
        if conflict:
            return _fail(formula, assign, rounds, reason="conflict", **info)
        if residual.num_clauses == 0:
            break
        rounds += 1
        graph = build_factor_graph(residual)
        surveys = sp_converge(graph, config, rng)
        info["sweeps"] += surveys.sweeps_used
        w = sp_bias_array(graph, surveys.eta)
        active = np.zeros(N, dtype=bool)
        active[graph.edge_var] = True
        certainty = np.where(active, np.abs(w[:, 0] - w[:, 1]), -1.0)
        if not surveys.converged or certainty.max() < config.paramagnetic_threshold:
            info["fallback"] = "unconverged" if not surveys.converged else "paramagnetic"
            frozen = np.flatnonzero(assign != UNSET) + 1
            ls = local_search_fallback(formula, assign, config.max_flips, int(rng.integers(2**63)),
                                       noise=config.noise, frozen=frozen)
            ls.iterations_run = rounds
            ls.info.update(info, flips=ls.info.get("flips"))
            return ls
        n_fix = 1 if config.decimation_fraction is None else max(1, math.ceil(config.decimation_fraction * active.sum()))
        for i in np.argsort(-certainty, kind="stable")[:n_fix]:
            if certainty[i] < 0:
                break
            assign[i] = 1 if w[i, 0] > w[i, 1] else 0
    return _finish(formula, assign, rounds, **info)


# -- reinforce ----------------------------------------------------------------

@dataclass
class ReinforceState:
    local_field: np.ndarray
    pi: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.pi <= 1.0:
            raise ValueError("pi must be in (0, 1]")

    @classmethod
    def zeros(cls, n: int, pi: float = 0.05) -> "ReinforceState":
        return cls(np.zeros(n), pi)


def reinforce_solve(formula: CnfFormula, state: ReinforceState | None = None, t_max: int = 1000,
                    seed: int = 0, damping: float = 0.0) -> RunResult:
    """Distributed SP: external fields replace sequential fixing.

    Each iteration is one survey sweep in which every variable carries its
    reinforcement field as an extra pseudo-clause; then each field is
    refreshed to the variable's signed bias w_plus - w_minus with
    probability pi, and all variables are read out at once.
    """
    rng = np.random.default_rng(seed)
    N = formula.num_variables
    if state is None:
        state = ReinforceState.zeros(N)
    fieldv = np.asarray(state.local_field, dtype=float).copy()
    graph = build_factor_graph(formula)
    cfg = SpConfig(damping=damping)
    surveys = SpSurveys(rng.uniform(0.0, 1.0, graph.num_edges))
    hard = np.zeros(N, dtype=np.int8)
    for t in range(1, t_max + 1):
        surveys = sp_sweep(graph, surveys, cfg, fieldv)
        w = sp_bias_array(graph, surveys.eta, fieldv)
        bias = w[:, 0] - w[:, 1]
        refresh = rng.random(N) < state.pi
        fieldv = np.where(refresh, bias, fieldv)
        if not np.all(np.isfinite(fieldv)):
            raise FloatingPointError("non-finite reinforcement field")
        readout = np.where(fieldv != 0, fieldv, bias)
        hard = (readout >= 0).astype(np.int8)
        ok, _ = formula.evaluate(hard)
        if ok:
            return RunResult(np.array([True]), [t], [hard], t, [0], info={"field": fieldv})
    return RunResult(np.array([False]), [None], [hard], t_max, [None], info={"field": fieldv})


# -- simplification and local search -----------------------------------------

def unit_propagate(formula: CnfFormula, partial) -> tuple[CnfFormula, np.ndarray, bool]:
    """Simplify under a partial assignment (-1 = unset) until no unit clause remains."""
    assign = np.array(partial, dtype=np.int8, copy=True)
    if assign.shape != (formula.num_variables,):
        raise ValueError("partial assignment length mismatch")
    clauses = list(formula.clauses)
    while True:
        reduced = []
        units = []
        for clause in clauses:
            lits = []
            satisfied = False
            for lit in clause:
                v = assign[abs(lit) - 1]
                if v == UNSET:
                    lits.append(lit)
                elif (v == 1) == (lit > 0):
                    satisfied = True
                    break
            if satisfied:
                continue
            if not lits:
                return CnfFormula(formula.num_variables, tuple(reduced)), assign, True
            if len(lits) == 1:
                units.append(lits[0])
            reduced.append(tuple(lits))
        if not units:
            return CnfFormula(formula.num_variables, tuple(reduced)), assign, False
        for lit in units:
            v = abs(lit) - 1
            want = 1 if lit > 0 else 0
            if assign[v] != UNSET and assign[v] != want:
                return CnfFormula(formula.num_variables, tuple(reduced)), assign, True
            assign[v] = want
        clauses = reduced


def local_search_fallback(formula: CnfFormula, partial, max_flips: int = 100_000, seed: int = 0,
                          noise: float = 0.5, frozen=()) -> RunResult:
    """WalkSAT from the partial assignment completed at random.

    Variables listed (1-based) in ``frozen`` keep their value; everything
    else may flip. Picks a random unsatisfied clause, flips a zero-break
    variable if one exists, otherwise a random one with probability
    ``noise`` and the least-breaking one otherwise.
    """
    rng = np.random.default_rng(seed)
    N = formula.num_variables
    partial = np.asarray(partial)
    x = np.where(partial == UNSET, rng.integers(0, 2, N), partial).astype(np.int8)
    is_frozen = np.zeros(N + 1, dtype=bool)
    is_frozen[np.asarray(list(frozen), dtype=int)] = True

    clauses = formula.clauses
    occ: list[list[int]] = [[] for _ in range(N + 1)]
    for a, clause in enumerate(clauses):
        for lit in clause:
            occ[abs(lit)].append(a)
    xs = [0] + x.tolist()

    def lit_true(lit):
        return (xs[abs(lit)] == 1) == (lit > 0)

    ntrue = [sum(lit_true(l) for l in c) for c in clauses]
    unsat = [a for a, n in enumerate(ntrue) if n == 0]
    pos = {a: k for k, a in enumerate(unsat)}

    def remove(a):
        k = pos.pop(a)
        last = unsat.pop()
        if last != a:
            unsat[k] = last
            pos[last] = k

    def add(a):
        pos[a] = len(unsat)
        unsat.append(a)

    def break_count(v):
        b = 0
        for a in occ[v]:
            if ntrue[a] == 1:
                for lit in clauses[a]:
                    if abs(lit) == v:
                        if lit_true(lit):
                            b += 1
                        break
        return b

    flips = 0
    while unsat and flips < max_flips:
        a = unsat[int(rng.integers(len(unsat)))]
        cands = [abs(l) for l in clauses[a] if not is_frozen[abs(l)]]
        if not cands:
            break
        breaks = [break_count(v) for v in cands]
        if 0 in breaks:
            v = cands[breaks.index(0)]
        elif rng.random() < noise:
            v = cands[int(rng.integers(len(cands)))]
        else:
            best = min(breaks)
            ties = [c for c, b in zip(cands, breaks) if b == best]
            v = ties[int(rng.integers(len(ties)))]
        xs[v] ^= 1
        flips += 1
        for b in occ[v]:
            lit = next(l for l in clauses[b] if abs(l) == v)
            if lit_true(lit):
                ntrue[b] += 1
                if ntrue[b] == 1:
                    remove(b)
            else:
                ntrue[b] -= 1
                if ntrue[b] == 0:
                    add(b)

    hard = np.array(xs[1:], dtype=np.int8)
    ok = not unsat
    if ok:
        assert formula.evaluate(hard)[0]
    return RunResult(np.array([ok]), [flips if ok else None], [hard], flips, [0 if ok else None],
                     info={"flips": flips})


def _complete(assign: np.ndarray) -> np.ndarray:
    return np.where(assign == UNSET, 0, assign).astype(np.int8)


def _finish(formula, assign, rounds, **info) -> RunResult:
    hard = _complete(assign)
    ok, _ = formula.evaluate(hard)
    return RunResult(np.array([ok]), [rounds if ok else None], [hard], rounds, [0 if ok else None], info=info)


def _fail(formula, assign, rounds, **info) -> RunResult:
    return RunResult(np.array([False]), [None], [_complete(assign)], rounds, [None], info=info)
