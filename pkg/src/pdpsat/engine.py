"""Propagation / decimation / prediction loop over a factor graph.

A model supplies five edge- or node-level transforms; this module owns the
message state, the synchronous update order, early exit at test time and
the replication bookkeeping. Messages are ``(num_edges, h)`` arrays, or
autodiff nodes when a model records onto a tape.
"""
from __future__ import annotations

import abc
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .formula import CnfFormula, FactorGraph, build_factor_graph, concat_batch, harden, replicate
from .grad import Node


class PdpModel(abc.ABC):
    """The pluggable five-tuple of propagators, decimators and predictor.

    ``propagate_var`` computes the variable-to-clause propagator message on
    every edge (i, a) from the previous clause-to-variable decimator
    messages of ∂i minus a; ``propagate_clause`` is its clause-side mirror.
    Decimators see only the current propagator message, the edge sign and
    their own previous output on the same edge.
    """

    message_dim: int

    @abc.abstractmethod
    def propagate_var(self, graph: FactorGraph, d_clause_to_var): ...

    @abc.abstractmethod
    def propagate_clause(self, graph: FactorGraph, d_var_to_clause): ...

    @abc.abstractmethod
    def decimate_var(self, graph: FactorGraph, p_var_to_clause, d_var_to_clause_prev): ...

    @abc.abstractmethod
    def decimate_clause(self, graph: FactorGraph, p_clause_to_var, d_clause_to_var_prev): ...

    @abc.abstractmethod
    def predict(self, graph: FactorGraph, d_clause_to_var):
        """Soft assignment in (0, 1) for every variable."""


@dataclass
class MessageState:
    p_var_to_clause: object
    p_clause_to_var: object
    d_var_to_clause: object
    d_clause_to_var: object

    @property
    def h(self) -> int:
        return _value(self.d_var_to_clause).shape[1]

    def arrays(self) -> tuple:
        return tuple(_value(a) for a in
                     (self.p_var_to_clause, self.p_clause_to_var, self.d_var_to_clause, self.d_clause_to_var))


@dataclass(frozen=True)
class InitScheme:
    kind: str = "uniform"
    scale: float = 0.1

    def draw(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(-self.scale, self.scale, size=shape)
        if self.kind == "normal":
            return rng.normal(0.0, self.scale, size=shape)
        if self.kind == "zeros":
            return np.zeros(shape)
        raise ValueError(f"unknown init scheme {self.kind!r}")


@dataclass
class RunConfig:
    t_max: int = 100
    seed: int = 0
    mode: str = "test"
    init: InitScheme = field(default_factory=InitScheme)
    # explicit per-instance seeds override the (seed, instance) derivation
    instance_seeds: Sequence[int] | None = None
    timeout: float | None = None

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.mode not in ("train", "test"):
            raise ValueError("mode must be 'train' or 'test'")


@dataclass
class RunResult:
    """Outcome per source instance (replicas of one source are folded together)."""

    solved: np.ndarray
    solved_at: list
    assignments: list
    iterations_run: int
    solved_replica: list = field(default_factory=list)
    trajectory: list | None = None
    info: dict = field(default_factory=dict)

    @property
    def is_solved(self) -> bool:
        return bool(np.all(self.solved))

    @property
    def assignment(self) -> np.ndarray:
        return self.assignments[0]


def _value(x):
    return x.value if isinstance(x, Node) else x


def instance_rngs(graph: FactorGraph, seed: int, instance_seeds=None) -> list[np.random.Generator]:
    if instance_seeds is not None:
        if len(instance_seeds) != graph.num_instances:
            raise ValueError("need one seed per instance")
        return [np.random.default_rng([int(s), 0]) for s in instance_seeds]
    return [np.random.default_rng([int(seed), k]) for k in range(graph.num_instances)]


def init_messages(graph: FactorGraph, h: int, seed: int = 0, scheme: InitScheme = InitScheme(),
                  instance_seeds=None) -> MessageState:
    """Random initial messages, drawn instance by instance.

    Instance k of a batch uses the stream ``(seed, k)``, so a batch member
    gets the same initial messages as when run alone with that stream.
    """
    if h < 1:
        raise ValueError("message dimension must be >= 1")
    blocks = [[], [], [], []]
    for k, rng in enumerate(instance_rngs(graph, seed, instance_seeds)):
        n = int(graph.edge_offsets[k + 1] - graph.edge_offsets[k])
        for b in blocks:
            b.append(scheme.draw(rng, (n, h)))
    arrays = [np.concatenate(b, axis=0) if b else np.zeros((0, h)) for b in blocks]
    return MessageState(*arrays)


def step(state: MessageState, graph: FactorGraph, model: PdpModel) -> tuple[MessageState, object]:
    """One synchronous propagation, decimation and prediction pass."""
    if state.h != model.message_dim or _value(state.d_var_to_clause).shape[0] != graph.num_edges:
        raise ValueError(
            f"state shape {_value(state.d_var_to_clause).shape} does not match "
            f"graph edges {graph.num_edges} x h={model.message_dim}")
    p_v2c = model.propagate_var(graph, state.d_clause_to_var)
    p_c2v = model.propagate_clause(graph, state.d_var_to_clause)
    d_v2c = model.decimate_var(graph, p_v2c, state.d_var_to_clause)
    d_c2v = model.decimate_clause(graph, p_c2v, state.d_clause_to_var)
    soft = model.predict(graph, d_c2v)
    new = MessageState(p_v2c, p_c2v, d_v2c, d_c2v)
    for arr in new.arrays():
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite message after step")
    return new, soft


def run(graph: FactorGraph, model: PdpModel, config: RunConfig, state: MessageState | None = None) -> RunResult:
    if state is None:
        state = init_messages(graph, model.message_dim, config.seed, config.init, config.instance_seeds)

    sources, group = np.unique(graph.replica_of, return_inverse=True)
    n_src = sources.size
    solved = np.zeros(n_src, dtype=bool)
    solved_at: list = [None] * n_src
    solved_replica: list = [None] * n_src
    assignments: list = [None] * n_src
    replica_rank = np.zeros(graph.num_instances, dtype=int)
    for g in range(n_src):
        members = np.flatnonzero(group == g)
        replica_rank[members] = np.arange(members.size)

    trajectory = [] if config.mode == "train" else None
    start = time.perf_counter()
    t = 0
    hard = None
    for t in range(1, config.t_max + 1):
        state, soft = step(state, graph, model)
        if trajectory is not None:
            trajectory.append(soft)
            continue
        hard = harden(_value(soft))
        unsat = graph.unsat_counts(hard)
        for k in np.flatnonzero(unsat == 0):
            g = group[k]
            if not solved[g]:
                solved[g] = True
                solved_at[g] = t
                solved_replica[g] = int(replica_rank[k])
                assignments[g] = hard[graph.var_offsets[k]:graph.var_offsets[k + 1]].copy()
        if solved.all():
            break
        if config.timeout is not None and time.perf_counter() - start > config.timeout:
            break

    if hard is None:
        hard = harden(_value(soft))
    for g in range(n_src):
        if assignments[g] is None:
            k = int(np.flatnonzero(group == g)[0])
            assignments[g] = hard[graph.var_offsets[k]:graph.var_offsets[k + 1]].copy()
    return RunResult(
        solved=solved,
        solved_at=solved_at,
        assignments=assignments,
        iterations_run=t,
        solved_replica=solved_replica,
        trajectory=trajectory,
        info={"state": state},
    )


def run_with_replication(formula: CnfFormula, model: PdpModel, replicas: int, config: RunConfig) -> RunResult:
    """Search R independently initialised copies of one formula at once."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    graph = replicate(build_factor_graph(formula), replicas)
    cfg = RunConfig(t_max=config.t_max, seed=config.seed, mode="test", init=config.init,
                    timeout=config.timeout)
    result = run(graph, model, cfg)
    if result.is_solved:
        ok, _ = formula.evaluate(result.assignment)
        assert ok, "replica reported solved but assignment fails evaluation"
    return result


def replica_seed(seed: int, source: int, replica: int) -> int:
    """Init stream of one replica; replica 0 of a source is the same for any R."""
    return int(np.random.SeedSequence([int(seed), int(source), int(replica)]).generate_state(1)[0])


def solve_many(formulas, model: PdpModel, replicas: int = 1, t_max: int = 100, seed: int = 0,
               max_edges: int = 200_000) -> np.ndarray:
    """Solved flag per formula, running R replicas of each in memory-bounded batches.

    Source j's replica r is seeded by :func:`replica_seed` with the global
    index j, so results do not depend on how sources are chunked.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    graphs = [build_factor_graph(f) for f in formulas]
    solved = np.zeros(len(graphs), dtype=bool)
    j = 0
    while j < len(graphs):
        chunk, edges = [], 0
        while j + len(chunk) < len(graphs):
            e = graphs[j + len(chunk)].num_edges * replicas
            if chunk and edges + e > max_edges:
                break
            chunk.append(j + len(chunk))
            edges += e
        batch = concat_batch([replicate(graphs[i], replicas) for i in chunk])
        seeds = [replica_seed(seed, i, r) for i in chunk for r in range(replicas)]
        res = run(batch, model, RunConfig(t_max=t_max, instance_seeds=seeds))
        for pos, i in enumerate(chunk):
            if res.solved[pos]:
                ok, _ = formulas[i].evaluate(res.assignments[pos])
                assert ok, "reported solution fails evaluation"
            solved[i] = res.solved[pos]
        j += len(chunk)
    return solved
