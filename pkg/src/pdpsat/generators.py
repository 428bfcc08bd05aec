"""Random instance generators, modularity, training streams and datasets."""
from __future__ import annotations

import csv
import itertools
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .formula import CnfFormula, write_dimacs


@dataclass(frozen=True)
class UniformConfig:
    n_range: tuple[int, int] = (4, 30)
    k_range: tuple[int, int] = (3, 3)
    alpha_range: tuple[float, float] = (2.0, 4.0)

    def __post_init__(self):
        for lo, hi in (self.n_range, self.k_range, self.alpha_range):
            if lo > hi:
                raise ValueError("empty range")
        if self.k_range[0] < 2:
            raise ValueError("k_min must be >= 2")
        if self.n_range[0] < self.k_range[1]:
            raise ValueError("n_min must be >= k_max")


@dataclass(frozen=True)
class CaConfig:
    n: int
    k: int
    alpha: float
    communities: int
    modularity: float

    def __post_init__(self):
        if self.communities < 2:
            raise ValueError("need at least 2 communities")
        if not 0.0 < self.modularity < 1.0 or self.modularity + 1.0 / self.communities > 1.0:
            raise ValueError("need 0 < Q and Q + 1/c <= 1")
        if self.n < self.communities * self.k:
            raise ValueError("n must be >= c*k so every community can host a clause")
        if self.k > self.communities:
            raise ValueError("inter-community clauses need k <= c")

    @property
    def intra_probability(self) -> float:
        return self.modularity + 1.0 / self.communities


@dataclass(frozen=True)
class CaStreamConfig:
    n_range: tuple[int, int] = (20, 60)
    k_range: tuple[int, int] = (3, 3)
    alpha_range: tuple[float, float] = (2.0, 4.0)
    c_range: tuple[int, int] = (6, 6)
    q_range: tuple[float, float] = (0.7, 0.7)


def gen_uniform(n: int, k: int, m: int, seed) -> CnfFormula:
    """m clauses of k distinct variables, each literal negated with prob 1/2."""
    if k > n:
        raise ValueError(f"clause size {k} exceeds {n} variables")
    rng = np.random.default_rng(seed)
    clauses = []
    for _ in range(m):
        vars_ = rng.choice(n, size=k, replace=False) + 1
        signs = np.where(rng.random(k) < 0.5, -1, 1)
        clauses.append(tuple(int(v) for v in vars_ * signs))
    return CnfFormula(n, tuple(clauses), {"generator": "uniform", "k": k, "alpha": m / n, "seed": seed})


def _partition(n: int, c: int) -> np.ndarray:
    """Near-equal contiguous communities, ids 1..c."""
    return np.repeat(np.arange(1, c + 1), [n // c + (j < n % c) for j in range(c)])


def gen_ca(config: CaConfig, seed) -> tuple[CnfFormula, np.ndarray]:
    """Community Attachment: intra-community clause with prob Q + 1/c."""
    rng = np.random.default_rng(seed)
    n, k, c = config.n, config.k, config.communities
    part = _partition(n, c)
    members = [np.flatnonzero(part == j) + 1 for j in range(1, c + 1)]
    m = int(round(config.alpha * n))
    p = config.intra_probability
    clauses = []
    for _ in range(m):
        if rng.random() < p:
            com = members[int(rng.integers(c))]
            vars_ = rng.choice(com, size=k, replace=False)
        else:
            coms = rng.choice(c, size=k, replace=False)
            vars_ = np.array([members[j][int(rng.integers(members[j].size))] for j in coms])
        signs = np.where(rng.random(k) < 0.5, -1, 1)
        clauses.append(tuple(int(v) for v in vars_ * signs))
    prov = {"generator": "ca", "k": k, "alpha": m / n, "communities": c,
            "Q_target": config.modularity, "partition": part, "seed": seed}
    return CnfFormula(n, tuple(clauses), prov), part


def modularity(formula: CnfFormula, partition) -> float:
    """Weighted modularity of the variable incidence graph.

    Each clause of size k contributes a clique with edge weight 1/C(k, 2).
    """
    part = np.asarray(partition)
    if part.shape != (formula.num_variables,):
        raise ValueError("partition must assign every variable")
    W = 0.0
    w_in: Counter = Counter()
    strength: Counter = Counter()
    for clause in formula.clauses:
        k = len(clause)
        if k < 2:
            continue
        w = 1.0 / (k * (k - 1) / 2)
        for u, v in itertools.combinations(clause, 2):
            cu, cv = part[abs(u) - 1], part[abs(v) - 1]
            W += w
            strength[cu] += w
            strength[cv] += w
            if cu == cv:
                w_in[cu] += w
    if W == 0:
        return 0.0
    return float(sum(w_in[c] / W - (strength[c] / (2 * W)) ** 2 for c in strength))


def stream(config, seed, start: int = 0) -> Iterator[CnfFormula]:
    """Endless formulas with per-instance (n, k, alpha) drawn from the ranges.

    Instance ``index`` depends only on (seed, index), so a stream can be
    resumed from any position with ``start``.
    """
    for index in itertools.count(start):
        rng = np.random.default_rng([int(seed), index, 1])
        n = int(rng.integers(config.n_range[0], config.n_range[1] + 1))
        k = int(rng.integers(config.k_range[0], config.k_range[1] + 1))
        alpha = float(rng.uniform(*config.alpha_range))
        sub = [int(seed), index]
        if isinstance(config, CaStreamConfig):
            c = int(rng.integers(config.c_range[0], config.c_range[1] + 1))
            q = float(rng.uniform(*config.q_range))
            c = max(k, min(c, n // k))
            q = min(q, 1.0 - 1.0 / c)
            yield gen_ca(CaConfig(n, k, alpha, c, q), sub)[0]
        else:
            yield gen_uniform(n, k, max(1, int(round(alpha * n))), sub)


# -- satisfiability certification --------------------------------------------

class BudgetExceeded(RuntimeError):
    pass


def dpll(formula: CnfFormula, max_decisions: int = 1_000_000) -> np.ndarray | None:
    """Complete DPLL search; a model as a 0/1 array, or None if UNSAT."""
    N = formula.num_variables
    decisions = 0

    def simplify(clauses, lit):
        out = []
        for c in clauses:
            if lit in c:
                continue
            if -lit in c:
                c = tuple(l for l in c if l != -lit)
                if not c:
                    return None
            out.append(c)
        return out

    def search(clauses, assigned):
        nonlocal decisions
        while True:
            unit = next((c[0] for c in clauses if len(c) == 1), None)
            if unit is None:
                break
            assigned = assigned + [unit]
            clauses = simplify(clauses, unit)
            if clauses is None:
                return None
        if not clauses:
            return assigned
        decisions += 1
        if decisions > max_decisions:
            raise BudgetExceeded("DPLL decision budget exhausted")
        shortest = min(len(c) for c in clauses)
        counts = Counter(l for c in clauses if len(c) == shortest for l in c)
        lit = max(counts, key=lambda l: (counts[l] + counts.get(-l, 0), l))
        for choice in (lit, -lit):
            reduced = simplify(clauses, choice)
            if reduced is not None:
                got = search(reduced, assigned + [choice])
                if got is not None:
                    return got
        return None

    lits = search([tuple(c) for c in formula.clauses], [])
    if lits is None:
        return None
    x = np.zeros(N, dtype=np.int8)
    for l in lits:
        x[abs(l) - 1] = 1 if l > 0 else 0
    assert formula.evaluate(x)[0]
    return x


def brute_force_models(formula: CnfFormula) -> np.ndarray:
    """All satisfying assignments by exhaustive enumeration (small N only)."""
    N = formula.num_variables
    if N > 22:
        raise ValueError("exhaustive enumeration limited to N <= 22")
    X = ((np.arange(2**N)[:, None] >> np.arange(N)) & 1).astype(np.int8)
    ok = np.ones(2**N, dtype=bool)
    for clause in formula.clauses:
        sat = np.zeros(2**N, dtype=bool)
        for lit in clause:
            sat |= X[:, abs(lit) - 1] == (1 if lit > 0 else 0)
        ok &= sat
    return X[ok]


# -- datasets -----------------------------------------------------------------

MANIFEST_FIELDS = ["filename", "n", "m", "k", "alpha", "generator", "Q_target", "Q_measured",
                   "sat_certified", "seed"]


def _draw(config, alpha: float, rng, inst_seed):
    if isinstance(config, CaConfig):
        cfg = CaConfig(config.n, config.k, alpha, config.communities, config.modularity)
        formula, part = gen_ca(cfg, inst_seed)
        return formula, cfg.k, modularity(formula, part)
    n = int(rng.integers(config.n_range[0], config.n_range[1] + 1))
    k = int(rng.integers(config.k_range[0], config.k_range[1] + 1))
    return gen_uniform(n, k, int(round(alpha * n)), inst_seed), k, None


def certified_instances(config, count: int, alpha: float, seed: int = 0, sat_filter: bool = True,
                        filter_method: str = "complete", max_decisions: int = 200_000,
                        max_attempts: int | None = None) -> Iterator[dict]:
    """Yield ``count`` instances that pass the SAT filter, with their witnesses.

    Each item is a dict with ``formula``, ``k``, ``q_measured``, ``witness``,
    ``certified`` and ``seed``. ``complete`` certification uses DPLL and
    refuses when its budget runs out; ``walksat`` accepts any instance that
    local search solves.
    """
    from .classical import local_search_fallback

    rng = np.random.default_rng([seed, 7])
    limit = max_attempts or 50 * count
    attempts = produced = 0
    while produced < count:
        attempts += 1
        if attempts > limit:
            raise RuntimeError(f"only {produced} of {count} instances passed the SAT filter")
        inst_seed = [int(seed), attempts]
        formula, k, q_meas = _draw(config, alpha, rng, inst_seed)
        witness, certified = None, "no"
        if sat_filter:
            if filter_method == "complete":
                try:
                    witness = dpll(formula, max_decisions)
                except BudgetExceeded:
                    raise RuntimeError(
                        f"cannot certify n={formula.num_variables} instance within the complete-search "
                        "budget; use filter_method='walksat' to accept solver-found models") from None
                if witness is None:
                    continue
                certified = "complete"
            elif filter_method == "walksat":
                res = local_search_fallback(formula, np.full(formula.num_variables, -1), 100_000, seed=attempts)
                if not res.is_solved:
                    continue
                witness, certified = res.assignment, "walksat"
            else:
                raise ValueError(f"unknown filter method {filter_method!r}")
        produced += 1
        yield {"formula": formula, "k": k, "q_measured": q_meas, "witness": witness,
               "certified": certified, "seed": inst_seed}


def gen_dataset(config, count: int, alpha: float, out_dir, sat_filter: bool = True, seed: int = 0,
                filter_method: str = "complete", max_decisions: int = 200_000,
                max_attempts: int | None = None) -> list[dict]:
    """Write ``count`` DIMACS files plus ``manifest.csv`` into ``out_dir``.

    ``config`` is a :class:`UniformConfig` (n and k drawn from its ranges)
    or a :class:`CaConfig` (alpha overridden). Filtering is as in
    :func:`certified_instances`; witnesses go to a ``.sol`` file next to
    each instance.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for item in certified_instances(config, count, alpha, seed, sat_filter, filter_method, max_decisions,
                                    max_attempts):
        formula, witness = item["formula"], item["witness"]
        gen = formula.provenance["generator"]
        n = formula.num_variables
        name = f"{gen}_a{alpha:.2f}_{len(rows):04d}.cnf"
        (out / name).write_bytes(write_dimacs(formula, comments=[f"generator {gen} seed {item['seed']}"]))
        if witness is not None:
            lits = [str(i + 1 if v else -(i + 1)) for i, v in enumerate(witness)]
            (out / (name[:-4] + ".sol")).write_text("v " + " ".join(lits) + " 0\n")
        q = item["q_measured"]
        rows.append({
            "filename": name, "n": n, "m": formula.num_clauses, "k": item["k"],
            "alpha": round(formula.num_clauses / n, 6), "generator": gen,
            "Q_target": config.modularity if gen == "ca" else "",
            "Q_measured": "" if q is None else round(q, 6),
            "sat_certified": item["certified"], "seed": f"{item['seed'][0]}:{item['seed'][1]}",
        })
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return rows


def read_witness(path) -> np.ndarray:
    lits = [int(t) for t in Path(path).read_text().split()[1:] if t != "0"]
    return np.array([1 if l > 0 else 0 for l in sorted(lits, key=abs)], dtype=np.int8)
