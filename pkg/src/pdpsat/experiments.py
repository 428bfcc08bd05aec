"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite.

Held-out sets use seeds disjoint from the training streams (those draw
instance seeds ``[train_seed, index]`` with small train seeds).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classical import DecimationConfig, SpConfig, bp_guided_decimate, reinforce_solve, sp_guided_decimate
from .engine import solve_many
from .formula import CnfFormula
from .generators import CaConfig, UniformConfig, certified_instances

HELDOUT_SEED = 9001


def heldout_uniform(count: int, alpha: float, n_range=(10, 30), seed: int = HELDOUT_SEED) -> list[CnfFormula]:
    """Certified-SAT uniform 3-SAT instances with n drawn from ``n_range``."""
    cfg = UniformConfig(n_range=tuple(n_range), alpha_range=(alpha, alpha))
    return [item["formula"] for item in certified_instances(cfg, count, alpha, seed)]


def heldout_ca(count: int, alpha: float, n: int = 60, communities: int = 6, q: float = 0.7,
               seed: int = HELDOUT_SEED) -> list[CnfFormula]:
    cfg = CaConfig(n, 3, alpha, communities, q)
    return [item["formula"] for item in certified_instances(cfg, count, alpha, seed)]


def solved_ratio(model, formulas, t_max: int = 100, replicas: int = 1, seed: int = 0) -> float:
    return float(solve_many(formulas, model, replicas=replicas, t_max=t_max, seed=seed).mean())


def classical_solved(formulas, solver: str, t_max: int = 1000, seed: int = 0) -> np.ndarray:
    """Solved flags of a classical solver, with per-instance seeds ``seed + i``."""
    out = np.zeros(len(formulas), dtype=bool)
    for i, f in enumerate(formulas):
        if solver == "sp":
            res = sp_guided_decimate(f, SpConfig(seed=seed + i))
        elif solver == "reinforce":
            res = reinforce_solve(f, t_max=t_max, seed=seed + i)
        elif solver == "bp":
            res = bp_guided_decimate(f, DecimationConfig(seed=seed + i))
        else:
            raise ValueError(f"unknown solver {solver!r}")
        out[i] = res.is_solved and f.evaluate(res.assignment)[0]
    return out


@dataclass
class PairedRun:
    run: int
    single: int
    replicated: int


@dataclass
class ReplicationResult:
    replicas: int
    runs: list[PairedRun] = field(default_factory=list)

    @property
    def never_worse(self) -> bool:
        return all(r.replicated >= r.single for r in self.runs)

    @property
    def strictly_better(self) -> int:
        return sum(r.replicated > r.single for r in self.runs)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "solved_r1", f"solved_r{self.replicas}"])
            for r in self.runs:
                w.writerow([r.run, r.single, r.replicated])


def replication_experiment(model, formulas, runs: int = 10, replicas: int = 20, t_max: int = 100,
                           seed: int = 0) -> ReplicationResult:
    """Paired runs: run r solves every formula with 1 and with R replicas, same seed."""
    out = ReplicationResult(replicas)
    for r in range(runs):
        s = seed + r
        single = int(solve_many(formulas, model, 1, t_max, s).sum())
        many = int(solve_many(formulas, model, replicas, t_max, s).sum())
        out.runs.append(PairedRun(r, single, many))
    return out


def domain_table(models: dict, alphas, count: int = 100, n: int = 60, t_max: int = 100,
                 seed: int = HELDOUT_SEED) -> list[dict]:
    """Solved ratio of each named model on held-out CA instances per alpha bucket."""
    rows = []
    for alpha in alphas:
        formulas = heldout_ca(count, alpha, n=n, seed=seed)
        for name, model in models.items():
            rows.append({"model": name, "alpha": alpha, "instances": count,
                         "solved_ratio": solved_ratio(model, formulas, t_max)})
    return rows


def write_rows(path, rows: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def read_report(path) -> dict[str, np.ndarray]:
    """Columns of a ``train_report.csv`` as float arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}
