"""Command-line interface: ``solve``, ``train``, ``generate`` and ``bench``.

Exit codes of ``solve``: 10 when every input is satisfied, 30 when at least
one is left unknown, 1 on any error. The solver never claims UNSAT.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classical import DecimationConfig, SpConfig, bp_guided_decimate, reinforce_solve, sp_guided_decimate
from .engine import RunConfig, RunResult, run
from .formula import CnfFormula, DimacsError, build_factor_graph, concat_batch, read_dimacs, replicate
from .generators import CaConfig, UniformConfig, gen_dataset
from .neural import CheckpointError, NeuralPdpModel, load_checkpoint
from .training import parse_train_config, train_stream

EXIT_SAT, EXIT_UNKNOWN, EXIT_ERROR = 10, 30, 1
SOLVERS = ("neural", "sp", "reinforce", "bp")
THREADS_ENV = "PDPSAT_THREADS"

INSTANCE_FIELDS = ["file", "n", "m", "alpha", "solver", "solved", "iterations", "seed"]
AGGREGATE_FIELDS = ["solver", "alpha_bucket", "instances", "solved", "solved_ratio", "mean_iterations"]
TIMING_FIELDS = ["file", "solver", "wall_seconds"]

log = logging.getLogger("pdpsat")


class UsageError(ValueError):
    pass


@dataclass
class SolveRequest:
    inputs: list
    solver: str = "neural"
    checkpoint: str | None = None
    t_max: int = 1000
    replicas: int = 1
    batch_size: int = 1
    seed: int = 0
    timeout: float | None = None

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise UsageError(f"unknown solver {self.solver!r}; choose from {', '.join(SOLVERS)}")
        if self.solver == "neural" and not self.checkpoint:
            raise UsageError("the neural solver needs --checkpoint")
        if self.t_max < 1 or self.replicas < 1 or self.batch_size < 1:
            raise UsageError("t_max, replicas and batch size must be >= 1")


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    return max(1, n)


def expand_inputs(paths) -> list[Path]:
    """Files as given; directories contribute their ``*.cnf`` files in sorted order."""
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(p.glob("*.cnf")))
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(f"no such input: {p}")
    return out


def instance_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def solve_one(formula: CnfFormula, solver: str, model: NeuralPdpModel | None, t_max: int,
              replicas: int, seed: int, timeout: float | None) -> RunResult:
    if formula.num_clauses == 0:
        hard = np.zeros(formula.num_variables, dtype=np.int8)
        return RunResult(np.array([True]), [0], [hard], 0, [0])
    if solver == "neural":
        graph = replicate(build_factor_graph(formula), replicas)
        return run(graph, model, RunConfig(t_max=t_max, seed=seed, timeout=timeout))
    if solver == "sp":
        return sp_guided_decimate(formula, SpConfig(seed=seed))
    if solver == "reinforce":
        return reinforce_solve(formula, t_max=t_max, seed=seed)
    if solver == "bp":
        return bp_guided_decimate(formula, DecimationConfig(seed=seed))
    raise UsageError(f"unknown solver {solver!r}")


def solve_batch(formulas: list[CnfFormula], model: NeuralPdpModel, t_max: int, replicas: int,
                seed: int, timeout: float | None) -> RunResult:
    """Neural solve of several formulas (each with R replicas) as one graph."""
    graphs = [replicate(build_factor_graph(f), replicas) for f in formulas]
    return run(concat_batch(graphs), model, RunConfig(t_max=t_max, seed=seed, timeout=timeout))


def format_result(formula: CnfFormula, solved: bool, assignment) -> list[str]:
    if solved:
        ok, _ = formula.evaluate(assignment)
        if not ok:
            raise AssertionError("solver reported a model that fails evaluation")
        lits = [str(i + 1 if v else -(i + 1)) for i, v in enumerate(assignment)]
        return ["s SATISFIABLE", "v " + " ".join(lits + ["0"])]
    return ["s UNKNOWN"]


def cmd_solve(request: SolveRequest, out=None) -> int:
    out = out or sys.stdout
    files = expand_inputs(request.inputs)
    if not files:
        raise UsageError("no input files")
    model = load_checkpoint(request.checkpoint) if request.solver == "neural" else None
    formulas = [read_dimacs(f) for f in files]
    outcomes: list[tuple[bool, np.ndarray]] = []
    if request.solver == "neural" and request.batch_size > 1:
        for start in range(0, len(formulas), request.batch_size):
            chunk = [f for f in formulas[start:start + request.batch_size] if f.num_clauses > 0]
            res = solve_batch(chunk, model, request.t_max, request.replicas, request.seed, request.timeout) \
                if chunk else None
            j = 0
            for f in formulas[start:start + request.batch_size]:
                if f.num_clauses == 0:
                    outcomes.append((True, np.zeros(f.num_variables, dtype=np.int8)))
                else:
                    outcomes.append((bool(res.solved[j]), res.assignments[j]))
                    j += 1
    else:
        for i, f in enumerate(formulas):
            res = solve_one(f, request.solver, model, request.t_max, request.replicas,
                            instance_seed(request.seed, i), request.timeout)
            outcomes.append((res.is_solved, res.assignment))
    all_sat = True
    for path, f, (solved, assignment) in zip(files, formulas, outcomes):
        print(f"c file {path}", file=out)
        for line in format_result(f, solved, assignment):
            print(line, file=out)
        all_sat &= solved
    return EXIT_SAT if all_sat else EXIT_UNKNOWN


def cmd_train(config_path, out_dir, resume: str | None = None, stop_at: int | None = None) -> int:
    config = parse_train_config(Path(config_path).read_text())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.txt").write_text(Path(config_path).read_text())
    train_stream(config, out, resume_from=resume, stop_at=stop_at)
    return 0


def cmd_generate(args) -> int:
    alphas = args.alpha
    for alpha in alphas:
        out = Path(args.out)
        if len(alphas) > 1:
            out = out / f"alpha_{alpha:.2f}"
        if args.generator == "ca":
            config = CaConfig(args.n_max, args.k, alpha, args.communities, args.modularity)
        else:
            config = UniformConfig((args.n_min, args.n_max), (args.k, args.k), (alpha, alpha))
        rows = gen_dataset(config, args.count, alpha, out, sat_filter=not args.no_filter, seed=args.seed,
                           filter_method=args.filter)
        log.info("wrote %d instances to %s", len(rows), out)
    return 0


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    timings: list = field(default_factory=list)

    def aggregates(self, decimals: int = 1) -> list[dict]:
        groups: dict = {}
        for r in self.rows:
            key = (r["solver"], round(float(r["alpha"]), decimals))
            groups.setdefault(key, []).append(r)
        out = []
        for (solver, bucket), rs in sorted(groups.items(), key=lambda kv: (SOLVERS.index(kv[0][0]), kv[0][1])):
            solved = sum(int(r["solved"]) for r in rs)
            out.append({"solver": solver, "alpha_bucket": f"{bucket:.{decimals}f}", "instances": len(rs),
                        "solved": solved, "solved_ratio": f"{solved / len(rs):.6f}",
                        "mean_iterations": f"{np.mean([int(r['iterations']) for r in rs]):.3f}"})
        return out

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, fields, rows in (("bench_instances.csv", INSTANCE_FIELDS, self.rows),
                                   ("bench_aggregate.csv", AGGREGATE_FIELDS, self.aggregates()),
                                   ("bench_timings.csv", TIMING_FIELDS, self.timings)):
            with open(out / name, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=fields)
                w.writeheader()
                w.writerows(rows)


def run_bench(inputs, solvers, t_max: int = 1000, replicas: int = 1, seed: int = 0,
              checkpoint: str | None = None, workers: int = 1, timeout: float | None = None) -> BenchReport:
    """Run each solver on each instance; rows come back in input order.

    Instance ``i`` is solved with seed ``(seed, i)`` whatever the worker
    count, so the report is identical for any ``workers``.
    """
    files = expand_inputs(inputs)
    model = load_checkpoint(checkpoint) if "neural" in solvers else None
    formulas = [read_dimacs(f) for f in files]
    tasks = [(solver, i) for solver in solvers for i in range(len(files))]

    def work(task):
        solver, i = task
        s = instance_seed(seed, i)
        t0 = time.perf_counter()
        res = solve_one(formulas[i], solver, model, t_max, replicas, s, timeout)
        if res.is_solved and not formulas[i].evaluate(res.assignment)[0]:
            raise AssertionError(f"{solver} returned an invalid model for {files[i]}")
        return res, time.perf_counter() - t0

    report = BenchReport()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for (solver, i), (res, secs) in zip(tasks, pool.map(work, tasks)):
            f = formulas[i]
            report.rows.append({
                "file": files[i].name, "n": f.num_variables, "m": f.num_clauses,
                "alpha": f"{f.num_clauses / max(f.num_variables, 1):.4f}", "solver": solver,
                "solved": int(res.is_solved), "iterations": int(res.iterations_run),
                "seed": instance_seed(seed, i),
            })
            report.timings.append({"file": files[i].name, "solver": solver, "wall_seconds": f"{secs:.4f}"})
    return report


def cmd_bench(args) -> int:
    report = run_bench(args.inputs, args.solvers, t_max=args.t_max, replicas=args.replicas, seed=args.seed,
                       checkpoint=args.checkpoint, workers=args.threads or default_threads(),
                       timeout=args.timeout)
    report.write(args.out)
    for row in report.aggregates():
        print(",".join(str(row[k]) for k in AGGREGATE_FIELDS))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdpsat", description="Propagation-decimation SAT solvers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve DIMACS files")
    p.add_argument("inputs", nargs="+", help="files or directories of .cnf files")
    p.add_argument("--solver", choices=SOLVERS, default="neural")
    p.add_argument("--checkpoint")
    p.add_argument("--t-max", type=int, default=1000)
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeout", type=float, help="wall-clock seconds per instance (neural)")

    p = sub.add_parser("train", help="train a neural model on a generated stream")
    p.add_argument("config", help="key = value training config")
    p.add_argument("out", help="output directory for checkpoints and train_report.csv")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-at", type=int, help="stop after this many steps (for staged runs)")

    p = sub.add_parser("generate", help="write a (SAT-filtered) dataset")
    p.add_argument("out")
    p.add_argument("--generator", choices=("uniform", "ca"), default="uniform")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--alpha", type=float, nargs="+", default=[4.0],
                   help="one or more clause ratios; several give one subdirectory each")
    p.add_argument("--n-min", type=int, default=10)
    p.add_argument("--n-max", type=int, default=30)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--communities", type=int, default=6)
    p.add_argument("--modularity", type=float, default=0.7)
    p.add_argument("--filter", choices=("complete", "walksat"), default="complete")
    p.add_argument("--no-filter", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="solved ratio per solver and alpha")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--solvers", nargs="+", choices=SOLVERS, default=["sp"])
    p.add_argument("--checkpoint")
    p.add_argument("--t-max", type=int, default=1000)
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeout", type=float)
    p.add_argument("--threads", type=int, help=f"worker slots (default ${THREADS_ENV} or 1)")
    p.add_argument("--out", default="bench_out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "solve":
            request = SolveRequest(args.inputs, args.solver, args.checkpoint, args.t_max, args.replicas,
                                   args.batch_size, args.seed, args.timeout)
            return cmd_solve(request)
        if args.command == "train":
            return cmd_train(args.config, args.out, args.resume, args.stop_at)
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "bench":
            if "neural" in args.solvers and not args.checkpoint:
                raise UsageError("the neural solver needs --checkpoint")
            return cmd_bench(args)
    except (UsageError, DimacsError, CheckpointError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
