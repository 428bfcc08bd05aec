"""Solved ratio against clause density for the classical solvers (and a model).

Writes one certified-SAT dataset per alpha and runs ``pdpsat bench`` on it.
"""
import argparse
from pathlib import Path

from pdpsat.cli import run_bench
from pdpsat.generators import UniformConfig, gen_dataset


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--alphas", type=float, nargs="+", default=[2.0, 2.5, 3.0, 3.5, 4.0])
    parser.add_argument("--n", type=int, default=50)
    parser.add_argument("--count", type=int, default=50)
    parser.add_argument("--solvers", nargs="+", default=["sp", "reinforce", "bp"])
    parser.add_argument("--checkpoint")
    parser.add_argument("--t-max", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=Path("artifacts/alpha_sweep"))
    args = parser.parse_args()
    dirs = []
    for alpha in args.alphas:
        d = args.out / "data" / f"alpha_{alpha:.2f}"
        if not (d / "manifest.csv").exists():
            gen_dataset(UniformConfig(n_range=(args.n, args.n)), args.count, alpha, d, seed=args.seed)
        dirs.append(d)
    report = run_bench(dirs, args.solvers, t_max=args.t_max, seed=args.seed, checkpoint=args.checkpoint)
    report.write(args.out)
    for row in report.aggregates():
        print(f"{row['solver']:10s} alpha {row['alpha_bucket']}  solved {row['solved_ratio']}")


if __name__ == "__main__":
    main()
