"""Paired R=1 vs R=R replication runs of a trained model on N=50 instances."""
import argparse
from pathlib import Path

from pdpsat.experiments import heldout_uniform, replication_experiment
from pdpsat.neural import load_checkpoint


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--checkpoint", default="artifacts/uniform_desk/latest.pdp")
    parser.add_argument("--n", type=int, default=50)
    parser.add_argument("--alpha", type=float, default=4.0)
    parser.add_argument("--count", type=int, default=100)
    parser.add_argument("--runs", type=int, default=10)
    parser.add_argument("--replicas", type=int, default=20)
    parser.add_argument("--t-max", type=int, default=100)
    parser.add_argument("--out", type=Path, default=Path("artifacts/replication.csv"))
    args = parser.parse_args()
    model = load_checkpoint(args.checkpoint)
    formulas = heldout_uniform(args.count, args.alpha, n_range=(args.n, args.n), seed=707)
    res = replication_experiment(model, formulas, args.runs, args.replicas, args.t_max)
    res.write(args.out)
    for r in res.runs:
        print(f"run {r.run}: R=1 {r.single}  R={args.replicas} {r.replicated}")
    print(f"never worse: {res.never_worse}, strictly better in {res.strictly_better}/{args.runs} runs")


if __name__ == "__main__":
    main()
