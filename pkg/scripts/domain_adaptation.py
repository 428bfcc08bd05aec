"""Compare CA-trained and uniform-trained models on held-out CA instances per alpha."""
import argparse
from pathlib import Path

from pdpsat.experiments import domain_table, write_rows
from pdpsat.neural import load_checkpoint


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--ca", default="artifacts/ca_desk/latest.pdp")
    parser.add_argument("--uniform", default="artifacts/uniform_n60/latest.pdp")
    parser.add_argument("--alphas", type=float, nargs="+", default=[3.0, 3.5, 4.0])
    parser.add_argument("--count", type=int, default=100)
    parser.add_argument("--n", type=int, default=60)
    parser.add_argument("--t-max", type=int, default=100)
    parser.add_argument("--out", type=Path, default=Path("artifacts/domain_adaptation.csv"))
    args = parser.parse_args()
    models = {"ca": load_checkpoint(args.ca), "uniform": load_checkpoint(args.uniform)}
    rows = domain_table(models, args.alphas, args.count, args.n, args.t_max)
    write_rows(args.out, rows)
    for row in rows:
        print(f"{row['model']:8s} alpha {row['alpha']:.2f}  solved {row['solved_ratio']:.3f}")


if __name__ == "__main__":
    main()
