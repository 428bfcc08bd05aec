"""Train the desk-scale models, one output directory per config.

    python scripts/train_desk.py configs/uniform_desk.txt configs/ca_desk.txt configs/uniform_n60.txt

Each run writes ``artifacts/<config name>/`` with checkpoints, ``latest.pdp``
and ``train_report.csv``; an interrupted run resumes from ``latest.pdp``.
"""
import argparse
import logging
from pathlib import Path

from pdpsat.cli import cmd_train


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("configs", nargs="+", type=Path)
    parser.add_argument("--out", type=Path, default=Path("artifacts"))
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for cfg in args.configs:
        out = args.out / cfg.stem
        latest = out / "latest.pdp"
        cmd_train(cfg, out, resume=str(latest) if latest.exists() else None)


if __name__ == "__main__":
    main()
