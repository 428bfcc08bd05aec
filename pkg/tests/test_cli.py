import csv
import subprocess
import sys

import numpy as np
import pytest

from pdpsat.cli import (EXIT_ERROR, EXIT_SAT, EXIT_UNKNOWN, SolveRequest, UsageError, main, run_bench)
from pdpsat.formula import CnfFormula, parse_dimacs, write_dimacs
from pdpsat.generators import UniformConfig, gen_dataset, gen_uniform
from pdpsat.neural import init_model, save_checkpoint


def _write(path, formula):
    path.write_bytes(write_dimacs(formula))
    return path


def _blocks(text):
    blocks, cur = [], None
    for line in text.splitlines():
        if line.startswith("c file"):
            cur = [line]
            blocks.append(cur)
        elif cur is not None:
            cur.append(line)
    return blocks


@pytest.mark.parametrize("solver", ["sp", "reinforce", "bp", "neural"])
def test_solve_trivial_sat(tmp_path, capsys, solver):
    f = CnfFormula(3, ((1,), (-2,), (1, 3)))
    path = _write(tmp_path / "a.cnf", f)
    args = ["solve", str(path), "--solver", solver, "--t-max", "50"]
    if solver == "neural":
        # an untrained model still meets the output contract
        save_checkpoint(init_model(4), tmp_path / "m.pdp")
        args += ["--checkpoint", str(tmp_path / "m.pdp")]
    code = main(args)
    out = capsys.readouterr().out.splitlines()
    if code == EXIT_SAT:
        assert out[1] == "s SATISFIABLE"
        lits = [int(t) for t in out[2].split()[1:]]
        assert lits[-1] == 0
        x = np.array([1 if l > 0 else 0 for l in lits[:-1]])
        assert f.evaluate(x)[0]
    else:
        assert code == EXIT_UNKNOWN and out[1] == "s UNKNOWN"


def test_solve_budget_exhausted_unknown(tmp_path, capsys):
    f = gen_uniform(60, 3, 252, 5)
    path = _write(tmp_path / "hard.cnf", f)
    assert main(["solve", str(path), "--solver", "reinforce", "--t-max", "1"]) == EXIT_UNKNOWN
    assert "s UNKNOWN" in capsys.readouterr().out


def test_solve_batch_order(tmp_path, capsys):
    rows = gen_dataset(UniformConfig((8, 12), (3, 3), (2.0, 2.0)), 8, 2.0, tmp_path / "ds", seed=1)
    save_checkpoint(init_model(4), tmp_path / "m.pdp")
    code = main(["solve", str(tmp_path / "ds"), "--checkpoint", str(tmp_path / "m.pdp"), "--batch-size", "3",
                 "--t-max", "5", "--replicas", "2"])
    blocks = _blocks(capsys.readouterr().out)
    assert [b[0].split("/")[-1] for b in blocks] == [r["filename"] for r in rows]
    assert code in (EXIT_SAT, EXIT_UNKNOWN)
    for b in blocks:
        assert b[1] in ("s SATISFIABLE", "s UNKNOWN")
        assert "s UNSATISFIABLE" not in b


def test_solve_errors(tmp_path, capsys):
    assert main(["solve", str(tmp_path / "missing.cnf"), "--solver", "sp"]) == EXIT_ERROR
    bad = tmp_path / "bad.cnf"
    bad.write_text("p cnf 2 1\n1 5 0\n")
    assert main(["solve", str(bad), "--solver", "sp"]) == EXIT_ERROR
    good = _write(tmp_path / "g.cnf", CnfFormula(1, ((1,),)))
    assert main(["solve", str(good)]) == EXIT_ERROR  # neural without checkpoint
    (tmp_path / "junk.pdp").write_bytes(b"nope")
    assert main(["solve", str(good), "--checkpoint", str(tmp_path / "junk.pdp")]) == EXIT_ERROR
    assert "error:" in capsys.readouterr().err


def test_solve_request_validation():
    with pytest.raises(UsageError):
        SolveRequest(["x"], solver="sp", t_max=0)
    with pytest.raises(UsageError):
        SolveRequest(["x"], solver="cdcl")


def test_generate_alpha_sweep(tmp_path):
    code = main(["generate", str(tmp_path / "sweep"), "--count", "3", "--alpha", "2.0", "3.0",
                 "--n-min", "8", "--n-max", "10"])
    assert code == 0
    for a in ("2.00", "3.00"):
        d = tmp_path / "sweep" / f"alpha_{a}"
        assert len(list(d.glob("*.cnf"))) == 3 and (d / "manifest.csv").exists()


def test_generate_ca(tmp_path):
    assert main(["generate", str(tmp_path / "ca"), "--generator", "ca", "--count", "2", "--alpha", "3.0",
                 "--n-max", "36"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ca" / "manifest.csv")))
    assert all(r["generator"] == "ca" for r in rows)


def test_bench_rows_aggregates_and_determinism(tmp_path):
    gen_dataset(UniformConfig((10, 14), (3, 3), (2.5, 2.5)), 6, 2.5, tmp_path / "ds", seed=2)
    a = run_bench([tmp_path / "ds"], ["sp", "bp"], t_max=100, seed=3, workers=1)
    b = run_bench([tmp_path / "ds"], ["sp", "bp"], t_max=100, seed=3, workers=8)
    assert len(a.rows) == 12 and a.rows == b.rows and a.aggregates() == b.aggregates()
    for agg in a.aggregates():
        rows = [r for r in a.rows if r["solver"] == agg["solver"]]
        assert agg["solved"] == sum(r["solved"] for r in rows)
        assert float(agg["solved_ratio"]) == pytest.approx(agg["solved"] / len(rows))


def test_bench_cli_writes_csvs(tmp_path, capsys):
    gen_dataset(UniformConfig((10, 12), (3, 3), (2.0, 2.0)), 3, 2.0, tmp_path / "ds", seed=0)
    out = tmp_path / "rep"
    assert main(["bench", str(tmp_path / "ds"), "--solvers", "sp", "--out", str(out)]) == 0
    header = next(csv.reader(open(out / "bench_instances.csv")))
    assert header == ["file", "n", "m", "alpha", "solver", "solved", "iterations", "seed"]
    assert (out / "bench_aggregate.csv").exists() and (out / "bench_timings.csv").exists()


def test_train_cli_and_resume(tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("h = 4\nt_max = 2\nbatch_size = 2\nsteps = 4\ncheckpoint_every = 2\nn_max = 8\n")
    assert main(["train", str(cfg), str(tmp_path / "run"), "--stop-at", "2"]) == 0
    assert main(["train", str(cfg), str(tmp_path / "run"), "--resume",
                 str(tmp_path / "run" / "latest.pdp")]) == 0
    rows = list(csv.reader(open(tmp_path / "run" / "train_report.csv")))
    assert [r[0] for r in rows] == ["step", "1", "2", "3", "4"]
    cfg.write_text("h = 4\nbogus = 1\n")
    assert main(["train", str(cfg), str(tmp_path / "run2")]) == EXIT_ERROR


def test_module_entry_point(tmp_path):
    path = _write(tmp_path / "a.cnf", CnfFormula(2, ((1, 2),)))
    proc = subprocess.run([sys.executable, "-m", "pdpsat", "solve", str(path), "--solver", "bp"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_SAT and "s SATISFIABLE" in proc.stdout
