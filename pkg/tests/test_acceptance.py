"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6, 7 and 9 evaluate trained models stored under ``artifacts/``
(produced by ``scripts/train_desk.py``); the tests fail if those are missing.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import brute_marginals, random_tree_formula

from pdpsat.classical import bp_marginals
from pdpsat.cli import run_bench
from pdpsat.engine import RunConfig, run
from pdpsat.experiments import (classical_solved, domain_table, heldout_uniform, read_report,
                                replication_experiment, solved_ratio)
from pdpsat.formula import build_factor_graph, concat_batch, parse_dimacs, replicate, write_dimacs
from pdpsat.generators import CaConfig, UniformConfig, gen_ca, gen_dataset, gen_uniform
from pdpsat.grad import finite_diff_check
from pdpsat.neural import init_model, load_checkpoint, save_checkpoint
from pdpsat.training import LossConfig, TrainConfig, instance_energies, smooth_max

ARTIFACTS = Path(__file__).resolve().parent.parent / "artifacts"


def _need(path: Path) -> Path:
    if not path.exists():
        pytest.fail(f"missing {path}; run scripts/train_desk.py first")
    return path


def test_c01_bp_exact_on_trees(record):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        f = random_tree_formula(rng, max_n=12)
        res = bp_marginals(build_factor_graph(f), eps_factor=1e-9)
        worst = max(worst, float(np.abs(res.marginals[:, 1] - brute_marginals(f, eps=1e-9)).max()))
    secs = time.perf_counter() - t0
    assert record(1, worst < 1e-6 and secs < 10, f"max marginal error {worst:.2e}, {secs:.1f}s")


def test_c02_gradient_matches_finite_differences(record):
    t0 = time.perf_counter()
    reports = []
    for i in range(10):
        model = init_model(4, seed=100 + i)
        f = gen_uniform(6, 3, 8, [200, i])
        reports.append(finite_diff_check(model, f, TrainConfig(h=4, t_max=3, seed=i), step=1e-4))
    secs = time.perf_counter() - t0
    ok = all(r.passed(rel_tol=1e-3, abs_tol=1e-6, min_frac=0.99) for r in reports) and secs < 120
    frac = min(r.frac_within_rel for r in reports)
    out = max(r.max_abs_error_outside for r in reports)
    assert record(2, ok, f"min frac within 1e-3 {frac:.4f}, max abs error outside {out:.1e}, {secs:.1f}s")


def test_c03_energy_zero_iff_satisfied(record):
    rng = np.random.default_rng(303)
    cfg = LossConfig(tau=1e-3, kappa=50.0)
    t0 = time.perf_counter()
    mismatches = checked = 0
    for i in range(50):
        n = int(rng.integers(3, 13))
        f = gen_uniform(n, 3, int(rng.integers(1, 5 * n)), [300, i])
        X = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(float)
        g = replicate(build_factor_graph(f), 2 ** n)
        e = instance_energies(X.reshape(-1), g, cfg)
        low = e < 1e-4 * f.num_clauses
        sat = np.array([f.evaluate(x.astype(np.int8))[0] for x in X])
        mismatches += int((low != sat).sum())
        checked += 2 ** n
    secs = time.perf_counter() - t0
    assert record(3, mismatches == 0 and secs < 60, f"{mismatches} mismatches in {checked} assignments, {secs:.1f}s")


def _gapped_vector(rng, gap=0.1):
    # sorted values with consecutive differences >= gap, then shuffled
    size = int(rng.integers(2, 9))
    steps = gap + rng.uniform(0.0, 0.5, size - 1)
    v = rng.uniform(-1.0, 1.0) + np.concatenate([[0.0], np.cumsum(steps)])
    return rng.permutation(v)


def test_c04_smooth_max_limits(record):
    rng = np.random.default_rng(404)
    worst_mean = worst_max = 0.0
    for _ in range(1000):
        v = _gapped_vector(rng)
        worst_mean = max(worst_mean, abs(smooth_max(v, 1e6) - v.mean()))
        worst_max = max(worst_max, abs(smooth_max(v, 0.01) - v.max()))
    ok = worst_mean < 1e-5 and worst_max < 1e-6
    assert record(4, ok, f"max |sm - mean| {worst_mean:.1e}, max |sm - max| {worst_max:.1e}")


def test_c05_classical_solvers(record):
    t0 = time.perf_counter()
    hard = heldout_uniform(100, 3.5, n_range=(50, 50), seed=505)
    easy = heldout_uniform(100, 2.0, n_range=(50, 50), seed=506)
    sp = classical_solved(hard, "sp").mean()
    rf = classical_solved(hard, "reinforce", t_max=1000).mean()
    bp = classical_solved(easy, "bp").mean()
    secs = time.perf_counter() - t0
    ok = sp >= 0.95 and rf >= 0.80 and bp >= 0.95 and secs < 300
    assert record(5, ok, f"sp {sp:.2f}, reinforce {rf:.2f}, bp {bp:.2f}, {secs:.1f}s")


def test_c06_trained_model(record):
    ckpt = _need(ARTIFACTS / "uniform_desk" / "latest.pdp")
    report = read_report(_need(ARTIFACTS / "uniform_desk" / "train_report.csv"))
    model = load_checkpoint(ckpt, expected_h=32)
    ratio = solved_ratio(model, heldout_uniform(200, 2.5, n_range=(10, 30)), t_max=100)
    step = report["step"].astype(int)
    ema100 = report["ema"][step == 100][0]
    ema_end = report["ema"][step == 5000][0] if (step == 5000).any() else np.inf
    hours = report["seconds"].sum() / 3600
    ok = ratio >= 0.90 and ema_end < 0.7 * ema100 and hours <= 2.0
    assert record(6, ok, f"solved {ratio:.3f}, ema {ema_end:.1f} vs {ema100:.1f} at step 100, "
                         f"{hours:.2f} cpu-hours")


def test_c07_replication_benefit(record):
    model = load_checkpoint(_need(ARTIFACTS / "uniform_desk" / "latest.pdp"))
    formulas = heldout_uniform(100, 4.0, n_range=(50, 50), seed=707)
    res = replication_experiment(model, formulas, runs=10, replicas=20, t_max=100)
    pairs = " ".join(f"{r.single}/{r.replicated}" for r in res.runs)
    ok = res.never_worse and res.strictly_better >= 7
    assert record(7, ok, f"R=1/R=20 solved per run: {pairs}")


def test_c08_batch_isolation(record):
    rng = np.random.default_rng(808)
    model = init_model(32, seed=8, dropout_rate=0.0)
    worst = 0.0
    for s in range(20):
        fs = [gen_uniform(int(n), 3, int(rng.integers(n, 5 * n)), [800, s, i])
              for i, n in enumerate(rng.integers(4, 21, 8))]
        gs = [build_factor_graph(f) for f in fs]
        b = concat_batch(gs)
        seeds = [int(x) for x in rng.integers(0, 2 ** 31, 8)]
        batched = run(b, model, RunConfig(t_max=8, mode="train", instance_seeds=seeds))
        state = batched.info["state"]
        for k, g in enumerate(gs):
            solo = run(g, model, RunConfig(t_max=8, mode="train", instance_seeds=[seeds[k]]))
            v0, v1 = b.var_offsets[k], b.var_offsets[k + 1]
            e0, e1 = b.edge_offsets[k], b.edge_offsets[k + 1]
            for t in range(8):
                worst = max(worst, float(np.abs(batched.trajectory[t].value[v0:v1] - solo.trajectory[t].value).max()))
            for a, c in zip(state.arrays(), solo.info["state"].arrays()):
                worst = max(worst, float(np.abs(a[e0:e1] - c).max()))
    assert record(8, worst < 1e-5, f"max elementwise difference {worst:.1e}")


def test_c09_domain_adaptation(record):
    ca = load_checkpoint(_need(ARTIFACTS / "ca_desk" / "latest.pdp"))
    uni = load_checkpoint(_need(ARTIFACTS / "uniform_n60" / "latest.pdp"))
    alphas = (3.0, 3.5, 4.0)
    rows = domain_table({"ca": ca, "uniform": uni}, alphas, count=100, n=60, t_max=100)
    hardest = max(alphas)
    r = {row["model"]: row["solved_ratio"] for row in rows if row["alpha"] == hardest}
    table = ", ".join(f"{row['model']}@{row['alpha']}={row['solved_ratio']:.2f}" for row in rows)
    assert record(9, r["ca"] - r["uniform"] >= 0.05, table)


def test_c10_formats_and_determinism(record, tmp_path):
    rng = np.random.default_rng(1010)
    roundtrip = 0
    for i in range(1000):
        if i % 2:
            n = int(rng.integers(3, 40))
            f = gen_uniform(n, int(rng.integers(2, 4)), int(rng.integers(1, 6 * n)), [1000, i])
        else:
            n = int(rng.integers(18, 40))
            f = gen_ca(CaConfig(n, 3, float(rng.uniform(1, 5)), 6, 0.7), [1001, i])[0]
        roundtrip += parse_dimacs(write_dimacs(f)).clauses == f.clauses
    dimacs_ok = roundtrip == 1000

    model = init_model(32, seed=10)
    save_checkpoint(model, tmp_path / "a.pdp", {"step": 1})
    loaded = load_checkpoint(tmp_path / "a.pdp")
    save_checkpoint(loaded, tmp_path / "b.pdp", {"step": 1})
    ckpt_ok = ((tmp_path / "a.pdp").read_bytes() == (tmp_path / "b.pdp").read_bytes()
               and all(np.array_equal(model.params[k].view(np.int64), loaded.params[k].view(np.int64))
                       for k in model.params))

    gen_dataset(UniformConfig(n_range=(10, 20)), 8, 3.0, tmp_path / "ds", seed=10)
    reports = []
    for workers in (1, 1, 8):
        out = tmp_path / f"bench{len(reports)}"
        run_bench([tmp_path / "ds"], ["neural", "sp", "reinforce", "bp"], t_max=50, replicas=2, seed=4,
                  checkpoint=str(tmp_path / "a.pdp"), workers=workers).write(out)
        reports.append(tuple((out / n).read_bytes() for n in ("bench_instances.csv", "bench_aggregate.csv")))
    bench_ok = reports[0] == reports[1] == reports[2]
    ok = dimacs_ok and ckpt_ok and bench_ok
    assert record(10, ok, f"dimacs {roundtrip}/1000, checkpoint bit-exact {ckpt_ok}, bench identical {bench_ok}")
