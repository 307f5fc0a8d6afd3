"""Acceptance checks, one per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` or ``python3 tests/test_acceptance.py``.
Criterion 8 is reported but never gates; set CONFGEN_RUN_ABLATION=1 to run the full
five-seed comparison inside the suite, otherwise an existing ablation CSV is read.
"""

from __future__ import annotations

import csv
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from confgen.benchmark import ablation_rows, ablation_verdict, run_overfit
from confgen.config import RunConfig, default_config_path
from confgen.distgeo import SOLVE_INNER, inner_objective, solve_distance_geometry
from confgen.evaluation import coverage_from_matrix, coverage_grid, matching_from_matrix, mmd, MmdConfig
from confgen.geometry import aligned_rmsd
from confgen.gradcheck import coordinate_pass_rate, hypergradient_sweep, training_loss_gradcheck
from confgen.model import LOG_2PI, ModelConfig, cnf_forward, cnf_inverse, init_params
from confgen.molgraph import distances_from_conformation, expand_auxiliary_edges, make_graph
from confgen.rng import stream
from confgen.synthetic import random_expanded_instance, random_molecule
from confgen.training import sample_conformation, sample_distances

ROOT = Path(__file__).resolve().parent.parent
RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line, file=sys.__stdout__, flush=True)
    return ok


# ---------------------------------------------------------------- 1

def criterion_1() -> bool:
    t0 = time.perf_counter()
    res = hypergradient_sweep(seed=0, instances=20, atoms=(4, 8), steps=(10, 50), eta=0.01, h=1e-4)
    secs = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in res)
    ok = all(r.passed(1e-3) for r in res) and secs < 30
    return report(1, ok, f"20 instances, worst rel err {worst:.2e} (< 1e-3), {secs:.1f} s (< 30 s)")


# ---------------------------------------------------------------- 2

def criterion_2() -> bool:
    t0 = time.perf_counter()
    h_ok = both_ok = 0
    for i in range(100):
        rng = stream(0, "recovery", i)
        g, R = random_molecule(rng, int(rng.integers(8, 13)))
        g = expand_auxiliary_edges(g)
        d = distances_from_conformation(g, R)
        traj = solve_distance_geometry(d, g, SOLVE_INNER, seed=rng)
        h = traj.objective_values[-1] / g.n_edges
        h_good = h < 1e-6
        h_ok += h_good
        both_ok += h_good and aligned_rmsd(traj.final, R) < 1e-2
    secs = time.perf_counter() - t0
    ok = both_ok >= 95 and secs < 60
    return report(2, ok, f"H/|E'| < 1e-6 on {h_ok}/100, plus RMSD < 1e-2 on {both_ok}/100 (need 95), "
                         f"{secs:.1f} s (< 60 s)")


# ---------------------------------------------------------------- 3

def criterion_3() -> bool:
    g = expand_auxiliary_edges(make_graph("CCC", [(0, 1, "single"), (1, 2, "single")]))
    d = np.array([3.0, 5.0, 4.0])      # edges (0,1), (0,2), (1,2): right angle at atom 1
    R_true = np.array([[0.0, 0, 0], [3, 0, 0], [3, 4, 0]])
    errs = [aligned_rmsd(solve_distance_geometry(d, g, SOLVE_INNER, seed=s).final, R_true) for s in range(20)]
    return report(3, max(errs) < 1e-3, f"20 seeds, worst aligned RMSD {max(errs):.2e} (< 1e-3)")


# ---------------------------------------------------------------- 4

def criterion_4() -> bool:
    cfg = ModelConfig(hidden=16, layers=2, z_dim=3, cnf_steps=20)
    worst_rt = worst_ld = 0.0
    for i in range(50):
        rng = stream(0, "cnf", i)
        g, _ = random_expanded_instance(rng, int(rng.integers(4, 9)))
        p = init_params(cfg, rng)
        p = p.with_flat(p.flat + 0.3 * rng.standard_normal(p.flat.size))
        z = rng.standard_normal(cfg.z_dim)
        d0 = rng.standard_normal(g.n_edges)
        d1, ld_fwd = cnf_forward(d0, z, g, p)
        back, ll = cnf_inverse(d1, z, g, p)
        ld_bwd = (-0.5 * back @ back - 0.5 * back.size * LOG_2PI) - ll
        worst_rt = max(worst_rt, float(np.max(np.abs(back - d0))))
        worst_ld = max(worst_ld, abs(ld_fwd + ld_bwd))

    # scalar linear dynamics d' = c d
    c = 1.5
    g1 = expand_auxiliary_edges(make_graph("CO", [(0, 1, "single")]))
    p = init_params(cfg, 0)
    p = p.with_values(**{n.replace(".", "__"): 0.0 for n in p.names("decoder.dyn.")})
    lin = np.zeros(p["decoder.dyn.lin"].shape)
    lin[0, 0] = c
    p = p.with_values(decoder__dyn__lin=lin)
    err = {K: abs(cnf_forward(np.array([1.0]), np.zeros(cfg.z_dim), g1, p, steps=K)[0][0] - math.exp(c))
           for K in (20, 10)}
    ratio = err[10] / err[20]
    ok = worst_rt < 1e-5 and worst_ld < 1e-4 and 8 <= ratio <= 32
    return report(4, ok, f"round trip {worst_rt:.1e} (< 1e-5), logdet sum {worst_ld:.1e} (< 1e-4), "
                         f"RK4 error ratio {ratio:.1f} (in [8, 32])")


# ---------------------------------------------------------------- 5

def criterion_5() -> bool:
    analytic, fd = training_loss_gradcheck(seed=0)
    rate, n = coordinate_pass_rate(analytic, fd, tol=1e-3, floor=1e-8)
    return report(5, rate >= 0.95, f"{rate:.1%} of {n} coordinates within rel 1e-3 (need 95%)")


# ---------------------------------------------------------------- 6

_overfit = {}


def overfit_result():
    if "full" not in _overfit:
        _overfit["full"] = run_overfit("full", seed=0)
    return _overfit["full"]


def criterion_6() -> bool:
    r = overfit_result()
    first, last = float(r.recon[0]), r.trailing_recon()
    drop = 1.0 - last / first
    ok = drop >= 0.9 and r.mat < 0.5 and r.seconds < 600
    return report(6, ok, f"recon {first:.3f} -> {last:.3f} ({drop:.1%} drop, need 90%), "
                         f"MAT {r.mat:.3f} A (< 0.5), {r.seconds:.0f} s (< 600 s)")


# ---------------------------------------------------------------- 7

def _brute_cov_mat(M: np.ndarray, delta: float) -> tuple[float, float]:
    hits, total = 0, 0.0
    for row in M.tolist():
        best = math.inf
        for v in row:
            if v < best:
                best = v
        hits += 1 if best < delta else 0
        total += best
    return hits / len(M), total / len(M)


def criterion_7() -> bool:
    from confgen.evaluation import ConformerSet, coverage, matching, MetricConfig
    from confgen.molgraph import Conformation
    from scipy.spatial.transform import Rotation

    def scipy_rmsd(X, P):
        Xc, Pc = X - X.mean(0), P - P.mean(0)
        rot, _ = Rotation.align_vectors(Xc, Pc)
        return float(np.sqrt(np.mean(np.sum((rot.apply(Pc) - Xc) ** 2, axis=1))))

    exact = True
    for i in range(50):
        rng = stream(0, "metric-oracle", i)
        n = int(rng.integers(3, 9))
        g = make_graph(["C"] * n, [(k, k + 1, "single") for k in range(n - 1)], mol_id=f"m{i}")
        ref = [Conformation(rng.standard_normal((n, 3))) for _ in range(int(rng.integers(1, 11)))]
        gen = [Conformation(rng.standard_normal((n, 3))) for _ in range(int(rng.integers(1, 11)))]
        delta = float(rng.uniform(0.3, 1.5))
        M = np.array([[scipy_rmsd(Rg.coords, Rr.coords) for Rg in gen] for Rr in ref])
        want_cov, want_mat = _brute_cov_mat(M, delta)
        cfg = MetricConfig(delta=delta)
        got_cov = coverage(ConformerSet(g, gen), ConformerSet(g, ref), cfg)
        got_mat = matching(ConformerSet(g, gen), ConformerSet(g, ref), cfg)
        exact &= got_cov == want_cov and abs(got_mat - want_mat) < 1e-9

    grid = np.linspace(0.05, 2.0, 20)
    rng = stream(0, "metric-grid")
    monotone = all(np.all(np.diff(coverage_grid(rng.uniform(0, 2, (8, 12)), grid)) >= 0) for _ in range(20))
    two = abs(mmd([0.0], [1.0], MmdConfig(bandwidth=1.0)) - (2 - 2 * math.exp(-0.5)))
    ok = exact and monotone and two < 1e-10
    return report(7, ok, f"oracle agreement on 50 pairs: {exact}, COV monotone on 20-point grid: {monotone}, "
                         f"two-point MMD error {two:.1e} (< 1e-10)")


# ---------------------------------------------------------------- 8

def criterion_8() -> bool:
    path = ROOT / "ablation.csv"
    if os.environ.get("CONFGEN_RUN_ABLATION") == "1":
        rows = ablation_rows(range(5))
        source = "fresh run"
    elif path.is_file():
        with open(path) as fh:
            rows = [{**r, "seed": int(r["seed"]), "mat": float(r["mat"])} for r in csv.DictReader(fh)]
        source = str(path.name)
    else:
        line = ("criterion 8: NOT RUN (soft, not gated)  produce it with `confgen ablation --output "
                "ablation.csv` or set CONFGEN_RUN_ABLATION=1")
        RESULTS[8] = line
        print(line, file=sys.__stdout__, flush=True)
        return True
    wins, n = ablation_verdict(rows)
    report(8, wins >= 3, f"full MAT <= ablation MAT in {wins}/{n} seeds (soft target 3/5, from {source}; "
                         f"reported, not gated)")
    return True


# ---------------------------------------------------------------- 9

def criterion_9() -> bool:
    rc = RunConfig.load(default_config_path())
    want = {"hidden": 256, "layers": 3, "batch_size": 128, "learning_rate": 0.001, "delta": 0.5,
            "generated_multiplier": 2}
    got = {k: getattr(rc, k) for k in want}
    return report(9, got == want, "default.cfg: " + ", ".join(f"{k}={v}" for k, v in got.items()))


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8, criterion_9]


@pytest.mark.parametrize("check", CRITERIA, ids=[f"criterion_{i + 1}" for i in range(len(CRITERIA))])
def test_criterion(check):
    assert check()


def _trained_samples(n=2):
    from confgen.benchmark import overfit_dataset
    params = overfit_result().params
    for g, (R_ref,) in overfit_dataset():
        for j in range(n):
            # identical streams: sample_distances draws the same z and d(t0) as sample_conformation
            d = sample_distances(g, params, stream(0, "adequacy", g.id, j))
            R = sample_conformation(g, params, SOLVE_INNER, stream(0, "adequacy", g.id, j))
            yield g, d, R, R_ref


def test_trained_sampler_solver_adequacy():
    worst = max(inner_objective(R, d, g) / g.n_edges for g, d, R, _ in _trained_samples())
    print(f"trained sampler: worst H/|E'| {worst:.2e} (< 1e-4)", file=sys.__stdout__, flush=True)
    assert worst < 1e-4


def test_trained_sampler_beats_reference_fit():
    # the training conformer is a feasible candidate for the sampled distances; the solver must fit at least as well
    for g, d, R, R_ref in _trained_samples():
        assert inner_objective(R, d, g) <= inner_objective(R_ref, d, g)


def pytest_terminal_summary_lines() -> list[str]:
    return [RESULTS[k] for k in sorted(RESULTS)]


if __name__ == "__main__":
    outcomes = [check() for check in CRITERIA]
    sys.exit(0 if all(outcomes) else 1)
