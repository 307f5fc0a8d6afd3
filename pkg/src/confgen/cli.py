"""confgen command line.

Exit codes: 0 success, 1 input error, 2 numerical failure.  The last line on
stdout is always a JSON summary.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .benchmark import ABLATION_COLUMNS, ablation_rows, ablation_verdict, overfit_dataset
from .config import SCHEMA, ConfigError, RunConfig, default_config_path
from .distgeo import DivergenceError, solve_distance_geometry
from .evaluation import (ConformerSet, aggregate, coverage_from_matrix, coverage_grid,
                         matching_from_matrix, mmd_report, rmsd_matrix)
from .geometry import DegenerateAlignmentError
from .gradcheck import hypergradient_sweep
from .model import IntegrationError, init_params, load_checkpoint, save_checkpoint
from .molgraph import (ParseError, PreconditionError, ValidationError, expand_auxiliary_edges,
                       parse_dataset, to_xyz, write_dataset)
from .rng import stream
from .training import OptimizerState, TrainingError, sample_conformation, train

log = logging.getLogger("confgen")


class InputError(Exception):
    pass


class NumericalFailure(Exception):
    pass


INPUT_ERRORS = (InputError, ConfigError, ParseError, ValidationError, PreconditionError,
                FileNotFoundError, IsADirectoryError, json.JSONDecodeError, KeyError)
NUMERIC_ERRORS = (NumericalFailure, DivergenceError, IntegrationError, TrainingError,
                  DegenerateAlignmentError, FloatingPointError)


def _emit(summary: dict):
    print(json.dumps(summary, default=float))


def _run_config(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in SCHEMA if getattr(args, k, None) is not None}
    return RunConfig.load(args.config or default_config_path(), overrides)


def _load(path, what="dataset"):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return parse_dataset(p)


def _expanded(dataset):
    return [(g if g.expanded else expand_auxiliary_edges(g), confs) for g, confs in dataset]


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- ingest

def cmd_ingest(args) -> dict:
    data = _load(args.input)
    for g, _ in data:
        if g.expanded:
            raise InputError(f"molecule {g.id!r} is already expanded; ingest expects raw bond graphs")
    out = []
    rows = []
    for g, confs in data:
        ge = expand_auxiliary_edges(g)
        out.append((ge, confs))
        rows.append({"id": g.id, "atoms": g.n_atoms, "edges": g.n_edges, "expanded_edges": ge.n_edges,
                     "conformers": len(confs)})
        print(f"{g.id}\tatoms={g.n_atoms}\t|E|={g.n_edges}\t|E'|={ge.n_edges}\tconformers={len(confs)}")
    write_dataset(args.output, out)
    return {"molecules": len(out), "per_molecule": rows, "output": str(args.output)}


# ---------------------------------------------------------------- train

def cmd_train(args) -> dict:
    rc = _run_config(args)
    rc.validate_paths("dataset")
    data = _expanded(_load(rc.dataset))
    tcfg = rc.train()
    out = Path(rc.output_dir)
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    start_epoch = 1
    if args.resume:
        if not Path(args.resume).is_file():
            raise InputError(f"checkpoint not found: {args.resume}")
        params, opt_doc, extra = load_checkpoint(args.resume)
        opt = OptimizerState.from_dict(opt_doc) if opt_doc else OptimizerState.zeros(params)
        start_epoch = int(extra.get("epoch", 0)) + 1
    else:
        params = init_params(rc.model(), stream(rc.seed, "init"))
        opt = None
    (out / "run.cfg").write_text(rc.dump())
    res = train(data, params, tcfg, opt, log_path=out / "train_log.csv", checkpoint_dir=ckdir,
                start_epoch=start_epoch)
    last_epoch = start_epoch + tcfg.epochs - 1
    final = ckdir / "final.json"
    save_checkpoint(final, res.params, res.opt.to_dict(), {"epoch": last_epoch})
    last = res.history[-1] if res.history else {}
    return {"checkpoint": str(final), "log": str(out / "train_log.csv"), "steps": res.opt.step,
            "epoch": last_epoch, "last": last}


# ---------------------------------------------------------------- sample

def _sample_one(job):
    g, n_ref, params, inner, seed, multiplier = job
    return [sample_conformation(g, params, inner, stream(seed, "sample", g.id, j))
            for j in range(multiplier * n_ref)]


def cmd_sample(args) -> dict:
    rc = _run_config(args)
    if not Path(args.checkpoint).is_file():
        raise InputError(f"checkpoint not found: {args.checkpoint}")
    params, _, _ = load_checkpoint(args.checkpoint)
    data = _expanded(_load(args.dataset or rc.dataset))
    jobs = [(g, max(len(confs), 1), params, rc.solve_inner(), rc.seed, rc.generated_multiplier)
            for g, confs in data]
    gens = _map(_sample_one, jobs, rc.workers)
    out = list(zip([g for g, _ in data], gens))
    write_dataset(args.output, out)
    if args.xyz:
        with open(args.xyz, "w") as fh:
            for g, confs in out:
                for j, R in enumerate(confs):
                    fh.write(to_xyz(g, R, f"{g.id} sample {j}"))
    return {"output": str(args.output), "molecules": len(out),
            "conformers": sum(len(c) for _, c in out), "xyz": args.xyz}


# ---------------------------------------------------------------- solve

def _read_distances(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"distances file not found: {p}")
    try:
        return np.array([float(x) for x in p.read_text().replace(",", " ").split()])
    except ValueError as exc:
        raise InputError(f"{p}: {exc}") from None


def cmd_solve(args) -> dict:
    rc = _run_config(args)
    data = _load(args.graph, "graph file")
    picked = [m for m in data if args.molecule is None or m[0].id == args.molecule]
    if not picked:
        raise InputError(f"molecule {args.molecule!r} not in {args.graph}")
    g = picked[0][0]
    g = g if g.expanded else expand_auxiliary_edges(g)
    d = _read_distances(args.distances)
    if d.size != g.n_edges:
        raise InputError(f"{d.size} distances for {g.n_edges} expanded edges")
    inner = rc.solve_inner()
    traj = solve_distance_geometry(d, g, inner, seed=stream(rc.seed, "solve"))
    H = traj.objective_values
    write_dataset(args.output, [(g, [traj.final])])
    if args.trajectory:
        with open(args.trajectory, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "objective"])
            for t, h in enumerate(H):
                w.writerow([t, repr(float(h))])
    return {"output": str(args.output), "steps": len(H) - 1, "objective": float(H[-1]),
            "objective_per_edge": float(H[-1]) / g.n_edges}


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> dict:
    steps = tuple(int(s) for s in args.steps.split(","))
    results = hypergradient_sweep(args.seed, args.instances, (args.min_atoms, args.max_atoms), steps,
                                  args.eta, args.h, corrupt=args.corrupt_vjp)
    for r in results:
        status = "PASS" if r.passed(args.tol) else "FAIL"
        print(f"instance {r.instance:3d}  atoms={r.n_atoms}  T={r.steps:3d}  "
              f"max_rel_err={r.max_rel_error:.3e}  {status}")
    failed = [r.instance for r in results if not r.passed(args.tol)]
    summary = {"instances": len(results), "failed": failed, "tol": args.tol,
               "max_rel_error": max(r.max_rel_error for r in results),
               "per_instance": [r.max_rel_error for r in results]}
    if failed:
        summary["_exit"] = 2
    return summary


# ---------------------------------------------------------------- eval

def _paired_sets(args):
    gen = {g.id: (g, c) for g, c in _load(args.generated, "generated set")}
    ref = {g.id: (g, c) for g, c in _load(args.reference, "reference set")}
    if set(gen) != set(ref):
        missing = sorted(set(ref) ^ set(gen))
        raise InputError(f"generated and reference molecule ids differ: {missing[:5]}")
    pairs = []
    for mid in ref:
        (gg, cg), (gr, cr) = gen[mid], ref[mid]
        if gg.elements != gr.elements:
            raise InputError(f"molecule {mid!r}: atom lists differ between sets")
        if not cg or not cr:
            raise InputError(f"molecule {mid!r}: empty conformer set")
        pairs.append((ConformerSet(gr, cg, "generated"), ConformerSet(gr, cr, "reference")))
    return pairs


def _matrix_job(job):
    sg, sr, heavy = job
    return rmsd_matrix(sg.conformers, sr.conformers, sr.graph, heavy)


def _parse_grid(text: str) -> list[float]:
    if ":" in text:
        lo, hi, n = text.split(":")
        return [float(x) for x in np.linspace(float(lo), float(hi), int(n))]
    return [float(x) for x in text.split(",")]


def cmd_eval(args) -> dict:
    rc = _run_config(args)
    mcfg = rc.metric()
    pairs = _paired_sets(args)
    mats = _map(_matrix_job, [(sg, sr, mcfg.heavy_only) for sg, sr in pairs], rc.workers)
    rows = []
    for (sg, sr), M in zip(pairs, mats):
        rows.append([sr.graph.id, len(sr.conformers), len(sg.conformers),
                     coverage_from_matrix(M, mcfg.delta), matching_from_matrix(M)])
    cov_mean, cov_med = aggregate([r[3] for r in rows])
    mat_mean, mat_med = aggregate([r[4] for r in rows])
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["molecule_id", "n_ref", "n_gen", "cov", "mat"])
        w.writerows(rows)
        w.writerow(["mean", "", "", cov_mean, mat_mean])
        w.writerow(["median", "", "", cov_med, mat_med])
    summary = {"output": str(args.output), "molecules": len(rows), "delta": mcfg.delta,
               "cov_mean": cov_mean, "cov_median": cov_med, "mat_mean": mat_mean, "mat_median": mat_med}
    if args.delta_grid:
        grid = _parse_grid(args.delta_grid)
        per_mol = np.array([coverage_grid(M, grid) for M in mats])
        with open(args.grid_output, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delta", "cov_mean", "cov_median"])
            for k, delta in enumerate(grid):
                w.writerow([delta, float(np.mean(per_mol[:, k])), float(np.median(per_mol[:, k]))])
        summary["grid_output"] = str(args.grid_output)
    return summary


def cmd_eval_mmd(args) -> dict:
    rc = _run_config(args)
    cfg = rc.mmd()
    rows = []
    for sg, sr in _paired_sets(args):
        rep = mmd_report(sg, sr, cfg, strict=rc.mmd_strict)
        rows.append([sr.graph.id, rep["mmd_single_mean"], rep["mmd_pair_mean"], rep["mmd_joint"]])
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["molecule_id", "mmd_single_mean", "mmd_pair_mean", "mmd_joint"])
        w.writerows(rows)
    return {"output": str(args.output), "molecules": len(rows)}


# ---------------------------------------------------------------- misc

def cmd_export_xyz(args) -> dict:
    data = _load(args.dataset)
    n = 0
    with open(args.output, "w") as fh:
        for g, confs in data:
            if args.molecule is not None and g.id != args.molecule:
                continue
            for j, R in enumerate(confs):
                fh.write(to_xyz(g, R, f"{g.id} conformer {j}"))
                n += 1
    if n == 0:
        raise InputError("no conformers matched")
    return {"output": str(args.output), "frames": n}


def cmd_synthetic(args) -> dict:
    data = overfit_dataset()
    if not args.expanded:
        from .molgraph import original_graph
        data = [(original_graph(g), c) for g, c in data]
    write_dataset(args.output, data)
    return {"output": str(args.output), "molecules": len(data)}


def cmd_ablation(args) -> dict:
    seeds = list(range(args.seeds))

    def echo(row):
        print(", ".join(f"{k}={row[k]}" for k in ABLATION_COLUMNS), flush=True)

    rows = ablation_rows(seeds, args.epochs, log=echo)
    with open(args.output, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    wins, n = ablation_verdict(rows)
    return {"output": str(args.output), "full_better_or_equal": wins, "seeds": n}


# ---------------------------------------------------------------- parser

def _add_config_flags(p):
    p.add_argument("--config", help="flat key = value config file (default: packaged default.cfg)")
    for key, (_, default, help_) in SCHEMA.items():
        p.add_argument(f"--{key}", default=None, metavar="V", help=f"{help_} [default {default}]")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="confgen", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="expand auxiliary edges of a raw dataset")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="train the model")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate conformers from a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--xyz", help="also write every conformer as XYZ frames")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("solve", help="embed target distances by gradient descent")
    _add_config_flags(p)
    p.add_argument("--distances", required=True, help="whitespace separated, in expanded-edge order")
    p.add_argument("--graph", required=True, help="dataset file holding the molecule")
    p.add_argument("--molecule", help="molecule id (default: first record)")
    p.add_argument("--output", required=True)
    p.add_argument("--trajectory", help="CSV of the objective per step")
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("gradcheck", help="hypergradient vs central finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--min-atoms", type=int, default=4)
    p.add_argument("--max-atoms", type=int, default=8)
    p.add_argument("--steps", default="10,50", help="comma separated inner step counts")
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--corrupt-vjp", action="store_true", help="negative control: drop the Hessian term")
    p.set_defaults(fn=cmd_gradcheck)

    for name, fn in (("eval", cmd_eval), ("eval-mmd", cmd_eval_mmd)):
        p = sub.add_parser(name, help="COV/MAT report" if name == "eval" else "MMD report")
        _add_config_flags(p)
        p.add_argument("--generated", required=True)
        p.add_argument("--reference", required=True)
        p.add_argument("--output", required=True)
        if name == "eval":
            p.add_argument("--delta-grid", help="lo:hi:n or a comma list of thresholds")
            p.add_argument("--grid-output", default="cov_grid.csv")
        p.set_defaults(fn=fn)

    p = sub.add_parser("export-xyz", help="write conformers as XYZ frames")
    p.add_argument("dataset")
    p.add_argument("output")
    p.add_argument("--molecule")
    p.set_defaults(fn=cmd_export_xyz)

    p = sub.add_parser("synthetic", help="write the five-molecule benchmark set")
    p.add_argument("output")
    p.add_argument("--expanded", action="store_true")
    p.set_defaults(fn=cmd_synthetic)

    p = sub.add_parser("ablation", help="full vs ablation_no_recon on the overfit benchmark")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--output", default="ablation.csv")
    p.set_defaults(fn=cmd_ablation)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        summary = args.fn(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        _emit({"command": args.command, "status": "input_error", "error": str(exc)})
        return 1
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        _emit({"command": args.command, "status": "numerical_failure", "error": str(exc)})
        return 2
    code = summary.pop("_exit", 0)
    _emit({"command": args.command, "status": "ok" if code == 0 else "fail", **summary})
    return code


if __name__ == "__main__":
    sys.exit(main())
