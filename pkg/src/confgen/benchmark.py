"""Desk-scale overfit benchmark on the synthetic molecules, and the full-vs-ablation comparison."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .distgeo import SOLVE_INNER, InnerLoopConfig
from .evaluation import coverage_from_matrix, matching_from_matrix, rmsd_matrix
from .model import ModelConfig, ModelParameters, init_params
from .molgraph import expand_auxiliary_edges
from .rng import stream
from .synthetic import benchmark_molecules
from .training import TrainConfig, sample_conformation, train

OVERFIT_MODEL = ModelConfig(hidden=32, layers=2, z_dim=4, cnf_steps=20)
OVERFIT_INNER = InnerLoopConfig(steps=200, learning_rate=0.05, restarts=8)
OVERFIT_EPOCHS = 500
OVERFIT_LR = 0.003
ABLATION_COLUMNS = ("seed", "mode", "epochs", "recon_first", "recon_last", "mat", "cov", "seconds")


def overfit_dataset():
    return [(expand_auxiliary_edges(g), confs) for g, confs in benchmark_molecules()]


def overfit_config(mode: str = "full", seed: int = 0, epochs: int = OVERFIT_EPOCHS) -> TrainConfig:
    # one molecule per step: five Adam steps per epoch instead of one
    return TrainConfig(learning_rate=OVERFIT_LR, batch_size=1, epochs=epochs, inner=OVERFIT_INNER,
                       seed=seed, mode=mode)


@dataclass
class OverfitResult:
    params: ModelParameters
    recon: np.ndarray          # per-epoch mean reconstruction loss
    mat: float
    cov: float
    seconds: float

    def trailing_recon(self, window: int = 20) -> float:
        return float(np.mean(self.recon[-window:]))


def sampled_scores(dataset, params: ModelParameters, seed: int, multiplier: int = 2,
                   delta: float = 0.5) -> tuple[float, float]:
    """Mean MAT and COV of sampled conformers against the training conformers."""
    mats, covs = [], []
    for g, refs in dataset:
        gen = [sample_conformation(g, params, SOLVE_INNER, stream(seed, "bench-sample", g.id, j))
               for j in range(multiplier * len(refs))]
        M = rmsd_matrix(gen, refs, g)
        mats.append(matching_from_matrix(M))
        covs.append(coverage_from_matrix(M, delta))
    return float(np.mean(mats)), float(np.mean(covs))


def run_overfit(mode: str = "full", seed: int = 0, epochs: int = OVERFIT_EPOCHS,
                callback=None) -> OverfitResult:
    data = overfit_dataset()
    t0 = time.perf_counter()
    params = init_params(OVERFIT_MODEL, stream(seed, "init"))
    res = train(data, params, overfit_config(mode, seed, epochs), callback=callback)
    by_epoch: dict[int, list[float]] = {}
    for row in res.history:
        by_epoch.setdefault(row["epoch"], []).append(row["recon"])
    recon = np.array([np.mean(v) for _, v in sorted(by_epoch.items())])
    mat, cov = sampled_scores(data, res.params, seed)
    return OverfitResult(res.params, recon, mat, cov, time.perf_counter() - t0)


def ablation_rows(seeds=range(5), epochs: int = OVERFIT_EPOCHS, log=None) -> list[dict]:
    rows = []
    for seed in seeds:
        for mode in ("full", "ablation_no_recon"):
            r = run_overfit(mode, seed, epochs)
            rows.append({"seed": seed, "mode": mode, "epochs": epochs, "recon_first": float(r.recon[0]),
                         "recon_last": r.trailing_recon(), "mat": r.mat, "cov": r.cov,
                         "seconds": round(r.seconds, 1)})
            if log is not None:
                log(rows[-1])
    return rows


def ablation_verdict(rows: list[dict]) -> tuple[int, int]:
    """(seeds where full MAT <= ablation MAT, number of seeds)."""
    by_seed: dict[int, dict[str, float]] = {}
    for r in rows:
        by_seed.setdefault(r["seed"], {})[r["mode"]] = r["mat"]
    wins = sum(1 for m in by_seed.values() if m["full"] <= m["ablation_no_recon"])
    return wins, len(by_seed)
