"""Finite-difference checks of the unrolled hypergradient and the full training loss."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .distgeo import InnerLoopConfig, frozen_outer, hypergradient, outer_seed, solve_distance_geometry
from .geometry import kabsch_align
from .molgraph import distances_from_conformation
from .rng import stream
from .synthetic import random_expanded_instance


@dataclass
class HypergradResult:
    instance: int
    n_atoms: int
    steps: int
    max_rel_error: float
    seconds: float = 0.0

    def passed(self, tol: float) -> bool:
        return bool(self.max_rel_error < tol)


def rel_inf_error(approx, reference) -> float:
    approx, reference = np.asarray(approx), np.asarray(reference)
    scale = max(float(np.max(np.abs(reference))), 1e-12)
    return float(np.max(np.abs(approx - reference)) / scale)


def check_hypergradient_instance(rng: np.random.Generator, n_atoms: int, steps: int, eta: float = 0.01,
                                 h: float = 1e-4, corrupt: bool = False) -> float:
    """Relative inf-norm error of the hypergradient against central differences.

    The target distances are the true ones perturbed by noise, so the solve
    does not sit exactly at the reference; the reference is a separate random
    conformation so the outer loss is not trivially zero.
    """
    g, R = random_expanded_instance(rng, n_atoms)
    d = distances_from_conformation(g, R) * (1.0 + 0.1 * rng.standard_normal(g.n_edges))
    R_ref = R.coords + 0.3 * rng.standard_normal(R.coords.shape)
    cfg = InnerLoopConfig(steps=steps, learning_rate=eta, store_trajectory=True)
    init = rng.standard_normal((n_atoms, 3))
    traj = solve_distance_geometry(d, g, cfg, init=init)
    _, seed = outer_seed(traj.final, R_ref)
    analytic = hypergradient(traj, d, g, cfg, seed, _corrupt=corrupt)
    # alignment frozen at the base solution
    target = kabsch_align(traj.final, R_ref, strict=False)[0].coords
    fd = np.zeros_like(d)
    for k in range(d.size):
        e = np.zeros_like(d)
        e[k] = h
        fd[k] = (frozen_outer(d + e, g, cfg, init, target) - frozen_outer(d - e, g, cfg, init, target)) / (2 * h)
    return rel_inf_error(analytic, fd)


def hypergradient_sweep(seed: int = 0, instances: int = 20, atoms=(4, 8), steps=(10, 50),
                        eta: float = 0.01, h: float = 1e-4, corrupt: bool = False) -> list[HypergradResult]:
    out = []
    for i in range(instances):
        rng = stream(seed, "gradcheck", i)
        n = int(rng.integers(atoms[0], atoms[1] + 1))
        T = int(steps[i % len(steps)])
        t0 = time.perf_counter()
        err = check_hypergradient_instance(rng, n, T, eta, h, corrupt)
        out.append(HypergradResult(i, n, T, err, time.perf_counter() - t0))
    return out


def training_loss_gradcheck(seed: int = 0, n_atoms: int = 5, h: float = 1e-6, perturb: float = 0.1):
    """Analytic vs central-difference gradient of the batch loss on a toy model.

    Returns (analytic, finite differences) over every parameter.
    """
    from .model import ModelConfig, init_params
    from .training import TrainConfig, batch_loss, draw_noises

    rng = stream(seed, "e2e")
    g, R = random_expanded_instance(rng, n_atoms)
    mc = ModelConfig(hidden=8, layers=2, z_dim=2, cnf_steps=4)
    params = init_params(mc, stream(seed, "e2e-init"))
    # move off the zero-bias init so every parameter block has a nonzero gradient
    params = params.with_flat(params.flat + perturb * rng.standard_normal(params.flat.size))
    cfg = TrainConfig(inner=InnerLoopConfig(steps=10, learning_rate=0.01), seed=seed)
    batch = [(g, R)]
    noises = draw_noises(batch, params, cfg, 0)

    def f(flat):
        return float(batch_loss(params.with_flat(flat), batch, noises, cfg)[2].value)

    t, pv, total, _, _ = batch_loss(params, batch, noises, cfg)
    analytic = params.flatten_grads(pv, tp.backward(t, total, wrt=list(pv.values())))
    fd = np.zeros_like(analytic)
    for i in range(fd.size):
        e = np.zeros_like(fd)
        e[i] = h
        fd[i] = (f(params.flat + e) - f(params.flat - e)) / (2 * h)
    return analytic, fd


def coordinate_pass_rate(analytic, fd, tol: float = 1e-3, floor: float = 1e-8) -> tuple[float, int]:
    mask = np.abs(analytic) > floor
    rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-12)
    return float(np.mean(rel[mask] < tol)), int(mask.sum())
