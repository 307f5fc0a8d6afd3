"""Training loop, Adam, and conformation sampling."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tape as tp
from .distgeo import (TRAIN_INNER, DivergenceError, InnerLoopConfig, hypergradient, outer_seed,
                      solve_distance_geometry)
from .model import (IntegrationError, LossBreakdown, ModelParameters, assemble_loss, cnf_forward,
                    decoder_dynamics, encode_on_tape, integrate_on_tape, kl_on_tape, prior_params,
                    prior_on_tape, save_checkpoint, standard_normal_logpdf)
from .molgraph import Conformation, MolecularGraph, distances_from_conformation
from .rng import stream

log = logging.getLogger(__name__)

MODES = ("full", "ablation_no_recon")
LOG_COLUMNS = ("epoch", "step", "recon", "prior", "aux", "total", "diverged_count")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 1
    lam: float = 1.0
    alpha: float = 1.0
    inner: InnerLoopConfig = TRAIN_INNER
    seed: int = 0
    mode: str = "full"
    recon_heavy_only: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate, batch_size and epochs must be positive")
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ModelParameters) -> "OptimizerState":
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat))

    def to_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "step": self.step}

    @classmethod
    def from_dict(cls, doc: dict) -> "OptimizerState":
        return cls(np.asarray(doc["m"], float), np.asarray(doc["v"], float), int(doc["step"]))


def adam_update(params: ModelParameters, grads: np.ndarray, opt: OptimizerState, lr: float
                ) -> tuple[ModelParameters, OptimizerState]:
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.flat.shape or opt.m.shape != grads.shape:
        raise ValueError("gradient / moment shapes do not match the parameters")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient")
    step = opt.step + 1
    m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grads
    v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grads * grads
    m_hat = m / (1.0 - opt.beta1 ** step)
    v_hat = v / (1.0 - opt.beta2 ** step)
    flat = params.flat - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return params.with_flat(flat), replace(opt, m=m, v=v, step=step)


@dataclass(frozen=True)
class SampleNoise:
    """Random draws for one training sample: latent eps, flow base noise, solver start."""

    eps: np.ndarray
    d0: np.ndarray
    R0: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, g: MolecularGraph, z_dim: int, init_scale: float,
             restarts: int = 1):
        return cls(rng.standard_normal(z_dim), rng.standard_normal(g.n_edges),
                   init_scale * rng.standard_normal((restarts, g.n_atoms, 3)))


@dataclass
class SampleTerms:
    recon: tp.Variable
    prior: tp.Variable
    aux: tp.Variable
    recon_value: float


def sample_terms(t: tp.Tape, pv, params: ModelParameters, g: MolecularGraph, R_star: Conformation,
                 noise: SampleNoise, cfg: TrainConfig, _corrupt_vjp: bool = False) -> SampleTerms:
    """Record the three loss terms of one (graph, conformation) pair on ``t``."""
    mcfg = params.config
    d_star = distances_from_conformation(g, R_star)
    mu_q, ls_q = encode_on_tape(t, pv, g, d_star, mcfg.z_dim)
    mu_p, ls_p = prior_on_tape(t, pv, g, mcfg.z_dim)
    z = mu_q + tp.exp(ls_q) * noise.eps
    prior = kl_on_tape(mu_q, ls_q, mu_p, ls_p)

    dyn = decoder_dynamics(t, pv, g, z, mcfg)
    d0_star, logdet_bwd = integrate_on_tape(dyn, t.constant(d_star), 1.0, 0.0, mcfg.cnf_steps)
    aux = logdet_bwd - standard_normal_logpdf(t, d0_star)

    d, _ = integrate_on_tape(dyn, t.constant(noise.d0), 0.0, 1.0, mcfg.cnf_steps)
    full = cfg.mode == "full"
    # every restart runs the full T steps; only the winner is differentiated
    inner = replace(cfg.inner, restarts=len(noise.R0), tol=None, store_trajectory=full)
    traj = solve_distance_geometry(d.value, g, inner, init=noise.R0)
    mask = g.heavy_mask() if cfg.recon_heavy_only else None
    recon_value, seed = outer_seed(traj.states[-1], R_star, mask)
    if full:
        a_d = hypergradient(traj, d.value, g, inner, seed, _corrupt=_corrupt_vjp)
        # value recon_value, gradient a_d with respect to d
        recon = tp.sum(d * a_d) + (recon_value - float(a_d @ d.value))
    else:
        recon = t.constant(recon_value)
    return SampleTerms(recon, prior, aux, recon_value)


def batch_loss(params: ModelParameters, batch: Sequence[tuple[MolecularGraph, Conformation]],
               noises: Sequence[SampleNoise], cfg: TrainConfig, _corrupt_vjp: bool = False):
    """Batch-averaged loss on a fresh tape.

    Returns (tape, param variables, total variable or None, LossBreakdown, diverged count).
    """
    t = tp.Tape()
    pv = params.on_tape(t)
    kept: list[SampleTerms] = []
    diverged = 0
    for (g, R), noise in zip(batch, noises):
        try:
            kept.append(sample_terms(t, pv, params, g, R, noise, cfg, _corrupt_vjp))
        except (DivergenceError, IntegrationError) as exc:
            diverged += 1
            log.warning("skipping sample %s: %s", g.id, exc)
    if not kept:
        return t, pv, None, None, diverged
    k = float(len(kept))
    recon = sum(s.recon_value for s in kept) / k
    prior = sum(float(s.prior.value) for s in kept) / k
    aux = sum(float(s.aux.value) for s in kept) / k
    parts = [cfg.lam * s.prior + cfg.alpha * s.aux for s in kept]
    if cfg.mode == "full":
        parts = [p + s.recon for p, s in zip(parts, kept)]
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    total = total * (1.0 / k)
    breakdown = assemble_loss(recon, prior, aux, cfg.lam, cfg.alpha, include_recon=cfg.mode == "full")
    return t, pv, total, breakdown, diverged


def draw_noises(batch, params: ModelParameters, cfg: TrainConfig, step: int) -> list[SampleNoise]:
    return [SampleNoise.draw(stream(cfg.seed, "train", step, i), g, params.config.z_dim,
                             cfg.inner.init_scale, cfg.inner.restarts)
            for i, (g, _) in enumerate(batch)]


def training_step(batch, params: ModelParameters, opt: OptimizerState, cfg: TrainConfig
                  ) -> tuple[ModelParameters, OptimizerState, LossBreakdown, int]:
    """One Adam step on the batch-averaged loss; returns the diverged-sample count too."""
    noises = draw_noises(batch, params, cfg, opt.step)
    t, pv, total, breakdown, diverged = batch_loss(params, batch, noises, cfg)
    if total is None:
        raise TrainingError(f"every sample in the batch diverged at step {opt.step}")
    grads = tp.backward(t, total, wrt=list(pv.values()))
    new_params, new_opt = adam_update(params, params.flatten_grads(pv, grads), opt, cfg.learning_rate)
    return new_params, new_opt, breakdown, diverged


def training_pairs(dataset) -> list[tuple[MolecularGraph, Conformation]]:
    return [(g, R) for g, confs in dataset for R in confs]


@dataclass
class TrainResult:
    params: ModelParameters
    opt: OptimizerState
    history: list[dict] = field(default_factory=list)


def train(dataset, params: ModelParameters, cfg: TrainConfig, opt: OptimizerState | None = None,
          log_path: str | Path | None = None, checkpoint_dir: str | Path | None = None,
          start_epoch: int = 1, callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs over every (graph, conformer) pair of ``dataset``."""
    pairs = training_pairs(dataset)
    if not pairs:
        raise TrainingError("empty training set")
    opt = opt or OptimizerState.zeros(params)
    history = []
    fh = writer = None
    if log_path is not None:
        new_file = not Path(log_path).exists() or start_epoch == 1
        fh = open(log_path, "w" if new_file else "a", newline="")
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(LOG_COLUMNS)
    try:
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            order = stream(cfg.seed, "shuffle", epoch).permutation(len(pairs))
            for lo in range(0, len(pairs), cfg.batch_size):
                batch = [pairs[i] for i in order[lo:lo + cfg.batch_size]]
                params, opt, loss, diverged = training_step(batch, params, opt, cfg)
                row = {"epoch": epoch, "step": opt.step, "recon": loss.recon, "prior": loss.prior,
                       "aux": loss.aux, "total": loss.total, "diverged_count": diverged}
                history.append(row)
                if writer is not None:
                    writer.writerow([row[c] for c in LOG_COLUMNS])
                if callback is not None:
                    callback(row)
            if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch:05d}.json", params, opt.to_dict(),
                                {"epoch": epoch})
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(params, opt, history)


def sample_conformation(g: MolecularGraph, params: ModelParameters, inner_cfg: InnerLoopConfig,
                        seed: int | np.random.Generator) -> Conformation:
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "sample")
    spec = prior_params(g, params)
    z = spec.mean + spec.std * rng.standard_normal(spec.mean.shape)
    d, _ = cnf_forward(rng.standard_normal(g.n_edges), z, g, params)
    traj = solve_distance_geometry(d, g, replace(inner_cfg, store_trajectory=False), seed=rng)
    return traj.final


def sample_distances(g: MolecularGraph, params: ModelParameters, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "sample")
    spec = prior_params(g, params)
    z = spec.mean + spec.std * rng.standard_normal(spec.mean.shape)
    d, _ = cnf_forward(rng.standard_normal(g.n_edges), z, g, params)
    return d
