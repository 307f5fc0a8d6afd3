"""Conditional VAE over distances: MPNN encoder/prior and a conditional CNF decoder.

Everything that needs parameter gradients is written against the tape
(``confgen.tape``); the public functions run a fresh tape and return numpy
values.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tape as tp
from .molgraph import BOND_TYPES, VOCAB, MolecularGraph, PreconditionError

SIGMA_MIN, SIGMA_MAX = 1e-4, 1e4
LOG_SIGMA_MIN, LOG_SIGMA_MAX = math.log(SIGMA_MIN), math.log(SIGMA_MAX)
CHECKPOINT_SCHEMA = "confgen-checkpoint/1"
LOG_2PI = math.log(2.0 * math.pi)


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 256
    layers: int = 3
    z_dim: int = 10
    cnf_steps: int = 20
    init_gain: float = 1.0

    @property
    def dyn_features(self) -> int:
        # [d, t, emb_u + emb_v, emb_u * emb_v, z, bond one-hot]
        return 2 + 2 * self.hidden + self.z_dim + len(BOND_TYPES)


def _mpnn_layout(prefix: str, cfg: ModelConfig, n_scalars: int) -> list[tuple[str, tuple]]:
    H = cfg.hidden
    out = [(f"{prefix}.in.W", (len(VOCAB), H)), (f"{prefix}.in.b", (H,))]
    for k in range(cfg.layers):
        out += [
            (f"{prefix}.msg{k}.W", (H + len(BOND_TYPES) + n_scalars, H)),
            (f"{prefix}.msg{k}.b", (H,)),
            (f"{prefix}.upd{k}.W", (2 * H, H)),
            (f"{prefix}.upd{k}.b", (H,)),
        ]
    return out


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    H, Z, F = cfg.hidden, cfg.z_dim, cfg.dyn_features
    layout = _mpnn_layout("encoder", cfg, 1)
    layout += [("encoder.head.W", (H, 2 * Z)), ("encoder.head.b", (2 * Z,))]
    layout += _mpnn_layout("prior", cfg, 0)
    layout += [("prior.head.W", (H, 2 * Z)), ("prior.head.b", (2 * Z,))]
    layout += _mpnn_layout("decoder", cfg, 0)
    layout += [
        ("decoder.dyn.W1", (F, H)), ("decoder.dyn.b1", (H,)),
        ("decoder.dyn.w2", (H, 1)), ("decoder.dyn.b2", (1,)),
        ("decoder.dyn.lin", (F, 1)),
    ]
    return layout


@dataclass
class ModelParameters:
    """Flat parameter vector with named slices for encoder, prior and decoder."""

    config: ModelConfig
    flat: np.ndarray
    layout: dict[str, tuple[int, tuple]] = field(init=False, repr=False)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=float)
        self.layout = {}
        offset = 0
        for name, shape in param_layout(self.config):
            self.layout[name] = (offset, shape)
            offset += int(np.prod(shape))
        if self.flat.shape != (offset,):
            raise ValueError(f"expected {offset} parameters, got {self.flat.shape}")
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("parameters must be finite")

    def __getitem__(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        return self.flat[off:off + int(np.prod(shape))].reshape(shape)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.layout if n.startswith(prefix)]

    @property
    def encoder_params(self) -> dict[str, np.ndarray]:
        return {n: self[n] for n in self.names("encoder.")}

    @property
    def prior_params(self) -> dict[str, np.ndarray]:
        return {n: self[n] for n in self.names("prior.")}

    @property
    def decoder_params(self) -> dict[str, np.ndarray]:
        return {n: self[n] for n in self.names("decoder.")}

    def with_flat(self, flat: np.ndarray) -> "ModelParameters":
        return ModelParameters(self.config, flat)

    def with_values(self, **named: np.ndarray) -> "ModelParameters":
        flat = self.flat.copy()
        for key, val in named.items():
            name = key.replace("__", ".")
            off, shape = self.layout[name]
            flat[off:off + int(np.prod(shape))] = np.broadcast_to(val, shape).ravel()
        return ModelParameters(self.config, flat)

    def on_tape(self, t: tp.Tape) -> dict[str, tp.Variable]:
        return {n: t.leaf(self[n]) for n in self.layout}

    def flatten_grads(self, pv: Mapping[str, tp.Variable], grads: Mapping[tp.Variable, np.ndarray]
                      ) -> np.ndarray:
        out = np.zeros_like(self.flat)
        for name, var in pv.items():
            off, shape = self.layout[name]
            out[off:off + int(np.prod(shape))] = grads[var].ravel()
        return out


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> ModelParameters:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chunks = []
    for name, shape in param_layout(cfg):
        if name.endswith((".b", ".b1", ".b2")) or name.endswith("dyn.lin"):
            chunks.append(np.zeros(shape).ravel())
        elif name.endswith("dyn.w2"):
            # small output layer so the untrained flow stays near the identity
            chunks.append(0.1 * cfg.init_gain * rng.standard_normal(shape).ravel() / math.sqrt(shape[0]))
        else:
            chunks.append(cfg.init_gain * rng.standard_normal(shape).ravel() / math.sqrt(shape[0]))
    return ModelParameters(cfg, np.concatenate(chunks))


@dataclass(frozen=True)
class GaussianSpec:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.std):
            raise ValueError("mean and std lengths differ")
        if not np.all(np.asarray(self.std) > 0):
            raise ValueError("std must be positive")


@dataclass(frozen=True)
class LatentSample:
    z: np.ndarray
    epsilon: np.ndarray


@dataclass(frozen=True)
class CnfState:
    d_t: np.ndarray
    t: float
    logdet_accum: float


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    prior: float
    aux: float
    lam: float
    alpha: float
    total: float


# --------------------------------------------------------------------------
# tape-level building blocks


def _mpnn(t: tp.Tape, pv: Mapping[str, tp.Variable], prefix: str, g: MolecularGraph,
          scalars: tp.Variable | None) -> tp.Variable:
    n_layers = sum(1 for name in pv if name.startswith(f"{prefix}.msg") and name.endswith(".W"))
    X = t.constant(g.element_onehot())
    h = tp.tanh(X @ pv[f"{prefix}.in.W"] + pv[f"{prefix}.in.b"])
    src = np.concatenate([g.src, g.dst])
    dst = np.concatenate([g.dst, g.src])
    bond = g.bond_onehot()
    parts = [t.constant(np.concatenate([bond, bond]))]
    if scalars is not None:
        col = tp.reshape(scalars, (g.n_edges, 1))
        parts.append(tp.concat([col, col], axis=0))
    for k in range(n_layers):
        msg_in = tp.concat([tp.gather(h, src)] + parts, axis=1)
        msg = tp.tanh(msg_in @ pv[f"{prefix}.msg{k}.W"] + pv[f"{prefix}.msg{k}.b"])
        agg = tp.scatter(msg, dst, g.n_atoms)
        upd = tp.concat([h, agg], axis=1) @ pv[f"{prefix}.upd{k}.W"] + pv[f"{prefix}.upd{k}.b"]
        h = h + tp.tanh(upd)
    return h


def _gaussian_head(t: tp.Tape, pv, prefix: str, h: tp.Variable, z_dim: int):
    pooled = tp.mean(h, axis=0, keepdims=True)
    out = tp.reshape(pooled @ pv[f"{prefix}.head.W"] + pv[f"{prefix}.head.b"], (2 * z_dim,))
    mu = tp.slice_(out, (0, z_dim))
    log_sigma = tp.clip(tp.slice_(out, (z_dim, 2 * z_dim)), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return mu, log_sigma


def encode_on_tape(t, pv, g: MolecularGraph, distances: np.ndarray, z_dim: int):
    h = _mpnn(t, pv, "encoder", g, t.constant(distances))
    return _gaussian_head(t, pv, "encoder", h, z_dim)


def prior_on_tape(t, pv, g: MolecularGraph, z_dim: int):
    h = _mpnn(t, pv, "prior", g, None)
    return _gaussian_head(t, pv, "prior", h, z_dim)


def kl_on_tape(mu_q, log_sigma_q, mu_p, log_sigma_p) -> tp.Variable:
    var_ratio = tp.exp(2.0 * (log_sigma_q - log_sigma_p))
    mean_term = tp.square(mu_q - mu_p) / tp.exp(2.0 * log_sigma_p)
    return tp.sum(log_sigma_p - log_sigma_q + 0.5 * (var_ratio + mean_term) - 0.5)


class _Dynamics:
    """Edge-wise vector field g(d, t) = tanh(x W1 + b1) w2 + b2 + x lin.

    x = [d, t, static edge features].  Each edge's output depends only on its
    own distance, so the Jacobian is diagonal and its trace is exact:
    sum_e [(1 - h_e^2) . (W1[0] * w2) + lin[0]].
    """

    def __init__(self, t: tp.Tape, pv, g: MolecularGraph, z: tp.Variable, hidden: int, z_dim: int):
        m = g.n_edges
        self.t, self.m = t, m
        emb = _mpnn(t, pv, "decoder", g, None)
        eu, ev = tp.gather(emb, g.src), tp.gather(emb, g.dst)
        zb = tp.broadcast(tp.reshape(z, (1, z_dim)), (m, z_dim))
        static = tp.concat([eu + ev, eu * ev, zb, t.constant(g.bond_onehot())], axis=1)
        W1, lin = pv["decoder.dyn.W1"], pv["decoder.dyn.lin"]
        F = W1.shape[0]
        self.w_d = tp.slice_(W1, (0, 1), (0, hidden))           # 1 x H
        self.w_t = tp.slice_(W1, (1, 2), (0, hidden))
        self.pre_static = static @ tp.slice_(W1, (2, F), (0, hidden)) + pv["decoder.dyn.b1"]
        self.lin_d = tp.slice_(lin, (0, 1), (0, 1))             # 1 x 1
        self.lin_t = tp.slice_(lin, (1, 2), (0, 1))
        self.out_static = static @ tp.slice_(lin, (2, F), (0, 1)) + pv["decoder.dyn.b2"]
        self.w2 = pv["decoder.dyn.w2"]
        self.trace_w = tp.transpose(self.w_d) * self.w2         # H x 1

    def __call__(self, d_col: tp.Variable, time: float):
        tt = self.t.constant(time)
        h = tp.tanh(self.pre_static + d_col @ self.w_d + tt * self.w_t)
        out = h @ self.w2 + self.out_static + d_col @ self.lin_d + tt * self.lin_t
        diag = (1.0 - tp.square(h)) @ self.trace_w + self.lin_d
        return out, tp.sum(diag)


def integrate_on_tape(dyn: _Dynamics, d: tp.Variable, t0: float, t1: float, steps: int):
    """RK4 on the augmented state (d, l) with l' = -Tr(dg/dd).

    Returns d(t1) and l(t1) - l(t0) = -int_{t0}^{t1} Tr dt.
    """
    h = (t1 - t0) / steps
    col = tp.reshape(d, (dyn.m, 1))
    logdet = None
    for k in range(steps):
        s = t0 + k * h
        k1, r1 = dyn(col, s)
        k2, r2 = dyn(col + (0.5 * h) * k1, s + 0.5 * h)
        k3, r3 = dyn(col + (0.5 * h) * k2, s + 0.5 * h)
        k4, r4 = dyn(col + h * k3, s + h)
        col = col + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        inc = (-h / 6.0) * (r1 + 2.0 * r2 + 2.0 * r3 + r4)
        logdet = inc if logdet is None else logdet + inc
        if not np.all(np.isfinite(col.value)):
            raise IntegrationError(f"non-finite flow state at step {k + 1}")
    return tp.reshape(col, (dyn.m,)), logdet


def decoder_dynamics(t, pv, g, z, cfg: ModelConfig) -> _Dynamics:
    if not g.expanded:
        raise PreconditionError("graph must be expanded")
    return _Dynamics(t, pv, g, z, cfg.hidden, cfg.z_dim)


def standard_normal_logpdf(t, x: tp.Variable) -> tp.Variable:
    m = x.value.size
    return -0.5 * tp.sum(tp.square(x)) - 0.5 * m * LOG_2PI


# --------------------------------------------------------------------------
# public numpy-facing operations


def mpnn_embed(g: MolecularGraph, edge_scalars, params: ModelParameters, prefix: str = "encoder"
               ) -> np.ndarray:
    if not g.expanded:
        raise PreconditionError("graph must be expanded")
    wants = prefix == "encoder"
    if (edge_scalars is not None) != wants:
        raise ValueError(f"{prefix} network expects {'one' if wants else 'no'} edge scalar")
    if edge_scalars is not None and np.shape(edge_scalars) != (g.n_edges,):
        raise ValueError("edge_scalars length must match the edge count")
    t = tp.Tape()
    pv = params.on_tape(t)
    scalars = None if edge_scalars is None else t.constant(edge_scalars)
    return _mpnn(t, pv, prefix, g, scalars).value


def _spec(mu: tp.Variable, log_sigma: tp.Variable) -> GaussianSpec:
    return GaussianSpec(mu.value.copy(), np.exp(log_sigma.value))


def encode(g: MolecularGraph, R, params: ModelParameters) -> GaussianSpec:
    from .molgraph import distances_from_conformation
    t = tp.Tape()
    pv = params.on_tape(t)
    return _spec(*encode_on_tape(t, pv, g, distances_from_conformation(g, R), params.config.z_dim))


def prior_params(g: MolecularGraph, params: ModelParameters) -> GaussianSpec:
    if not g.expanded:
        raise PreconditionError("graph must be expanded")
    t = tp.Tape()
    pv = params.on_tape(t)
    return _spec(*prior_on_tape(t, pv, g, params.config.z_dim))


def reparameterize(spec: GaussianSpec, eps) -> LatentSample:
    eps = np.asarray(eps, dtype=float)
    if eps.shape != np.shape(spec.mean):
        raise ValueError("epsilon length must match the latent dimension")
    return LatentSample(spec.mean + spec.std * eps, eps)


def kl_divergence(q: GaussianSpec, p: GaussianSpec) -> float:
    mq, sq = np.asarray(q.mean, float), np.asarray(q.std, float)
    mp, sp = np.asarray(p.mean, float), np.asarray(p.std, float)
    if mq.shape != mp.shape:
        raise ValueError("latent dimensions differ")
    if np.any(sq <= 0) or np.any(sp <= 0):
        raise ValueError("std must be positive")
    return float(np.sum(np.log(sp / sq) + (sq ** 2 + (mq - mp) ** 2) / (2.0 * sp ** 2) - 0.5))


def _run_flow(d, z, g, params: ModelParameters, t0: float, t1: float, steps: int | None):
    d = np.asarray(d, dtype=float)
    if d.shape != (g.n_edges,):
        raise ValueError(f"{d.shape} distances for {g.n_edges} edges")
    t = tp.Tape()
    pv = params.on_tape(t)
    dyn = decoder_dynamics(t, pv, g, t.constant(z), params.config)
    out, logdet = integrate_on_tape(dyn, t.constant(d), t0, t1, steps or params.config.cnf_steps)
    return out.value.copy(), float(logdet.value)


def cnf_forward(d0, z, g: MolecularGraph, params: ModelParameters, steps: int | None = None
                ) -> tuple[np.ndarray, float]:
    """Push base noise through the flow: returns d(1) and log p(d1) - log p(d0)."""
    return _run_flow(d0, z, g, params, 0.0, 1.0, steps)


def cnf_inverse(d1, z, g: MolecularGraph, params: ModelParameters, steps: int | None = None
                ) -> tuple[np.ndarray, float]:
    """Pull distances back to base space: returns d(0) and log p(d1 | z, g)."""
    d0, logdet_bwd = _run_flow(d1, z, g, params, 1.0, 0.0, steps)
    base = -0.5 * float(d0 @ d0) - 0.5 * d0.size * LOG_2PI
    return d0, base - logdet_bwd


def assemble_loss(recon: float, prior: float, aux: float, lam: float = 1.0, alpha: float = 1.0,
                  include_recon: bool = True) -> LossBreakdown:
    total = (recon if include_recon else 0.0) + lam * prior + alpha * aux
    return LossBreakdown(float(recon), float(prior), float(aux), lam, alpha, float(total))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: ModelParameters, optimizer: dict | None = None,
                    extra: dict | None = None):
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "config": asdict(params.config),
        "params": {n: {"shape": list(params[n].shape), "data": params[n].ravel().tolist()}
                   for n in params.layout},
    }
    if optimizer is not None:
        doc["optimizer"] = optimizer
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[ModelParameters, dict | None, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema')!r}")
    cfg = ModelConfig(**doc["config"])
    chunks = []
    for name, shape in param_layout(cfg):
        entry = doc["params"][name]
        if tuple(entry["shape"]) != tuple(shape):
            raise ValueError(f"{name}: shape {entry['shape']} != {list(shape)}")
        chunks.append(np.asarray(entry["data"], dtype=float))
    return ModelParameters(cfg, np.concatenate(chunks)), doc.get("optimizer"), doc.get("extra", {})
