"""Coverage / matching scores and MMD between distance distributions."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import kabsch_align, rmsd
from .molgraph import Conformation, MolecularGraph

log = logging.getLogger(__name__)

MMD_ELEMENTS = ("C", "O")


@dataclass(frozen=True)
class MetricConfig:
    delta: float = 0.5
    heavy_only: bool = True
    generated_multiplier: int = 2

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if self.generated_multiplier < 1:
            raise ValueError("generated_multiplier must be >= 1")


@dataclass(frozen=True)
class MmdConfig:
    bandwidth: str | float = "median"
    estimator: str = "biased"

    def __post_init__(self):
        if self.bandwidth != "median" and not float(self.bandwidth) > 0:
            raise ValueError("fixed bandwidth must be > 0")
        if self.estimator != "biased":
            raise ValueError("only the biased estimator is implemented")


@dataclass
class ConformerSet:
    graph: MolecularGraph
    conformers: list[Conformation]
    role: str = "reference"

    def __post_init__(self):
        for c in self.conformers:
            if c.n_atoms != self.graph.n_atoms:
                raise ValueError(f"conformer with {c.n_atoms} atoms in a {self.graph.n_atoms}-atom set")


def _mask(g: MolecularGraph, heavy_only: bool) -> np.ndarray:
    m = g.heavy_mask() if heavy_only else np.ones(g.n_atoms, dtype=bool)
    if not m.any():
        raise ValueError(f"molecule {g.id!r} has no atoms under the metric mask")
    return m


def pair_rmsd(R, R_ref, mask) -> float:
    # metrics accept 1-2 masked atoms; the optimal RMSD is still well defined there
    aligned, _ = kabsch_align(R, R_ref, mask, strict=False)
    return rmsd(R, aligned, mask)


def rmsd_matrix(S_g: Sequence[Conformation], S_r: Sequence[Conformation], graph: MolecularGraph,
                heavy_only: bool = True) -> np.ndarray:
    """Aligned RMSD for every (reference, generated) pair, shape n_ref x n_gen."""
    if not S_g or not S_r:
        raise ValueError("conformer sets must be nonempty")
    mask = _mask(graph, heavy_only)
    return np.array([[pair_rmsd(Rg, Rr, mask) for Rg in S_g] for Rr in S_r])


def coverage_from_matrix(M: np.ndarray, delta: float) -> float:
    return float(np.mean(M.min(axis=1) < delta))


def matching_from_matrix(M: np.ndarray) -> float:
    return float(np.mean(M.min(axis=1)))


def _sets(S_g, S_r):
    if isinstance(S_g, ConformerSet):
        if S_g.graph.atoms != S_r.graph.atoms:
            raise ValueError("generated and reference sets describe different molecules")
        return S_g.graph, S_g.conformers, S_r.conformers
    raise TypeError("expected ConformerSet arguments")


def coverage(S_g: ConformerSet, S_r: ConformerSet, cfg: MetricConfig = MetricConfig()) -> float:
    g, gen, ref = _sets(S_g, S_r)
    return coverage_from_matrix(rmsd_matrix(gen, ref, g, cfg.heavy_only), cfg.delta)


def matching(S_g: ConformerSet, S_r: ConformerSet, cfg: MetricConfig = MetricConfig()) -> float:
    g, gen, ref = _sets(S_g, S_r)
    return matching_from_matrix(rmsd_matrix(gen, ref, g, cfg.heavy_only))


def coverage_grid(M: np.ndarray, deltas: Sequence[float]) -> list[float]:
    return [coverage_from_matrix(M, d) for d in deltas]


# --------------------------------------------------------------------------
# MMD


def _sqdist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)


def median_bandwidth(pooled: np.ndarray) -> float:
    D = np.sqrt(_sqdist(pooled, pooled))
    iu = np.triu_indices(len(pooled), 1)
    sigma = float(np.median(D[iu])) if iu[0].size else 0.0
    if sigma <= 0:
        log.warning("median heuristic bandwidth is zero; falling back to 1.0")
        sigma = 1.0
    return sigma


def mmd(samples_a, samples_b, cfg: MmdConfig = MmdConfig()) -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel."""
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("samples must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if cfg.bandwidth == "median":
        sigma = median_bandwidth(np.concatenate([a, b]))
    else:
        sigma = float(cfg.bandwidth)
    gamma = 1.0 / (2.0 * sigma * sigma)
    kaa = np.exp(-gamma * _sqdist(a, a)).mean()
    kbb = np.exp(-gamma * _sqdist(b, b)).mean()
    kab = np.exp(-gamma * _sqdist(a, b)).mean()
    return float(max(kaa + kbb - 2.0 * kab, 0.0))


@dataclass
class DistanceSamples:
    pairs: list[tuple[int, int]]
    joint: np.ndarray                     # n_conformers x n_pairs
    marginals: list[np.ndarray] = field(default_factory=list)
    pair_streams: list[np.ndarray] = field(default_factory=list)


def distance_samples(cset: ConformerSet, strict: bool = False) -> DistanceSamples:
    """Interatomic distances among C and O atoms, per conformer.

    ``strict`` keeps only C-O pairs; otherwise every pair of C/O atoms is used.
    """
    if not cset.conformers:
        raise ValueError("conformer set is empty")
    els = cset.graph.elements
    idx = [i for i, e in enumerate(els) if e in MMD_ELEMENTS]
    pairs = [(i, j) for i, j in itertools.combinations(idx, 2)
             if not strict or {els[i], els[j]} == set(MMD_ELEMENTS)]
    if not pairs:
        log.warning("molecule %r has no C/O atom pairs", cset.graph.id)
        return DistanceSamples([], np.zeros((len(cset.conformers), 0)))
    u = np.array([p[0] for p in pairs])
    v = np.array([p[1] for p in pairs])
    joint = np.array([np.linalg.norm(c.coords[u] - c.coords[v], axis=1) for c in cset.conformers])
    marginals = [joint[:, k] for k in range(len(pairs))]
    streams = [joint[:, [a, b]] for a, b in itertools.combinations(range(len(pairs)), 2)]
    return DistanceSamples(pairs, joint, marginals, streams)


def mmd_report(S_g: ConformerSet, S_r: ConformerSet, cfg: MmdConfig = MmdConfig(),
               strict: bool = False) -> dict[str, float]:
    gen, ref = distance_samples(S_g, strict), distance_samples(S_r, strict)
    if not gen.pairs:
        nan = float("nan")
        return {"mmd_single_mean": nan, "mmd_pair_mean": nan, "mmd_joint": nan}
    single = [mmd(a, b, cfg) for a, b in zip(gen.marginals, ref.marginals)]
    pair = [mmd(a, b, cfg) for a, b in zip(gen.pair_streams, ref.pair_streams)]
    return {
        "mmd_single_mean": float(np.mean(single)),
        "mmd_pair_mean": float(np.mean(pair)) if pair else float("nan"),
        "mmd_joint": mmd(gen.joint, ref.joint, cfg),
    }


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return float(np.mean(arr)), float(np.median(arr))
