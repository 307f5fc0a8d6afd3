"""Distance geometry by gradient descent, and its unrolled hypergradient."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tape as tp
from .geometry import kabsch_align
from .molgraph import Conformation, MolecularGraph, PreconditionError, ValidationError

EPS_NORM = tp.EPS_NORM
DIVERGENCE_THRESHOLD = 1e12


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"inner loop diverged at step {step} (objective {value:.3g})")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class InnerLoopConfig:
    steps: int = 100
    learning_rate: float = 0.01
    init_scale: float = 1.0
    restarts: int = 1
    store_trajectory: bool = False
    tol: float | None = None  # early stop on H < tol; never used while training

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


TRAIN_INNER = InnerLoopConfig()
SOLVE_INNER = InnerLoopConfig(steps=5000, learning_rate=0.08, restarts=10, tol=1e-10)


@dataclass(frozen=True)
class InnerTrajectory:
    states: list[np.ndarray]          # R_0 .. R_T when stored, else [R_T]
    objective_values: np.ndarray      # H(R_t, d) for every step run
    stored: bool

    @property
    def final(self) -> Conformation:
        return Conformation(self.states[-1])

    @property
    def steps(self) -> int:
        return len(self.objective_values) - 1


def _check(R: np.ndarray, d: np.ndarray, g: MolecularGraph):
    if not g.expanded:
        raise PreconditionError("graph must be expanded")
    if R.shape[-2:] != (g.n_atoms, 3):
        raise ValidationError(f"conformation shape {R.shape} does not match {g.n_atoms} atoms")
    if d.shape != (g.n_edges,):
        raise ValidationError(f"{d.shape[0]} distances for {g.n_edges} edges")
    if np.isnan(R).any() or np.isnan(d).any():
        raise ValueError("NaN in inner-loop inputs")


def _coords(R):
    return R.coords if isinstance(R, Conformation) else np.asarray(R, dtype=float)


def _terms(R: np.ndarray, d: np.ndarray, g: MolecularGraph):
    diff = R[..., g.src, :] - R[..., g.dst, :]
    s = np.sqrt(np.sum(diff * diff, axis=-1) + EPS_NORM)
    return diff, s


def inner_objective(R, d, g: MolecularGraph) -> float:
    R, d = _coords(R), np.asarray(d, dtype=float)
    _check(R, d, g)
    _, s = _terms(R, d, g)
    return float(np.sum((s - d) ** 2))


def inner_gradient(R, d, g: MolecularGraph) -> np.ndarray:
    R, d = _coords(R), np.asarray(d, dtype=float)
    _check(R, d, g)
    diff, s = _terms(R, d, g)
    contrib = (2.0 * (s - d) / s)[:, None] * diff
    grad = np.zeros_like(R)
    np.add.at(grad, g.src, contrib)
    np.add.at(grad, g.dst, -contrib)
    return grad


def solve_distance_geometry(d, g: MolecularGraph, cfg: InnerLoopConfig = SOLVE_INNER,
                            seed: int | np.random.Generator = 0, init: np.ndarray | None = None
                            ) -> InnerTrajectory:
    """Gradient descent on H from Gaussian starts; restarts run as one batch.

    ``init`` overrides the random start (shape n x 3 or restarts x n x 3).
    """
    d = np.asarray(d, dtype=float)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n, k = g.n_atoms, cfg.restarts
    if init is None:
        R = cfg.init_scale * rng.standard_normal((k, n, 3))
    else:
        R = np.broadcast_to(np.asarray(init, dtype=float), (k, n, 3)).copy()
    _check(R, d, g)
    Bt = g.incidence()  # n x m
    eta = cfg.learning_rate
    states = [R.copy()] if cfg.store_trajectory else None
    objectives = []
    alive = np.ones(k, dtype=bool)
    for t in range(cfg.steps + 1):
        diff, s = _terms(R, d, g)
        resid = s - d
        H = np.sum(resid * resid, axis=-1)
        bad = ~np.isfinite(H) | (H > DIVERGENCE_THRESHOLD)
        if np.any(bad & alive):
            alive &= ~bad
            if not alive.any():
                raise DivergenceError(t, float(np.nanmax(np.where(np.isfinite(H), H, np.inf))))
        objectives.append(np.where(alive, H, np.inf))
        if t == cfg.steps or (cfg.tol is not None and np.any(alive & (H < cfg.tol))):
            break
        contrib = (2.0 * resid / s)[..., None] * diff
        R = R - eta * (Bt @ contrib)
        R[~alive] = 0.0
        if states is not None:
            states.append(R.copy())
    objectives = np.array(objectives)  # steps x k
    best = int(np.argmin(objectives[-1]))
    if states is not None:
        kept = [S[best] for S in states]
    else:
        kept = [R[best]]
    return InnerTrajectory(kept, objectives[:, best].copy(), states is not None)


def outer_loss(R_T, R_ref, mask=None) -> float:
    """Sum of squared deviations from the reference aligned onto ``R_T``."""
    X = _coords(R_T)
    aligned, _ = kabsch_align(X, R_ref, mask, strict=False)
    diff = X - aligned.coords
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    return float(np.sum(diff * diff))


def outer_seed(R_T, R_ref, mask=None) -> tuple[float, np.ndarray]:
    """Outer loss and its gradient w.r.t. R_T with the alignment held fixed."""
    X = _coords(R_T)
    aligned, _ = kabsch_align(X, R_ref, mask, strict=False)
    diff = X - aligned.coords
    if mask is not None:
        diff = diff * np.asarray(mask, dtype=bool)[:, None]
    return float(np.sum(diff * diff)), 2.0 * diff


def _gradient_on_tape(t: tp.Tape, R: tp.Variable, d: tp.Variable, g: MolecularGraph) -> tp.Variable:
    # the analytic map (R, d) -> grad_R H, recorded so its VJPs give Hessian products
    diff = tp.gather(R, g.src) - tp.gather(R, g.dst)
    s = tp.smoothnorm(diff)
    coef = 2.0 * (s - d) / s
    contrib = tp.reshape(coef, (g.n_edges, 1)) * diff
    return tp.scatter(contrib, g.src, g.n_atoms) - tp.scatter(contrib, g.dst, g.n_atoms)


def gradient_map_vjp(R: np.ndarray, d: np.ndarray, g: MolecularGraph, cot: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """(cot . d(grad_R H)/dR, cot . d(grad_R H)/dd) at (R, d)."""
    t = tp.Tape()
    Rv, dv = t.leaf(R), t.leaf(d)
    out = _gradient_on_tape(t, Rv, dv, g)
    grads = tp.backward(t, out, cot)
    return grads[Rv], grads[dv]


def hypergradient(trajectory: InnerTrajectory, d, g: MolecularGraph, cfg: InnerLoopConfig,
                  outer_seed: np.ndarray, _corrupt: bool = False) -> np.ndarray:
    """Gradient of the outer loss w.r.t. the target distances by reverse unrolling.

    ``outer_seed`` is d(outer)/dR_T.  ``_corrupt`` drops the Hessian term of
    the reverse sweep; it only exists as a negative control for gradcheck.
    """
    if not trajectory.stored:
        raise PreconditionError("hypergradient needs a stored trajectory")
    d = np.asarray(d, dtype=float)
    states = trajectory.states
    eta = cfg.learning_rate
    adj = np.array(outer_seed, dtype=float)
    a_d = np.zeros_like(d)
    if not adj.any():
        return a_d
    for t in range(len(states) - 2, -1, -1):
        vhp, vjp_d = gradient_map_vjp(states[t], d, g, adj)
        a_d -= eta * vjp_d
        if not _corrupt:
            adj = adj - eta * vhp
    return a_d


def frozen_outer(d, g, cfg: InnerLoopConfig, init: np.ndarray, target: np.ndarray) -> float:
    """Outer loss against a fixed aligned target, for finite-difference checks."""
    traj = solve_distance_geometry(d, g, replace(cfg, restarts=1, store_trajectory=False, tol=None),
                                   init=init)
    diff = traj.states[-1] - target
    return float(np.sum(diff * diff))
