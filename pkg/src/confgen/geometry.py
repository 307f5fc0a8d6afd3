"""Rigid superposition (Kabsch) and RMSD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .molgraph import Conformation

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 50


class DegenerateAlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords) @ self.rotation.T + self.translation


def _coords(R) -> np.ndarray:
    return R.coords if isinstance(R, Conformation) else np.asarray(R, dtype=float)


def _perpendicular(u: np.ndarray) -> np.ndarray:
    # cross with the coordinate axis least aligned with u; lowest index wins ties
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(u)))] = 1.0
    w = np.cross(u, axis)
    return w / np.linalg.norm(w)


def svd3(A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a 3x3 matrix by one-sided Jacobi rotations.

    Returns U, s, V with A = U diag(s) V^T, s sorted descending (ties keep
    column order) and U, V orthogonal even when A is rank deficient.
    """
    W = np.array(A, dtype=float)
    V = np.eye(3)
    for _ in range(SVD_MAX_SWEEPS):
        rotated = False
        for p, q in ((0, 1), (0, 2), (1, 2)):
            alpha = W[:, p] @ W[:, p]
            beta = W[:, q] @ W[:, q]
            gamma = W[:, p] @ W[:, q]
            if abs(gamma) <= SVD_TOL * np.sqrt(alpha * beta) or gamma == 0.0:
                continue
            rotated = True
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * gamma)
                # |zeta| = inf gives t = 0, a no-op rotation
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for M in (W, V):
                mp, mq = M[:, p].copy(), M[:, q].copy()
                M[:, p] = c * mp - s * mq
                M[:, q] = s * mp + c * mq
        if not rotated:
            break
    sv = np.linalg.norm(W, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, W, V = sv[order], W[:, order], V[:, order]
    U = np.zeros((3, 3))
    scale = sv[0] if sv[0] > 0 else 1.0
    rank = int(np.sum(sv > SVD_TOL * scale)) if sv[0] > 0 else 0
    for k in range(rank):
        U[:, k] = W[:, k] / sv[k]
    if rank == 0:
        U = np.eye(3)
    elif rank == 1:
        U[:, 1] = _perpendicular(U[:, 0])
        U[:, 2] = np.cross(U[:, 0], U[:, 1])
    elif rank == 2:
        U[:, 2] = np.cross(U[:, 0], U[:, 1])
    return U, sv, V


def _mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != (n,):
        raise ValueError(f"mask has shape {m.shape}, expected ({n},)")
    return m


def kabsch_align(R, R_ref, mask=None, strict: bool = True) -> tuple[Conformation, RigidTransform]:
    """Rigidly move ``R_ref`` onto ``R`` minimising the masked RMSD.

    With ``strict=False`` fewer than three masked atoms are accepted; the
    rotation is then one of several optimal ones.
    """
    X, P = _coords(R), _coords(R_ref)
    if X.shape != P.shape:
        raise ValueError(f"atom counts differ: {X.shape[0]} vs {P.shape[0]}")
    m = _mask(mask, X.shape[0])
    if m.sum() < (3 if strict else 1):
        raise DegenerateAlignmentError(f"alignment needs >= 3 masked atoms, got {int(m.sum())}")
    x_bar, p_bar = X[m].mean(axis=0), P[m].mean(axis=0)
    H = (P[m] - p_bar).T @ (X[m] - x_bar)
    U, _, V = svd3(H)
    D = np.eye(3)
    if np.linalg.det(V @ U.T) < 0:
        D[2, 2] = -1.0
    rot = V @ D @ U.T
    T = RigidTransform(rot, x_bar - rot @ p_bar)
    return Conformation(T.apply(P)), T


def rmsd(R, R_hat, mask=None) -> float:
    X, Y = _coords(R), _coords(R_hat)
    if X.shape != Y.shape:
        raise ValueError(f"atom counts differ: {X.shape[0]} vs {Y.shape[0]}")
    m = _mask(mask, X.shape[0])
    if not m.any():
        raise ValueError("empty mask")
    diff = X[m] - Y[m]
    return float(np.sqrt(np.sum(diff * diff) / m.sum()))


def aligned_rmsd(R, R_ref, mask=None) -> float:
    aligned, _ = kabsch_align(R, R_ref, mask)
    return rmsd(R, aligned, mask)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
