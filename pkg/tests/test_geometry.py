import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from confgen.geometry import (DegenerateAlignmentError, aligned_rmsd, kabsch_align, random_rotation,
                              rmsd, svd3)


def rotz(deg):
    a = np.radians(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])


def brute_force_rmsd(X, P, n=100_000, seed=0):
    """Minimum centred RMSD over random rotations, refined by shrinking random perturbations."""
    rng = np.random.default_rng(seed)
    Xc, Pc = X - X.mean(0), P - P.mean(0)
    Q = Rotation.random(n, random_state=rng).as_matrix()
    vals = np.sqrt(np.mean(np.sum((np.einsum("kij,nj->kni", Q, Pc) - Xc) ** 2, axis=-1), axis=-1))
    best = Q[np.argmin(vals)]
    best_val = vals.min()
    for scale in (0.05, 0.01, 2e-3, 5e-4, 1e-4, 2e-5):
        steps = Rotation.from_rotvec(scale * rng.standard_normal((2000, 3))).as_matrix()
        cand = steps @ best
        v = np.sqrt(np.mean(np.sum((np.einsum("kij,nj->kni", cand, Pc) - Xc) ** 2, axis=-1), axis=-1))
        if v.min() < best_val:
            best_val, best = v.min(), cand[np.argmin(v)]
    return best_val


def test_svd3_reconstructs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        A = rng.normal(size=(3, 3))
        U, s, V = svd3(A)
        np.testing.assert_allclose(U @ np.diag(s) @ V.T, A, atol=1e-10)
        np.testing.assert_allclose(U.T @ U, np.eye(3), atol=1e-10)
        np.testing.assert_allclose(V.T @ V, np.eye(3), atol=1e-10)
        assert np.all(np.diff(s) <= 1e-12)
        np.testing.assert_allclose(s, np.linalg.svd(A, compute_uv=False), atol=1e-10)


@pytest.mark.parametrize("rank", [0, 1, 2])
def test_svd3_rank_deficient(rank):
    rng = np.random.default_rng(rank)
    A = sum(np.outer(rng.normal(size=3), rng.normal(size=3)) for _ in range(rank)) if rank else np.zeros((3, 3))
    U, s, V = svd3(A)
    np.testing.assert_allclose(U @ np.diag(s) @ V.T, A, atol=1e-10)
    np.testing.assert_allclose(U.T @ U, np.eye(3), atol=1e-10)


def test_align_identity():
    R = np.random.default_rng(1).normal(size=(6, 3))
    aligned, T = kabsch_align(R, R)
    np.testing.assert_allclose(aligned.coords, R, atol=1e-10)
    np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(T.translation, 0, atol=1e-10)


def test_align_known_motion():
    R = np.random.default_rng(2).normal(size=(7, 3))
    R_ref = R @ rotz(37).T + np.array([1, 2, 3])
    aligned, T = kabsch_align(R, R_ref)
    assert rmsd(R, aligned) < 1e-8
    assert abs(np.linalg.det(T.rotation) - 1) < 1e-9
    np.testing.assert_allclose(T.rotation.T @ T.rotation, np.eye(3), atol=1e-9)


def test_align_mirror_stays_proper():
    R = np.random.default_rng(3).normal(size=(4, 3))
    mirror = R * np.array([-1, 1, 1])
    aligned, T = kabsch_align(R, mirror)
    assert abs(np.linalg.det(T.rotation) - 1) < 1e-9
    got = rmsd(R, aligned)
    assert got > 0
    brute = brute_force_rmsd(R, mirror)
    assert got <= brute + 1e-9
    assert brute - got < 1e-3


def test_aligned_rmsd_matches_brute_force():
    rng = np.random.default_rng(4)
    X, P = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert abs(aligned_rmsd(X, P) - brute_force_rmsd(X, P, seed=1)) < 1e-3


@pytest.mark.parametrize("seed", range(20))
def test_aligned_rmsd_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 12))
    X, P = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    Xc, Pc = X - X.mean(0), P - P.mean(0)
    rot, _ = Rotation.align_vectors(Xc, Pc)
    ref = np.sqrt(np.mean(np.sum((rot.apply(Pc) - Xc) ** 2, axis=1)))
    assert abs(aligned_rmsd(X, P) - ref) < 1e-8


def test_rmsd_examples():
    R = np.random.default_rng(5).normal(size=(3, 3))
    assert rmsd(R, R) == 0.0
    assert rmsd([[0, 0, 0]], [[2, 0, 0]]) == pytest.approx(2.0)
    assert rmsd(np.zeros((3, 3)), np.eye(3)) == pytest.approx(1.0)


def test_rmsd_empty_mask():
    with pytest.raises(ValueError):
        rmsd(np.zeros((2, 3)), np.zeros((2, 3)), mask=[False, False])


def test_alignment_needs_three_atoms():
    with pytest.raises(DegenerateAlignmentError):
        kabsch_align(np.zeros((4, 3)), np.ones((4, 3)), mask=[True, True, False, False])
    # non-strict mode accepts it, translation alone matches one atom
    aligned, _ = kabsch_align(np.zeros((2, 3)), np.ones((2, 3)), mask=[True, False], strict=False)
    np.testing.assert_allclose(aligned.coords[0], 0, atol=1e-12)


def test_rigid_motion_gives_zero():
    rng = np.random.default_rng(6)
    R = rng.normal(size=(8, 3))
    assert aligned_rmsd(R, R @ random_rotation(rng).T + rng.normal(size=3)) < 1e-8


def test_scaling_is_not_rigid():
    R = np.random.default_rng(7).normal(size=(6, 3))
    assert aligned_rmsd(R, 2 * R) > 0.1


def test_invariance_and_symmetry():
    rng = np.random.default_rng(8)
    for _ in range(50):
        R, R_ref = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        base = aligned_rmsd(R, R_ref)
        moved = R @ random_rotation(rng).T + rng.normal(scale=5, size=3)
        assert abs(aligned_rmsd(moved, R_ref) - base) < 1e-8
        assert abs(aligned_rmsd(R_ref, R) - base) < 1e-8


def test_optimal_over_random_transforms():
    rng = np.random.default_rng(9)
    R, R_ref = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    best = aligned_rmsd(R, R_ref)
    for _ in range(1000):
        moved = R_ref @ random_rotation(rng).T + rng.normal(size=3)
        assert best <= rmsd(R, moved) + 1e-12


def test_collinear_points_align():
    R = np.outer(np.arange(4.0), [1, 0, 0])
    R_ref = np.outer(np.arange(4.0), [0, 1, 0]) + 3.0
    aligned, T = kabsch_align(R, R_ref)
    assert rmsd(R, aligned) < 1e-10
    assert abs(np.linalg.det(T.rotation) - 1) < 1e-9


def test_heavy_mask_alignment():
    rng = np.random.default_rng(10)
    R = rng.normal(size=(6, 3))
    R_ref = R @ rotz(50).T
    R_ref[4:] += 3.0  # only the unmasked atoms differ
    mask = np.array([1, 1, 1, 1, 0, 0], bool)
    assert aligned_rmsd(R, R_ref, mask) < 1e-8


def test_random_rotation_proper():
    rng = np.random.default_rng(11)
    for _ in range(20):
        Q = random_rotation(rng)
        np.testing.assert_allclose(Q.T @ Q, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(Q) - 1) < 1e-12
