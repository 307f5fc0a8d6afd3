"""Small benchmark molecules and random test molecules."""

from __future__ import annotations

import numpy as np

from .molgraph import Conformation, MolecularGraph, expand_auxiliary_edges, make_graph


def _place(a, b, c, bond, angle, torsion):
    # natural extension reference frame placement from internal coordinates
    angle, torsion = np.radians(angle), np.radians(torsion)
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d2 = np.array([-bond * np.cos(angle), bond * np.sin(angle) * np.cos(torsion),
                   bond * np.sin(angle) * np.sin(torsion)])
    return c + d2[0] * bc + d2[1] * m + d2[2] * n


def from_zmatrix(rows, mol_id: str = "") -> tuple[MolecularGraph, Conformation]:
    """Build a molecule from rows (element, (ref, length, bond_type), (ref, angle), (ref, torsion)).

    Missing references are allowed for the first three atoms.
    """
    coords, elements, bonds = [], [], []
    for i, row in enumerate(rows):
        el = row[0]
        elements.append(el)
        if i == 0:
            coords.append(np.zeros(3))
            continue
        (ra, length, btype) = row[1]
        bonds.append((ra, i, btype))
        if i == 1:
            coords.append(np.array([length, 0.0, 0.0]))
            continue
        rb, ang = row[2]
        if i == 2:
            a, b = coords[ra], coords[rb]
            u = (b - a) / np.linalg.norm(b - a)
            th = np.radians(ang)
            perp = np.array([-u[1], u[0], 0.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
            perp -= (perp @ u) * u
            perp /= np.linalg.norm(perp)
            coords.append(a + length * (np.cos(th) * u + np.sin(th) * perp))
            continue
        rc, tor = row[3]
        coords.append(_place(coords[rc], coords[rb], coords[ra], length, ang, tor))
    return make_graph(elements, bonds, mol_id), Conformation(np.array(coords))


_S, _D = "single", "double"

# planar conformers: each equals its own mirror image, so distances fix them up to rotation.
# Every graph automorphism (e.g. the two halves of oxalic acid) is also a rotation of the
# conformer, so a graph-conditioned model can place every atom without guessing.
BENCHMARK_ZMATRICES = {
    "formic_acid": [
        ("C",), ("O", (0, 1.20, _D)), ("O", (0, 1.34, _S), (1, 125.0)),
        ("H", (0, 1.10, _S), (1, 123.0), (2, 180.0)),
        ("H", (2, 0.97, _S), (0, 107.0), (1, 0.0)),
    ],
    "glyoxal": [
        ("C",), ("C", (0, 1.52, _S)), ("O", (0, 1.21, _D), (1, 121.0)),
        ("O", (1, 1.21, _D), (0, 121.0), (2, 180.0)),
        ("H", (0, 1.10, _S), (1, 115.0), (2, 180.0)),
        ("H", (1, 1.10, _S), (0, 115.0), (3, 180.0)),
    ],
    "oxalic_acid": [
        ("C",), ("C", (0, 1.54, _S)), ("O", (0, 1.20, _D), (1, 122.0)),
        ("O", (1, 1.20, _D), (0, 122.0), (2, 180.0)),
        ("O", (0, 1.33, _S), (1, 112.0), (3, 0.0)),
        ("O", (1, 1.33, _S), (0, 112.0), (2, 0.0)),
        ("H", (4, 0.97, _S), (0, 107.0), (2, 0.0)),
        ("H", (5, 0.97, _S), (1, 107.0), (3, 0.0)),
    ],
    "glyoxylic_acid": [
        ("C",), ("C", (0, 1.53, _S)), ("O", (0, 1.21, _D), (1, 122.0)),
        ("O", (1, 1.21, _D), (0, 122.0), (2, 180.0)),
        ("O", (1, 1.34, _S), (0, 112.0), (2, 0.0)),
        ("H", (0, 1.10, _S), (1, 115.0), (3, 0.0)),
        ("H", (4, 0.97, _S), (1, 107.0), (3, 0.0)),
    ],
    "carbonic_acid": [
        ("C",), ("O", (0, 1.20, _D)), ("O", (0, 1.34, _S), (1, 125.0)),
        ("O", (0, 1.34, _S), (1, 125.0), (2, 180.0)),
        ("H", (2, 0.97, _S), (0, 107.0), (1, 0.0)),
        ("H", (3, 0.97, _S), (0, 107.0), (1, 0.0)),
    ],
}

# staggered conformers with a mirror plane that swaps labelled hydrogens
NONPLANAR_ZMATRICES = {
    "methanol": [
        ("C",), ("O", (0, 1.43, _S)), ("H", (1, 0.96, _S), (0, 108.9)),
        ("H", (0, 1.09, _S), (1, 109.5), (2, 180.0)),
        ("H", (0, 1.09, _S), (1, 109.5), (2, 60.0)),
        ("H", (0, 1.09, _S), (1, 109.5), (2, -60.0)),
    ],
    "ethanol": [
        ("C",), ("C", (0, 1.52, _S)), ("O", (1, 1.43, _S), (0, 109.5)),
        ("H", (2, 0.96, _S), (1, 108.5), (0, 180.0)),
        ("H", (0, 1.09, _S), (1, 110.0), (2, 180.0)),
        ("H", (0, 1.09, _S), (1, 110.0), (2, 60.0)),
        ("H", (0, 1.09, _S), (1, 110.0), (2, -60.0)),
        ("H", (1, 1.09, _S), (0, 110.0), (2, 120.0)),
        ("H", (1, 1.09, _S), (0, 110.0), (2, -120.0)),
    ],
    "acetaldehyde": [
        ("C",), ("C", (0, 1.50, _S)), ("O", (1, 1.21, _D), (0, 124.0)),
        ("H", (1, 1.10, _S), (0, 115.0), (2, 180.0)),
        ("H", (0, 1.09, _S), (1, 110.0), (2, 0.0)),
        ("H", (0, 1.09, _S), (1, 110.0), (2, 120.0)),
        ("H", (0, 1.09, _S), (1, 110.0), (2, -120.0)),
    ],
    "acetic_acid": [
        ("C",), ("C", (0, 1.50, _S)), ("O", (1, 1.21, _D), (0, 126.0)),
        ("O", (1, 1.36, _S), (0, 111.0), (2, 180.0)),
        ("H", (3, 0.97, _S), (1, 106.0), (2, 0.0)),
        ("H", (0, 1.09, _S), (1, 110.0), (2, 0.0)),
        ("H", (0, 1.09, _S), (1, 110.0), (2, 120.0)),
        ("H", (0, 1.09, _S), (1, 110.0), (2, -120.0)),
    ],
}


def benchmark_molecules(planar: bool = True) -> list[tuple[MolecularGraph, list[Conformation]]]:
    """Five small molecules (<= 10 atoms), one conformer each, unexpanded."""
    out = []
    table = BENCHMARK_ZMATRICES if planar else NONPLANAR_ZMATRICES
    for name, rows in table.items():
        g, R = from_zmatrix(rows, name)
        out.append((g, [R]))
    return out


def random_molecule(rng: np.random.Generator, n_atoms: int, ring_bonds: int = 1,
                    elements=("C", "C", "C", "N", "O")) -> tuple[MolecularGraph, Conformation]:
    """Random tree (plus a few ring closures) with a clash-free random conformation."""
    coords = [np.zeros(3)]
    bonds, degree = [], [0]
    for i in range(1, n_atoms):
        for _ in range(1000):
            parent = int(rng.choice([j for j in range(i) if degree[j] < 4]))
            direction = rng.standard_normal(3)
            pos = coords[parent] + 1.5 * direction / np.linalg.norm(direction)
            if min(np.linalg.norm(pos - c) for c in coords) >= 1.2:
                break
        coords.append(pos)
        bonds.append((parent, i, "single"))
        degree[parent] += 1
        degree.append(1)
    coords = np.array(coords)
    pairs = {(min(u, v), max(u, v)) for u, v, _ in bonds}
    candidates = [(i, j) for i in range(n_atoms) for j in range(i + 1, n_atoms)
                  if (i, j) not in pairs and np.linalg.norm(coords[i] - coords[j]) < 2.6]
    rng.shuffle(candidates)
    for i, j in candidates[:ring_bonds]:
        bonds.append((i, j, "single"))
    els = [str(rng.choice(elements)) for _ in range(n_atoms)]
    return make_graph(els, bonds, f"random{n_atoms}"), Conformation(coords)


def random_expanded_instance(rng: np.random.Generator, n_atoms: int, ring_bonds: int = 1):
    g, R = random_molecule(rng, n_atoms, ring_bonds)
    return expand_auxiliary_edges(g), R
