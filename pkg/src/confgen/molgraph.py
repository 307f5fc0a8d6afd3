"""Molecular graphs, conformations and the JSON-lines dataset format."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

ELEMENTS = ("H", "C", "N", "O", "F", "S", "Cl")
OTHER = "OTHER"
VOCAB = ELEMENTS + (OTHER,)

BOND_TYPES = ("single", "double", "triple", "aromatic", "virtual2", "virtual3")
BOND_RANK = {b: i for i, b in enumerate(BOND_TYPES)}
VIRTUAL_TYPES = ("virtual2", "virtual3")


class ParseError(ValueError):
    """Malformed dataset line."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class ValidationError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class AtomRecord:
    element: str

    @property
    def is_heavy(self) -> bool:
        return self.element != "H"

    @property
    def vocab_index(self) -> int:
        return VOCAB.index(self.element) if self.element in ELEMENTS else len(ELEMENTS)


@dataclass(frozen=True)
class EdgeRecord:
    u: int
    v: int
    bond_type: str

    def key(self):
        return (min(self.u, self.v), max(self.u, self.v), BOND_RANK[self.bond_type])


@dataclass(frozen=True)
class MolecularGraph:
    atoms: tuple[AtomRecord, ...]
    edges: tuple[EdgeRecord, ...]
    expanded: bool = False
    id: str = ""
    # cached index arrays, derived in __post_init__
    _u: np.ndarray = field(init=False, repr=False, compare=False)
    _v: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.atoms)
        seen = set()
        for e in self.edges:
            if e.bond_type not in BOND_RANK:
                raise ValidationError(f"unknown bond type {e.bond_type!r}")
            if not (0 <= e.u < n and 0 <= e.v < n) or e.u == e.v:
                raise ValidationError(f"edge ({e.u}, {e.v}) invalid for {n} atoms")
            if e.bond_type in VIRTUAL_TYPES and not self.expanded:
                raise ValidationError("virtual edges are only allowed in expanded graphs")
            pair = (min(e.u, e.v), max(e.u, e.v))
            if pair in seen:
                raise ValidationError(f"duplicate edge {pair}")
            seen.add(pair)
        edges = tuple(sorted(
            (EdgeRecord(min(e.u, e.v), max(e.u, e.v), e.bond_type) for e in self.edges),
            key=EdgeRecord.key,
        ))
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "_u", np.array([e.u for e in edges], dtype=np.intp))
        object.__setattr__(self, "_v", np.array([e.v for e in edges], dtype=np.intp))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def src(self) -> np.ndarray:
        return self._u

    @property
    def dst(self) -> np.ndarray:
        return self._v

    @property
    def bonds(self) -> tuple[EdgeRecord, ...]:
        """Original chemical bonds (virtual edges excluded)."""
        return tuple(e for e in self.edges if e.bond_type not in VIRTUAL_TYPES)

    @property
    def elements(self) -> list[str]:
        return [a.element for a in self.atoms]

    def heavy_mask(self) -> np.ndarray:
        return np.array([a.is_heavy for a in self.atoms], dtype=bool)

    def element_onehot(self) -> np.ndarray:
        out = np.zeros((self.n_atoms, len(VOCAB)))
        out[np.arange(self.n_atoms), [a.vocab_index for a in self.atoms]] = 1.0
        return out

    def bond_onehot(self) -> np.ndarray:
        out = np.zeros((self.n_edges, len(BOND_TYPES)))
        out[np.arange(self.n_edges), [BOND_RANK[e.bond_type] for e in self.edges]] = 1.0
        return out

    def incidence(self) -> np.ndarray:
        """Signed n x m incidence matrix: +1 at the first endpoint, -1 at the second."""
        B = np.zeros((self.n_atoms, self.n_edges))
        idx = np.arange(self.n_edges)
        B[self._u, idx] = 1.0
        B[self._v, idx] = -1.0
        return B

    def permute(self, perm: Sequence[int]) -> "MolecularGraph":
        """Relabel atoms so that new atom perm[i] is old atom i."""
        perm = list(perm)
        atoms = [None] * self.n_atoms
        for old, new in enumerate(perm):
            atoms[new] = self.atoms[old]
        edges = [EdgeRecord(perm[e.u], perm[e.v], e.bond_type) for e in self.edges]
        return MolecularGraph(tuple(atoms), tuple(edges), self.expanded, self.id)


@dataclass(frozen=True)
class Conformation:
    coords: np.ndarray

    def __post_init__(self):
        c = np.array(self.coords, dtype=float)
        if c.ndim != 2 or c.shape[1] != 3:
            raise ValidationError(f"coordinates must be n x 3, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValidationError("coordinates must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def n_atoms(self) -> int:
        return self.coords.shape[0]


def make_graph(elements: Iterable[str], bonds: Iterable[tuple], mol_id: str = "",
               expanded: bool = False) -> MolecularGraph:
    atoms = []
    for el in elements:
        if el not in ELEMENTS:
            log.warning("unknown element %r mapped to %s", el, OTHER)
        atoms.append(AtomRecord(el))
    edges = [EdgeRecord(int(u), int(v), str(bt)) for u, v, bt in bonds]
    return MolecularGraph(tuple(atoms), tuple(edges), expanded, mol_id)


def _hop_distances(n: int, edges: Sequence[EdgeRecord], source: int, limit: int) -> dict[int, int]:
    adj = [[] for _ in range(n)]
    for e in edges:
        adj[e.u].append(e.v)
        adj[e.v].append(e.u)
    dist = {source: 0}
    queue = deque([source])
    while queue:
        x = queue.popleft()
        if dist[x] == limit:
            continue
        for y in adj[x]:
            if y not in dist:
                dist[y] = dist[x] + 1
                queue.append(y)
    return dist


def expand_auxiliary_edges(g: MolecularGraph) -> MolecularGraph:
    """Connect atoms 2 and 3 bonds apart with virtual2 / virtual3 edges.

    Hop counts come from the chemical bonds only.
    """
    if g.expanded:
        raise PreconditionError(f"graph {g.id!r} is already expanded")
    bonds = g.bonds
    new = list(bonds)
    for s in range(g.n_atoms):
        for t, hops in _hop_distances(g.n_atoms, bonds, s, 3).items():
            if t > s and hops in (2, 3):
                new.append(EdgeRecord(s, t, f"virtual{hops}"))
    return MolecularGraph(g.atoms, tuple(new), True, g.id)


def original_graph(g: MolecularGraph) -> MolecularGraph:
    """Strip virtual edges, returning an unexpanded graph."""
    return MolecularGraph(g.atoms, g.bonds, False, g.id)


def distances_from_conformation(g: MolecularGraph, R: Conformation | np.ndarray) -> np.ndarray:
    if not g.expanded:
        raise PreconditionError("distances are defined on the expanded edge set")
    coords = R.coords if isinstance(R, Conformation) else np.asarray(R, dtype=float)
    if coords.shape[0] != g.n_atoms:
        raise ValidationError(f"conformation has {coords.shape[0]} atoms, graph has {g.n_atoms}")
    return np.linalg.norm(coords[g.src] - coords[g.dst], axis=1)


# ---------------------------------------------------------------------------
# dataset IO


def _record_to_molecule(rec: dict, lineno: int) -> tuple[MolecularGraph, list[Conformation]]:
    try:
        atoms = list(rec["atoms"])
        bonds = [tuple(b) for b in rec.get("bonds", [])]
        confs = rec.get("conformers", [])
        mol_id = str(rec.get("id", f"mol{lineno}"))
    except (KeyError, TypeError) as exc:
        raise ParseError(lineno, f"missing or malformed field: {exc}") from exc
    if any(len(b) != 3 for b in bonds):
        raise ParseError(lineno, "bonds must be [u, v, type] triples")
    try:
        g = make_graph(atoms, bonds, mol_id, expanded=bool(rec.get("expanded", False)))
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from exc
    out = []
    for k, c in enumerate(confs):
        arr = np.asarray(c, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ParseError(lineno, f"conformer {k} is not an n x 3 array")
        if arr.shape[0] != g.n_atoms:
            raise ValidationError(
                f"line {lineno}: conformer {k} has {arr.shape[0]} coordinates for {g.n_atoms} atoms")
        out.append(Conformation(arr))
    return g, out


def parse_dataset(path: str | Path) -> list[tuple[MolecularGraph, list[Conformation]]]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise ParseError(lineno, "record must be a JSON object")
            out.append(_record_to_molecule(rec, lineno))
    return out


def molecule_to_record(g: MolecularGraph, confs: Sequence[Conformation]) -> dict:
    rec = {
        "id": g.id,
        "atoms": g.elements,
        "bonds": [[e.u, e.v, e.bond_type] for e in g.edges],
        "conformers": [np.asarray(c.coords).tolist() for c in confs],
    }
    if g.expanded:
        rec["expanded"] = True
    return rec


def write_dataset(path: str | Path, molecules: Iterable[tuple[MolecularGraph, Sequence[Conformation]]]):
    with open(path, "w") as fh:
        for g, confs in molecules:
            fh.write(json.dumps(molecule_to_record(g, confs)) + "\n")


def to_xyz(g: MolecularGraph, R: Conformation, comment: str = "") -> str:
    lines = [str(g.n_atoms), comment.replace("\n", " ")]
    for el, (x, y, z) in zip(g.elements, R.coords):
        lines.append(f"{el} {x:.6f} {y:.6f} {z:.6f}")
    return "\n".join(lines) + "\n"
