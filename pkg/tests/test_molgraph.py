import json
import logging

import numpy as np
import pytest
from scipy.sparse.csgraph import shortest_path

from confgen.geometry import random_rotation
from confgen.molgraph import (OTHER, VOCAB, Conformation, ParseError, PreconditionError, ValidationError,
                              distances_from_conformation, expand_auxiliary_edges, make_graph,
                              original_graph, parse_dataset, to_xyz, write_dataset)
from confgen.synthetic import random_molecule


def _write(tmp_path, lines):
    p = tmp_path / "data.jsonl"
    p.write_text("\n".join(lines) + "\n")
    return p


WATER = {"id": "water", "atoms": ["O", "H", "H"], "bonds": [[0, 1, "single"], [0, 2, "single"]],
         "conformers": [[[0, 0, 0], [0.96, 0, 0], [-0.24, 0.93, 0]]]}


def test_parse_water(tmp_path):
    (g, confs), = parse_dataset(_write(tmp_path, [json.dumps(WATER)]))
    assert g.n_atoms == 3 and g.n_edges == 2
    assert not g.expanded
    assert len(confs) == 1 and confs[0].coords.shape == (3, 3)


def test_parse_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert parse_dataset(p) == []


def test_parse_atom_count_mismatch(tmp_path):
    rec = dict(WATER, conformers=[[[0, 0, 0]] * 4])
    with pytest.raises(ValidationError):
        parse_dataset(_write(tmp_path, [json.dumps(rec)]))


def test_parse_error_names_line(tmp_path):
    with pytest.raises(ParseError, match="line 2"):
        parse_dataset(_write(tmp_path, [json.dumps(WATER), "{not json"]))


def test_roundtrip_write(tmp_path):
    g, R = random_molecule(np.random.default_rng(1), 7)
    ge = expand_auxiliary_edges(g)
    p = tmp_path / "out.jsonl"
    write_dataset(p, [(ge, [R])])
    (g2, confs), = parse_dataset(p)
    assert g2.expanded and g2.edges == ge.edges
    np.testing.assert_array_equal(confs[0].coords, R.coords)


def test_path_three():
    g = expand_auxiliary_edges(make_graph("CCC", [(0, 1, "single"), (1, 2, "single")]))
    assert g.n_edges == 3
    assert [(e.u, e.v, e.bond_type) for e in g.edges if e.bond_type.startswith("virtual")] == [(0, 2, "virtual2")]


def test_path_four():
    g = expand_auxiliary_edges(make_graph("CCCC", [(0, 1, "single"), (1, 2, "single"), (2, 3, "single")]))
    assert g.n_edges == 6
    virt = {(e.u, e.v): e.bond_type for e in g.edges if e.bond_type.startswith("virtual")}
    assert virt == {(0, 2): "virtual2", (1, 3): "virtual2", (0, 3): "virtual3"}


def test_triangle_no_virtual():
    g = expand_auxiliary_edges(make_graph("CCC", [(0, 1, "single"), (1, 2, "single"), (0, 2, "single")]))
    assert g.n_edges == 3


def test_expand_twice_refused():
    g = expand_auxiliary_edges(make_graph("CC", [(0, 1, "single")]))
    with pytest.raises(PreconditionError):
        expand_auxiliary_edges(g)


def test_expansion_idempotent_via_original():
    g, _ = random_molecule(np.random.default_rng(3), 9)
    ge = expand_auxiliary_edges(g)
    assert expand_auxiliary_edges(original_graph(ge)).edges == ge.edges


def test_edge_order_sorted():
    g, _ = random_molecule(np.random.default_rng(4), 10)
    keys = [e.key() for e in expand_auxiliary_edges(g).edges]
    assert keys == sorted(keys)


@pytest.mark.parametrize("seed", range(25))
def test_expansion_matches_bfs_oracle(seed):
    rng = np.random.default_rng(seed)
    g, _ = random_molecule(rng, int(rng.integers(2, 13)), ring_bonds=int(rng.integers(0, 3)))
    n = g.n_atoms
    A = np.zeros((n, n))
    for e in g.edges:
        A[e.u, e.v] = A[e.v, e.u] = 1
    D = shortest_path(A, unweighted=True)
    ge = expand_auxiliary_edges(g)
    assert set(g.edges) <= set(ge.edges)
    want = {(i, j, "virtual2" if D[i, j] == 2 else "virtual3")
            for i in range(n) for j in range(i + 1, n) if D[i, j] in (2, 3)}
    got = {(e.u, e.v, e.bond_type) for e in ge.edges if e.bond_type.startswith("virtual")}
    assert got == want


def test_virtual_edges_need_expanded_flag():
    with pytest.raises(ValidationError):
        make_graph("CCC", [(0, 2, "virtual2")])


def test_invalid_edges():
    with pytest.raises(ValidationError):
        make_graph("CC", [(0, 0, "single")])
    with pytest.raises(ValidationError):
        make_graph("CC", [(0, 1, "single"), (1, 0, "double")])
    with pytest.raises(ValidationError):
        make_graph("CC", [(0, 5, "single")])


def test_unknown_element_warns(caplog):
    with caplog.at_level(logging.WARNING):
        g = make_graph(["C", "Xe"], [(0, 1, "single")])
    assert g.atoms[1].vocab_index == VOCAB.index(OTHER)
    assert "Xe" in caplog.text
    assert g.heavy_mask().tolist() == [True, True]


def test_conformation_rejects_nan():
    with pytest.raises(ValidationError):
        Conformation(np.array([[0, 0, np.nan]]))
    with pytest.raises(ValidationError):
        Conformation(np.zeros((3, 2)))


def test_distances_unit_bond():
    g = expand_auxiliary_edges(make_graph("CC", [(0, 1, "single")]))
    R = np.array([[0.0, 0, 0], [1, 0, 0]])
    np.testing.assert_allclose(distances_from_conformation(g, R), [1.0])
    Q = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    np.testing.assert_allclose(distances_from_conformation(g, R @ Q.T + 5.0), [1.0])


def test_distances_triangle_order():
    g = expand_auxiliary_edges(make_graph("CCC", [(0, 1, "single"), (1, 2, "single"), (0, 2, "single")]))
    R = np.array([[0.0, 0, 0], [3, 0, 0], [3, 4, 0]])
    # edge order (0,1), (0,2), (1,2)
    np.testing.assert_allclose(distances_from_conformation(g, R), [3, 5, 4])


def test_distances_need_expanded_graph():
    g = make_graph("CC", [(0, 1, "single")])
    with pytest.raises(PreconditionError):
        distances_from_conformation(g, np.zeros((2, 3)))


def test_distances_atom_mismatch():
    g = expand_auxiliary_edges(make_graph("CC", [(0, 1, "single")]))
    with pytest.raises(ValidationError):
        distances_from_conformation(g, np.zeros((3, 3)))


def test_distances_rigid_invariance():
    rng = np.random.default_rng(0)
    g, R = random_molecule(rng, 10)
    g = expand_auxiliary_edges(g)
    d = distances_from_conformation(g, R)
    for _ in range(100):
        Q = random_rotation(rng)
        moved = R.coords @ Q.T + rng.normal(scale=10, size=3)
        assert np.max(np.abs(distances_from_conformation(g, moved) - d)) < 1e-10


def test_xyz_format():
    g = make_graph("OHH", [(0, 1, "single"), (0, 2, "single")])
    text = to_xyz(g, Conformation(np.array(WATER["conformers"][0], float)), "water")
    lines = text.splitlines()
    assert lines[0] == "3" and lines[1] == "water"
    assert lines[2] == "O 0.000000 0.000000 0.000000"
    assert all(len(l.split()) == 4 for l in lines[2:])
