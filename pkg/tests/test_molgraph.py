import numpy as np
import pytest

from stagediff.chem import (
    AtomVocab, BOND_DOUBLE, BOND_NONE, BOND_SINGLE, ChemError, MolGraph, Tag,
    is_valid, molecular_weight, splice, strip_dummies,
)

VOCAB = AtomVocab.default()


def build(symbols, bonds=(), tags=None):
    return MolGraph.build(VOCAB, symbols, bonds, tags)


class TestVocab:
    def test_dummy_first(self):
        assert VOCAB.symbols[0] == "*"
        assert VOCAB.index("C") > 0

    def test_width_counts_dummy(self):
        assert VOCAB.width == VOCAB.n_real + 1

    def test_rejects_unknown_element(self):
        with pytest.raises(ChemError):
            AtomVocab(("*", "Xx"))

    def test_rejects_missing_dummy(self):
        with pytest.raises(ChemError):
            AtomVocab(("C", "O"))


class TestMolGraph:
    def test_symmetry_enforced(self):
        edges = np.zeros((2, 2), dtype=np.int16)
        edges[0, 1] = BOND_SINGLE
        with pytest.raises(ChemError):
            MolGraph(VOCAB, np.array([1, 1], dtype=np.int16), edges,
                     np.zeros(2, dtype=np.int8))

    def test_no_self_loops(self):
        edges = np.zeros((1, 1), dtype=np.int16)
        edges[0, 0] = BOND_SINGLE
        with pytest.raises(ChemError):
            MolGraph(VOCAB, np.array([1], dtype=np.int16), edges,
                     np.zeros(1, dtype=np.int8))

    def test_onehot_rows_sum_to_one(self):
        g = build(["C", "O"], [(0, 1, BOND_SINGLE)])
        assert np.array_equal(g.node_onehot().sum(axis=1), np.ones(2))
        assert np.array_equal(g.edge_onehot().sum(axis=2), np.ones((2, 2)))

    def test_immutable(self):
        g = build(["C"])
        with pytest.raises(ValueError):
            g.node_cat[0] = 2


class TestIsValid:
    def test_oxygen_over_valence(self):
        # O with three single neighbors exceeds valence 2
        g = build(["O", "C", "C", "C"],
                  [(0, 1, BOND_SINGLE), (0, 2, BOND_SINGLE), (0, 3, BOND_SINGLE)])
        assert not is_valid(g)

    def test_allene_center(self):
        g = build(["C", "C", "C"], [(0, 1, BOND_DOUBLE), (1, 2, BOND_DOUBLE)])
        assert is_valid(g)

    def test_empty_graph(self):
        assert is_valid(MolGraph.empty(VOCAB))

    def test_dummy_with_bond_invalid(self):
        g = build(["*", "C"], [(0, 1, BOND_SINGLE)])
        assert not is_valid(g)

    def test_permutation_invariant(self):
        from oracles import permute_molgraph, random_molgraph
        rng = np.random.default_rng(3)
        for _ in range(50):
            g = random_molgraph(rng, VOCAB, max_n=7)
            perm = rng.permutation(g.n)
            assert is_valid(g) == is_valid(permute_molgraph(g, perm))


class TestSplice:
    def test_disjoint_union_sizes(self):
        prod = build(["C", "C"], [(0, 1, BOND_SINGLE)])
        grp = build(["O"]).with_tags(Tag.GROUP)
        joint = splice([prod, grp])
        assert joint.n == 3
        assert joint.edge_cat[0, 2] == BOND_NONE
        assert joint.node_tag[2] == int(Tag.GROUP)

    def test_single_cross_edge(self):
        prod = build(["C", "C"], [(0, 1, BOND_SINGLE)])
        grp = build(["O"])
        joint = splice([prod, grp], [(1, 2, BOND_SINGLE)])
        cross = [(i, j) for i, j, _ in joint.bonds() if (i < 2) != (j < 2)]
        assert cross == [(1, 2)]

    def test_duplicate_cross_edge_rejected(self):
        prod = build(["C", "C"], [(0, 1, BOND_SINGLE)])
        grp = build(["O"])
        with pytest.raises(ChemError):
            splice([prod, grp], [(0, 1, BOND_SINGLE)])

    def test_splice_then_strip_identity(self):
        prod = build(["C", "O"], [(0, 1, BOND_SINGLE)])
        pad = build(["*", "*"]).with_tags(Tag.DUMMY)
        joint = splice([prod, pad])
        stripped, bad = strip_dummies(joint)
        assert bad == 0
        assert stripped.n == 2
        assert np.array_equal(stripped.node_cat, prod.node_cat)
        assert np.array_equal(stripped.edge_cat, prod.edge_cat)


class TestStripDummies:
    def test_removes_dummy_nodes(self):
        g = build(["C", "*", "O", "*", "*", "*", "*", "*", "*", "C"],
                  [(0, 2, BOND_SINGLE), (2, 9, BOND_SINGLE)])
        out, bad = strip_dummies(g)
        assert out.n == 3
        assert bad == 0

    def test_all_dummy_graph(self):
        g = build(["*", "*"])
        out, bad = strip_dummies(g)
        assert out.n == 0
        assert bad == 0

    def test_inconsistent_edge_reported(self):
        g = build(["*", "C"], [(0, 1, BOND_SINGLE)])
        out, bad = strip_dummies(g)
        assert out.n == 1
        assert bad == 1

    def test_index_compaction_preserves_order(self):
        g = build(["C", "*", "O"], [(0, 2, BOND_DOUBLE)])
        out, _ = strip_dummies(g)
        assert [out.symbol(i) for i in range(2)] == ["C", "O"]
        assert out.edge_cat[0, 1] == BOND_DOUBLE


class TestWeight:
    def test_co2(self):
        g = build(["O", "C", "O"], [(0, 1, BOND_DOUBLE), (1, 2, BOND_DOUBLE)])
        assert molecular_weight(g) == pytest.approx(44.009, abs=1e-6)

    def test_dummy_contributes_nothing(self):
        g = build(["C", "*"])
        assert molecular_weight(g) == pytest.approx(12.011)
