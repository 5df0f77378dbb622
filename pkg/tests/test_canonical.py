import numpy as np
import pytest

from stagediff.canon import canonical_form
from stagediff.chem import AtomVocab, BOND_SINGLE, MolGraph
from stagediff.smiles import parse_molecule

from oracles import brute_isomorphic, permute_molgraph, random_molgraph

VOCAB = AtomVocab.default()


def test_equal_under_permutation():
    g, _ = parse_molecule("CC(C)C(=O)O")
    base = canonical_form(g)
    rng = np.random.default_rng(0)
    for _ in range(100):
        perm = rng.permutation(g.n)
        assert canonical_form(permute_molgraph(g, perm)) == base


def test_distinguishes_constitutional_isomers(inner=None):
    a, _ = parse_molecule("CCO")
    b, _ = parse_molecule("COC")
    assert canonical_form(a) != canonical_form(b)


def test_distinguishes_bond_orders():
    a, _ = parse_molecule("CC=O")
    b, _ = parse_molecule("CCO")
    assert canonical_form(a) != canonical_form(b)


def test_empty_graph():
    assert canonical_form(MolGraph.empty(VOCAB)) == b"0|"


def test_disconnected_components_order_free():
    a, _ = parse_molecule("CCO.N")
    b, _ = parse_molecule("N.CCO")
    assert canonical_form(a) == canonical_form(b)


def test_highly_symmetric_ring():
    g, _ = parse_molecule("C1CCCCC1")
    rng = np.random.default_rng(1)
    base = canonical_form(g)
    for _ in range(20):
        assert canonical_form(permute_molgraph(g, rng.permutation(6))) == base


def test_matches_brute_force_on_random_pairs():
    # 500 random pairs up to 8 nodes: canonical equality iff isomorphism
    rng = np.random.default_rng(42)
    agree_iso = agree_non = 0
    for trial in range(500):
        a = random_molgraph(rng, VOCAB, max_n=8, p_edge=0.35)
        if trial % 2 == 0:
            b = permute_molgraph(a, rng.permutation(a.n))
            if rng.random() < 0.3 and a.n >= 2:
                # mutate one node label to force non-isomorphism
                cats = np.array(b.node_cat)
                i = int(rng.integers(b.n))
                cats[i] = 1 + (cats[i] % (VOCAB.width - 1))
                b = MolGraph(VOCAB, cats, b.edge_cat, b.node_tag)
        else:
            b = random_molgraph(rng, VOCAB, max_n=8, p_edge=0.35)
        iso = brute_isomorphic(a, b)
        same = canonical_form(a) == canonical_form(b)
        assert iso == same, f"trial {trial}: brute={iso} canon={same}"
        agree_iso += iso
        agree_non += not iso
    assert agree_iso > 50 and agree_non > 50


def test_tags_do_not_affect_form():
    g, _ = parse_molecule("CCN")
    from stagediff.chem import Tag
    assert canonical_form(g) == canonical_form(g.with_tags(Tag.GROUP))
