"""Canonical labeling for categorical graphs.

Iterative color refinement seeded by (atom category, degree, incident
bond-category multiset), with exhaustive individualization of tied color
classes. The returned byte string is equal for two graphs exactly when a
label-preserving isomorphism exists between them; node tags are ignored
(they encode roles, not labels).
"""

from __future__ import annotations

import numpy as np

from .chem import BOND_NONE, MolGraph

#: Deterministic serialization of a graph's isomorphism class.
CanonicalForm = bytes


def canonical_form(g: MolGraph) -> CanonicalForm:
    """Permutation-invariant byte serialization of ``g``'s isomorphism class."""
    n = g.n
    if n == 0:
        return b"0|"
    neigh = [[(int(g.edge_cat[i, j]), int(j)) for j in g.neighbors(i)] for i in range(n)]

    init_keys = []
    for i in range(n):
        orders = tuple(sorted(o for o, _ in neigh[i]))
        init_keys.append((int(g.node_cat[i]), len(neigh[i]), orders))
    colors = _rank(init_keys)

    best: list[bytes] = [b""]

    def refine(cols: np.ndarray) -> np.ndarray:
        while True:
            keys = [
                (int(cols[i]), tuple(sorted((o, int(cols[j])) for o, j in neigh[i])))
                for i in range(n)
            ]
            new = _rank(keys)
            if np.array_equal(new, cols):
                return new
            cols = new

    def descend(cols: np.ndarray):
        cols = refine(cols)
        counts = np.bincount(cols)
        if counts.max() == 1:
            candidate = _serialize(g, np.argsort(cols, kind="stable"))
            if not best[0] or candidate < best[0]:
                best[0] = candidate
            return
        target = int(np.flatnonzero(counts > 1)[0])
        for v in np.flatnonzero(cols == target):
            branched = [(int(cols[i]), 0 if i == v else 1) for i in range(n)]
            descend(_rank(branched))

    descend(colors)
    return best[0]


def _rank(keys) -> np.ndarray:
    """Map arbitrary sortable keys to dense integer colors."""
    lookup = {k: c for c, k in enumerate(sorted(set(keys)))}
    return np.array([lookup[k] for k in keys], dtype=np.intp)


def _serialize(g: MolGraph, order: np.ndarray) -> bytes:
    pos = np.empty(g.n, dtype=np.intp)
    pos[order] = np.arange(g.n)
    atoms = ",".join(str(int(g.node_cat[i])) for i in order)
    edges = sorted(
        (min(int(pos[i]), int(pos[j])), max(int(pos[i]), int(pos[j])), c)
        for i, j, c in g.bonds()
    )
    edge_txt = ";".join(f"{i}-{j}:{c}" for i, j, c in edges)
    return f"{g.n}|{atoms}|{edge_txt}".encode()


def isomorphic(a: MolGraph, b: MolGraph) -> bool:
    """Convenience label-preserving isomorphism test via canonical forms."""
    return canonical_form(a) == canonical_form(b)
