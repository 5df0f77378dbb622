"""Molecular graph data model: categorical node/edge states with a dummy slot.

Graphs carry one categorical state per atom and per atom pair. Category 0 is
reserved on both axes: the "not present" dummy atom and the empty bond. All
graphs are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

#: Printable symbol for the dummy atom category.
DUMMY_SYMBOL = "*"

#: Supported heavy elements and their maximum bond-order sums (implicit
#: hydrogens fill any slack).
DEFAULT_VALENCES = {
    "C": 4, "N": 3, "O": 2, "S": 6, "P": 5,
    "F": 1, "Cl": 1, "Br": 1, "I": 1,
}

#: Standard atomic masses (g/mol) for the supported elements.
ATOMIC_MASSES = {
    "C": 12.011, "N": 14.007, "O": 15.999, "S": 32.06, "P": 30.974,
    "F": 18.998, "Cl": 35.45, "Br": 79.904, "I": 126.904,
}

# Bond categories. Index 0 is the empty/no-bond slot, mirroring the dummy
# atom convention.
BOND_NONE = 0
BOND_SINGLE = 1
BOND_DOUBLE = 2
BOND_TRIPLE = 3
BOND_WIDTH = 4
BOND_ORDER_WEIGHT = (0, 1, 2, 3)
BOND_NAMES = ("NONE", "SINGLE", "DOUBLE", "TRIPLE")


@dataclass(frozen=True)
class BondVocab:
    """Fixed bond category table: empty slot first, then single/double/triple."""

    orders: tuple[str, ...] = BOND_NAMES
    weights: tuple[int, ...] = BOND_ORDER_WEIGHT

    @property
    def width(self) -> int:
        return len(self.orders)


BOND_VOCAB = BondVocab()


class Tag(IntEnum):
    """Role of a node inside a spliced graph."""

    PRODUCT = 0
    GROUP = 1
    DUMMY = 2


class ChemError(ValueError):
    """Raised for malformed graphs or unsupported chemistry."""


@dataclass(frozen=True)
class AtomVocab:
    """Ordered atom categories; index 0 is always the dummy slot.

    ``symbols`` holds the dummy symbol followed by element labels; the one-hot
    width of node states equals ``len(symbols)``.
    """

    symbols: tuple[str, ...]

    def __post_init__(self):
        if not self.symbols or self.symbols[0] != DUMMY_SYMBOL:
            raise ChemError("atom vocabulary must start with the dummy symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ChemError("atom vocabulary has duplicate symbols")
        for sym in self.symbols[1:]:
            if sym not in DEFAULT_VALENCES:
                raise ChemError(f"unknown element {sym!r} in vocabulary")

    @classmethod
    def default(cls) -> "AtomVocab":
        return cls((DUMMY_SYMBOL,) + tuple(sorted(DEFAULT_VALENCES)))

    @classmethod
    def from_elements(cls, elements) -> "AtomVocab":
        return cls((DUMMY_SYMBOL,) + tuple(sorted(set(elements))))

    @property
    def width(self) -> int:
        """One-hot width including the dummy slot."""
        return len(self.symbols)

    @property
    def n_real(self) -> int:
        return len(self.symbols) - 1

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise ChemError(f"element {symbol!r} not in vocabulary") from None

    def valence(self, category: int) -> int:
        if category == 0:
            return 0
        return DEFAULT_VALENCES[self.symbols[category]]

    def mass(self, category: int) -> float:
        if category == 0:
            return 0.0
        return ATOMIC_MASSES[self.symbols[category]]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MolGraph:
    """Immutable molecular graph over categorical node and edge states.

    ``node_cat[i]`` is the atom category (0 = dummy), ``edge_cat[i, j]`` the
    bond category (0 = no bond); the edge matrix is symmetric with an empty
    diagonal. ``node_tag`` records each node's role when graphs are spliced.
    """

    vocab: AtomVocab
    node_cat: np.ndarray
    edge_cat: np.ndarray
    node_tag: np.ndarray

    def __post_init__(self):
        node_cat = np.ascontiguousarray(self.node_cat, dtype=np.int16)
        edge_cat = np.ascontiguousarray(self.edge_cat, dtype=np.int16)
        node_tag = np.ascontiguousarray(self.node_tag, dtype=np.int8)
        n = node_cat.shape[0]
        if node_cat.ndim != 1 or node_tag.shape != (n,) or edge_cat.shape != (n, n):
            raise ChemError("inconsistent graph array shapes")
        if n:
            if node_cat.min() < 0 or node_cat.max() >= self.vocab.width:
                raise ChemError("node category out of vocabulary range")
            if edge_cat.min() < 0 or edge_cat.max() >= BOND_WIDTH:
                raise ChemError("edge category out of range")
            if np.any(np.diag(edge_cat) != BOND_NONE):
                raise ChemError("self-loops are not allowed")
            if not np.array_equal(edge_cat, edge_cat.T):
                raise ChemError("edge state matrix must be symmetric")
        object.__setattr__(self, "node_cat", _frozen(node_cat))
        object.__setattr__(self, "edge_cat", _frozen(edge_cat))
        object.__setattr__(self, "node_tag", _frozen(node_tag))

    @classmethod
    def build(cls, vocab: AtomVocab, symbols, bonds=(), tags=None) -> "MolGraph":
        """Construct from element symbols and ``(i, j, order)`` bond triples."""
        cats = np.array([vocab.index(s) for s in symbols], dtype=np.int16)
        n = len(cats)
        edges = np.zeros((n, n), dtype=np.int16)
        for i, j, order in bonds:
            if i == j:
                raise ChemError(f"self-bond on atom {i}")
            if edges[i, j] != BOND_NONE:
                raise ChemError(f"duplicate bond {i}-{j}")
            edges[i, j] = edges[j, i] = order
        if tags is None:
            tag_arr = np.full(n, Tag.PRODUCT, dtype=np.int8)
        else:
            tag_arr = np.array([int(t) for t in tags], dtype=np.int8)
        return cls(vocab, cats, edges, tag_arr)

    @classmethod
    def empty(cls, vocab: AtomVocab) -> "MolGraph":
        return cls.build(vocab, [])

    @property
    def n(self) -> int:
        return int(self.node_cat.shape[0])

    def node_onehot(self) -> np.ndarray:
        """One-hot node states, shape (n, vocab.width)."""
        out = np.zeros((self.n, self.vocab.width))
        if self.n:
            out[np.arange(self.n), self.node_cat] = 1.0
        return out

    def edge_onehot(self) -> np.ndarray:
        """One-hot edge states, shape (n, n, BOND_WIDTH)."""
        out = np.zeros((self.n, self.n, BOND_WIDTH))
        if self.n:
            ii, jj = np.meshgrid(np.arange(self.n), np.arange(self.n), indexing="ij")
            out[ii, jj, self.edge_cat] = 1.0
        return out

    def bonds(self):
        """Yield (i, j, category) with i < j for every non-empty bond."""
        iu, ju = np.triu_indices(self.n, k=1)
        for i, j in zip(iu, ju):
            c = int(self.edge_cat[i, j])
            if c != BOND_NONE:
                yield int(i), int(j), c

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.edge_cat[i] != BOND_NONE)

    def symbol(self, i: int) -> str:
        return self.vocab.symbols[self.node_cat[i]]

    def with_tags(self, tag: Tag) -> "MolGraph":
        return MolGraph(self.vocab, self.node_cat,
                        self.edge_cat, np.full(self.n, int(tag), dtype=np.int8))

    def with_states(self, node_cat=None, edge_cat=None) -> "MolGraph":
        """Copy with replaced state arrays (tags and vocab preserved)."""
        return MolGraph(
            self.vocab,
            self.node_cat if node_cat is None else node_cat,
            self.edge_cat if edge_cat is None else edge_cat,
            self.node_tag,
        )

    def subgraph(self, keep) -> "MolGraph":
        keep = np.asarray(keep, dtype=np.intp)
        return MolGraph(self.vocab, self.node_cat[keep],
                        self.edge_cat[np.ix_(keep, keep)], self.node_tag[keep])

    def components(self) -> list[np.ndarray]:
        """Connected components as sorted index arrays (bond edges only)."""
        labels = component_labels(self.edge_cat != BOND_NONE)
        return [np.flatnonzero(labels == c) for c in range(labels.max() + 1 if self.n else 0)]


def component_labels(adj: np.ndarray) -> np.ndarray:
    """Union-find component labels, renumbered by smallest member index."""
    n = adj.shape[0]
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    ii, jj = np.nonzero(adj)
    for i, j in zip(ii, jj):
        if i < j:
            ri, rj = find(int(i)), find(int(j))
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    roots = {}
    labels = np.zeros(n, dtype=np.intp)
    for i in range(n):
        r = find(i)
        labels[i] = roots.setdefault(r, len(roots))
    return labels


def is_valid(g: MolGraph) -> bool:
    """Check chemical validity: valence sums within limits, no bonds on dummies.

    Every non-dummy atom's incident bond-order sum must not exceed its
    element's maximum valence; dummy atoms must be isolated.
    """
    if g.n == 0:
        return True
    weights = np.array(BOND_ORDER_WEIGHT)
    order_sum = weights[g.edge_cat].sum(axis=1)
    for i in range(g.n):
        cat = int(g.node_cat[i])
        if cat == 0:
            if order_sum[i] != 0:
                return False
        elif order_sum[i] > g.vocab.valence(cat):
            return False
    return True


def splice(parts: list[MolGraph], cross_edges=()) -> MolGraph:
    """Disjoint union of ``parts`` plus extra edges in the concatenated index space.

    Node tags are preserved. Adding an edge where one already exists (including
    a duplicate cross edge) is an error.
    """
    if not parts:
        raise ChemError("splice needs at least one part")
    vocab = parts[0].vocab
    for p in parts[1:]:
        if p.vocab.symbols != vocab.symbols:
            raise ChemError("splice parts use different vocabularies")
    node_cat = np.concatenate([p.node_cat for p in parts]) if parts else np.zeros(0, np.int16)
    node_tag = np.concatenate([p.node_tag for p in parts])
    n = node_cat.shape[0]
    edge_cat = np.zeros((n, n), dtype=np.int16)
    off = 0
    for p in parts:
        edge_cat[off:off + p.n, off:off + p.n] = p.edge_cat
        off += p.n
    for u, v, order in cross_edges:
        if not (0 <= u < n and 0 <= v < n) or u == v:
            raise ChemError(f"cross edge ({u}, {v}) out of range")
        if edge_cat[u, v] != BOND_NONE:
            raise ChemError(f"cross edge ({u}, {v}) duplicates an existing edge")
        edge_cat[u, v] = edge_cat[v, u] = order
    return MolGraph(vocab, node_cat, edge_cat, node_tag)


def strip_dummies(g: MolGraph) -> tuple[MolGraph, int]:
    """Drop all dummy-category nodes, compacting indices in order.

    Returns the stripped graph and the number of inconsistent edges removed
    (real bonds that touched a dummy node).
    """
    keep = np.flatnonzero(g.node_cat != 0)
    dummy_mask = g.node_cat == 0
    iu, ju = np.triu_indices(g.n, k=1)
    bonded = g.edge_cat[iu, ju] != BOND_NONE
    inconsistent = int((bonded & (dummy_mask[iu] | dummy_mask[ju])).sum())
    return g.subgraph(keep), inconsistent


def molecular_weight(g: MolGraph) -> float:
    """Sum of standard atomic masses over non-dummy atoms."""
    return float(sum(g.vocab.mass(int(c)) for c in g.node_cat))
