"""Reaction ingestion and supervision extraction.

Reads atom-mapped ``reactants>>product`` corpora and derives the training
targets: group atoms absent from the product, the bonds attaching them, the
product bonds that must break, and order-change edits. Also computes the
fixed group-size budget used to pad generated groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chem import AtomVocab, BOND_NONE, ChemError, MolGraph, Tag, splice
from .smiles import parse_molecule, write_molecule

#: Flag set on records whose reactants cannot be rebuilt from the generated
#: group/bond structure alone (kept for stage training, excluded from
#: end-to-end exact-match accounting).
UNRECONSTRUCTABLE = "UNRECONSTRUCTABLE"


class ReactionError(ChemError):
    """Raised for malformed reaction records."""


@dataclass(frozen=True)
class ReactionRecord:
    """Atom-mapped product/reactant pair.

    ``atom_map`` sends each product node to its reactant node; it is total on
    product atoms and injective (dataset convention).
    """

    product: MolGraph
    reactants: MolGraph
    atom_map: dict[int, int]
    class_label: int | None = None

    def __post_init__(self):
        if len(self.atom_map) != self.product.n:
            raise ReactionError("every product atom must carry an atom map")
        targets = list(self.atom_map.values())
        if len(set(targets)) != len(targets):
            raise ReactionError("atom map is not injective")
        for u, v in self.atom_map.items():
            if not (0 <= u < self.product.n and 0 <= v < self.reactants.n):
                raise ReactionError("atom map references a missing node")


@dataclass(frozen=True)
class SupervisionTarget:
    """Derived generation targets for one reaction.

    Indices: ``group_nodes`` are reactant node ids defining the group's local
    order; external/broken/changed entries use product node ids (and local
    group ids on the group side).
    """

    group_symbols: tuple[str, ...]
    group_bonds: tuple[tuple[int, int, int], ...]          # (g_local, g_local, order)
    external_bonds: tuple[tuple[int, int, int], ...]       # (g_local, product, order)
    broken_bonds: tuple[tuple[int, int], ...]              # (product, product), u < v
    changed_bonds: tuple[tuple[int, int, int], ...]        # (product, product, new order)
    flags: frozenset[str] = frozenset()

    @property
    def group_size(self) -> int:
        return len(self.group_symbols)

    def group_graph(self, vocab: AtomVocab) -> MolGraph:
        g = MolGraph.build(vocab, self.group_symbols, self.group_bonds)
        return g.with_tags(Tag.GROUP)


@dataclass(frozen=True)
class GroupBudget:
    """Fixed group-size budget with the statistics behind it."""

    n_g: int
    mean: float
    std: float
    excluded_count: int


def extract_supervision(record: ReactionRecord) -> SupervisionTarget:
    """Derive group atoms, external bonds, and product edits from the map."""
    prod, reac = record.product, record.reactants
    to_reac = record.atom_map
    to_prod = {v: u for u, v in to_reac.items()}

    group_nodes = [i for i in range(reac.n) if i not in to_prod]
    local = {r: k for k, r in enumerate(group_nodes)}
    group_symbols = tuple(reac.symbol(i) for i in group_nodes)

    group_bonds = []
    external = []
    for i, j, order in reac.bonds():
        gi, gj = i in local, j in local
        if gi and gj:
            group_bonds.append((local[i], local[j], order))
        elif gi:
            external.append((local[i], to_prod[j], order))
        elif gj:
            external.append((local[j], to_prod[i], order))

    broken = []
    changed = []
    for u, v, order in prod.bonds():
        r_order = int(reac.edge_cat[to_reac[u], to_reac[v]])
        if r_order == BOND_NONE:
            broken.append((u, v))
        elif r_order != order:
            changed.append((u, v, r_order))
    # bonds present between mapped reactant atoms but absent from the product
    for i, j, order in reac.bonds():
        if i in to_prod and j in to_prod:
            u, v = sorted((to_prod[i], to_prod[j]))
            if int(prod.edge_cat[u, v]) == BOND_NONE:
                changed.append((u, v, order))

    flags = set()
    if changed:
        flags.add(UNRECONSTRUCTABLE)
    sites = {p for _, p, _ in external}
    deduced = {(u, v) for u, v, _ in prod.bonds() if u in sites and v in sites}
    if deduced != set(broken):
        # a broken end completed by hydrogen only, or adjacent sites whose
        # bond survives: the rule-based rebuild cannot recover this record
        flags.add(UNRECONSTRUCTABLE)

    return SupervisionTarget(
        group_symbols=group_symbols,
        group_bonds=tuple(sorted(group_bonds)),
        external_bonds=tuple(sorted(external)),
        broken_bonds=tuple(sorted(broken)),
        changed_bonds=tuple(sorted(changed)),
        flags=frozenset(flags),
    )


def reconstruct_reactants(record: ReactionRecord, sup: SupervisionTarget) -> MolGraph:
    """Rebuild the reactant graph from the product plus supervision sets.

    Splices the group onto the product, deletes broken bonds, and applies
    order changes. The result must be isomorphic to ``record.reactants`` for
    every well-formed record.
    """
    prod = record.product
    group = sup.group_graph(prod.vocab)
    cross = [(p, prod.n + g, o) for g, p, o in sup.external_bonds]
    joint = splice([prod, group], cross)
    edges = np.array(joint.edge_cat)
    for u, v in sup.broken_bonds:
        edges[u, v] = edges[v, u] = BOND_NONE
    for u, v, order in sup.changed_bonds:
        edges[u, v] = edges[v, u] = order
    return joint.with_states(edge_cat=edges)


def compute_group_budget(targets: list[SupervisionTarget]) -> GroupBudget:
    """Set the padded group size from outlier-trimmed size statistics.

    Samples farther than three population standard deviations from the mean
    are dropped; the budget is the largest retained size.
    """
    if not targets:
        raise ReactionError("cannot compute a group budget from an empty dataset")
    sizes = np.array([t.group_size for t in targets], dtype=np.float64)
    mean = float(sizes.mean())
    std = float(sizes.std())
    keep = np.abs(sizes - mean) <= 3.0 * std
    if not keep.any():
        raise ReactionError("group budget statistics excluded every sample")
    return GroupBudget(
        n_g=int(sizes[keep].max()),
        mean=mean,
        std=std,
        excluded_count=int((~keep).sum()),
    )


def build_vocab(records: list[ReactionRecord]) -> AtomVocab:
    """Vocabulary of every element observed in the dataset, dummy prepended."""
    if not records:
        raise ReactionError("cannot build a vocabulary from an empty dataset")
    elements = set()
    for rec in records:
        for g in (rec.product, rec.reactants):
            elements.update(g.symbol(i) for i in range(g.n) if g.node_cat[i] != 0)
    return AtomVocab.from_elements(elements)


def remap_graph(g: MolGraph, vocab: AtomVocab) -> MolGraph:
    """Re-encode node categories into another vocabulary."""
    cats = np.array(
        [0 if c == 0 else vocab.index(g.vocab.symbols[c]) for c in g.node_cat],
        dtype=np.int16,
    )
    return MolGraph(vocab, cats, g.edge_cat, g.node_tag)


# ---------------------------------------------------------------------------
# Corpus text format: one reaction per line, "reactants>>product", with an
# optional leading "class_id<TAB>".
# ---------------------------------------------------------------------------

def parse_reaction_line(line: str, vocab: AtomVocab | None = None) -> ReactionRecord:
    text = line.strip()
    class_label = None
    if "\t" in text:
        head, text = text.split("\t", 1)
        if not head.isdigit():
            raise ReactionError(f"malformed class prefix {head!r}")
        class_label = int(head)
    if ">>" not in text:
        raise ReactionError("reaction line is missing '>>'")
    left, right = text.split(">>", 1)
    reactants, r_maps = parse_molecule(left, vocab)
    product, p_maps = parse_molecule(right, vocab)
    if len(p_maps) != product.n:
        missing = sorted(set(range(product.n)) - set(p_maps))
        raise ReactionError(f"product atoms without atom maps: {missing}")
    by_map = {}
    for node, m in r_maps.items():
        if m in by_map:
            raise ReactionError(f"atom map {m} appears twice in reactants")
        by_map[m] = node
    seen_p = set()
    atom_map = {}
    for node, m in p_maps.items():
        if m in seen_p:
            raise ReactionError(f"atom map {m} appears twice in product")
        seen_p.add(m)
        if m not in by_map:
            raise ReactionError(f"product atom map {m} is missing from reactants")
        atom_map[node] = by_map[m]
    return ReactionRecord(product=product, reactants=reactants.with_tags(Tag.PRODUCT),
                          atom_map=atom_map, class_label=class_label)


def read_corpus(path, vocab: AtomVocab | None = None) -> list[ReactionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(parse_reaction_line(line, vocab))
            except ChemError as exc:
                raise ReactionError(f"{path}:{lineno}: {exc}") from exc
    return records


def format_reaction_line(record: ReactionRecord) -> str:
    """Serialize a record back to corpus text with fresh atom maps."""
    r_maps = {v: k + 1 for k, v in enumerate(record.atom_map.values())}
    p_maps = {u: r_maps[v] for u, v in record.atom_map.items()}
    left = write_molecule(record.reactants, r_maps)
    right = write_molecule(record.product, p_maps)
    prefix = f"{record.class_label}\t" if record.class_label is not None else ""
    return f"{prefix}{left}>>{right}"


# ---------------------------------------------------------------------------
# Supervision cache: one textual record per line.
# ---------------------------------------------------------------------------

def format_supervision(sup: SupervisionTarget) -> str:
    def bonds3(items):
        return ",".join(f"{a}-{b}:{o}" for a, b, o in items) or "-"

    def bonds2(items):
        return ",".join(f"{a}-{b}" for a, b in items) or "-"

    ext = ",".join(f"{g}>{p}:{o}" for g, p, o in sup.external_bonds) or "-"
    fields = [
        "group=" + (",".join(sup.group_symbols) or "-"),
        "internal=" + bonds3(sup.group_bonds),
        "external=" + ext,
        "broken=" + bonds2(sup.broken_bonds),
        "changed=" + bonds3(sup.changed_bonds),
        "flags=" + (",".join(sorted(sup.flags)) or "-"),
    ]
    return " ".join(fields)


def parse_supervision(line: str) -> SupervisionTarget:
    fields = dict(part.split("=", 1) for part in line.strip().split(" "))

    def split(v):
        return [] if v == "-" else v.split(",")

    group_symbols = tuple(split(fields["group"]))
    group_bonds = tuple(
        (int(a), int(b), int(o))
        for a, b, o in (item.replace(":", "-").split("-") for item in split(fields["internal"]))
    )
    external = tuple(
        (int(g), int(p), int(o))
        for g, p, o in (item.replace(">", "-").replace(":", "-").split("-")
                        for item in split(fields["external"]))
    )
    broken = tuple(tuple(int(x) for x in item.split("-")) for item in split(fields["broken"]))
    changed = tuple(
        (int(a), int(b), int(o))
        for a, b, o in (item.replace(":", "-").split("-") for item in split(fields["changed"]))
    )
    return SupervisionTarget(
        group_symbols=group_symbols,
        group_bonds=group_bonds,
        external_bonds=external,
        broken_bonds=broken,  # type: ignore[arg-type]
        changed_bonds=changed,
        flags=frozenset(split(fields["flags"])),
    )


def save_supervision_cache(path, targets: list[SupervisionTarget]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sup in targets:
            fh.write(format_supervision(sup) + "\n")


def load_supervision_cache(path) -> list[SupervisionTarget]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(parse_supervision(line))
    return out
