"""Deterministic synthetic reaction corpora for tests, smoke runs, and demos.

Reactions are built from small scaffold products by breaking one single bond
and attaching leaving groups at the freed sites, plus a few addition-only,
hydrogen-completed, and order-change variants to exercise the flagging
paths. All output lines follow the corpus format (``reactants>>product``
with atom maps).
"""

from __future__ import annotations

import numpy as np

from .canon import canonical_form
from .chem import AtomVocab, BOND_NONE, BOND_SINGLE, MolGraph, Tag, is_valid, splice
from .smiles import parse_molecule, write_molecule

SCAFFOLDS = (
    "CCO", "CCC", "CCN", "CCS", "CC(C)O", "CC(C)C", "CCCO", "CC(N)C",
    "C1CCC1", "CC(O)CC", "NCCO", "CC(C)N", "OCCO", "CCOC", "CC1CC1",
    "CC=O", "CC(=O)C", "C=CC", "CC(=O)O", "C=CCO", "CC=CC",
)

GROUPS = ("Cl", "Br", "I", "O", "OC", "C", "CC", "N", "OCC", "NC")


def _vocab() -> AtomVocab:
    return AtomVocab.default()


def _free_valence(g: MolGraph, i: int) -> int:
    from .chem import BOND_ORDER_WEIGHT
    used = sum(BOND_ORDER_WEIGHT[int(c)] for c in g.edge_cat[i])
    return g.vocab.valence(int(g.node_cat[i])) - used


def _attach(base: MolGraph, fragment: MolGraph, at: int) -> MolGraph:
    """Splice a fragment onto ``base`` with a single bond at fragment atom 0."""
    return splice([base, fragment], [(at, base.n, BOND_SINGLE)])


def _break_and_attach(product: MolGraph, u: int, v: int,
                      grp_u: MolGraph | None, grp_v: MolGraph | None) -> MolGraph:
    """Reactants: product minus bond (u, v), plus groups attached at u and v."""
    edges = np.array(product.edge_cat)
    edges[u, v] = edges[v, u] = BOND_NONE
    reac = product.with_states(edge_cat=edges)
    if grp_u is not None:
        reac = _attach(reac, grp_u, u)
    if grp_v is not None:
        reac = _attach(reac, grp_v, v)
    return reac


def _single_bonds(g: MolGraph):
    return [(i, j) for i, j, c in g.bonds() if c == BOND_SINGLE]


def build_corpus(n_records: int, seed: int = 11, with_flagged: bool = True,
                 max_group: int | None = None, with_classes: bool = True,
                 max_total_group: int | None = None) -> list[str]:
    """Enumerate template reactions deterministically and keep ``n_records``.

    Products are unique across the corpus. When ``with_flagged`` is set,
    roughly a tenth of the records are hydrogen-completed or order-change
    variants that the rule-based rebuild cannot recover.
    """
    vocab = _vocab()
    rng = np.random.default_rng(seed)
    scaffolds = []
    for text in SCAFFOLDS:
        g, _ = parse_molecule(text, vocab)
        scaffolds.append(g)
    groups = []
    for text in GROUPS:
        g, _ = parse_molecule(text, vocab)
        if max_group is None or g.n <= max_group:
            groups.append(g.with_tags(Tag.GROUP))

    lines: list[str] = []
    seen_products = set()
    attempts = 0
    while len(lines) < n_records and attempts < 100000:
        attempts += 1
        scaf = scaffolds[int(rng.integers(len(scaffolds)))]
        # decorate the scaffold so products stay distinct across records
        product = scaf
        if rng.random() < 0.7:
            site_pool = [i for i in range(product.n) if _free_valence(product, i) >= 1]
            if site_pool:
                deco = groups[int(rng.integers(len(groups)))]
                product = _attach(product, deco, site_pool[int(rng.integers(len(site_pool)))])
        product = product.with_tags(Tag.PRODUCT)
        canon = canonical_form(product)
        if canon in seen_products or not is_valid(product):
            continue

        kind = "clean"
        if with_flagged and len(lines) % 10 == 8:
            kind = "hydrogen"
        elif with_flagged and len(lines) % 10 == 9:
            kind = "order"

        line = _make_record(product, groups, rng, kind, max_total_group)
        if line is None:
            continue
        seen_products.add(canon)
        class_id = (len(lines) % 5) + 1 if with_classes else None
        if class_id is not None:
            line = f"{class_id}\t{line}"
        lines.append(line)
    if len(lines) < n_records:
        raise RuntimeError("could not generate enough distinct records")
    return lines


def _make_record(product: MolGraph, groups, rng, kind: str,
                 max_total_group: int | None = None) -> str | None:

    def fits(reac: MolGraph) -> bool:
        if max_total_group is None:
            return True
        return reac.n - product.n <= max_total_group

    single = _single_bonds(product)
    if kind == "order":
        doubles = [(i, j) for i, j, c in product.bonds() if c == 2]
        if not doubles:
            return None
        u, v = doubles[int(rng.integers(len(doubles)))]
        edges = np.array(product.edge_cat)
        edges[u, v] = edges[v, u] = BOND_SINGLE
        reac = product.with_states(edge_cat=edges)
        reac = _attach(reac, groups[int(rng.integers(len(groups)))], u)
        if not is_valid(reac) or not fits(reac):
            return None
        return _format(product, reac)
    if not single:
        return None
    u, v = single[int(rng.integers(len(single)))]
    if kind == "hydrogen":
        grp = groups[int(rng.integers(len(groups)))]
        reac = _break_and_attach(product, u, v, grp, None)
        if not is_valid(reac) or not fits(reac):
            return None
        return _format(product, reac)
    if rng.random() < 0.15:
        # addition without a break: one group on a free-valence site
        sites = [i for i in range(product.n) if _free_valence(product, i) >= 1]
        if not sites:
            return None
        at = sites[int(rng.integers(len(sites)))]
        grp = groups[int(rng.integers(len(groups)))]
        reac = _attach(product, grp, at)
        if not is_valid(reac) or not fits(reac):
            return None
        return _format(product, reac)
    ga = groups[int(rng.integers(len(groups)))]
    gb = groups[int(rng.integers(len(groups)))]
    reac = _break_and_attach(product, u, v, ga, gb)
    if not is_valid(reac) or not fits(reac):
        return None
    return _format(product, reac)


def _format(product: MolGraph, reactants: MolGraph) -> str:
    maps = {i: i + 1 for i in range(product.n)}
    left = write_molecule(reactants, maps)
    right = write_molecule(product, maps)
    return f"{left}>>{right}"


def toy_corpus(n_records: int = 20, seed: int = 7) -> list[str]:
    """Small clean corpus for overfit smoke runs: no flagged records,
    fragments capped at two atoms and whole groups at three."""
    return build_corpus(n_records, seed=seed, with_flagged=False,
                        max_group=2, with_classes=False, max_total_group=3)


def template_corpus(n_records: int = 200, seed: int = 11) -> list[str]:
    """Larger mixed corpus including flagged hydrogen/order-change records."""
    return build_corpus(n_records, seed=seed, with_flagged=True, with_classes=True)


def main(argv=None) -> int:
    import argparse

    ap = argparse.ArgumentParser(description="emit a synthetic reaction corpus")
    ap.add_argument("out", help="output path")
    ap.add_argument("--n", type=int, default=20)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--flagged", action="store_true",
                    help="include hydrogen/order-change records")
    args = ap.parse_args(argv)
    lines = build_corpus(args.n, seed=args.seed, with_flagged=args.flagged,
                         max_group=None if args.flagged else 2,
                         with_classes=args.flagged)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} reactions to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
