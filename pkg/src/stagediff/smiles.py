"""Parser and writer for a kekulized, neutral SMILES subset.

Supported: bare organic atoms (C N O S P F Cl Br I), bracket atoms with an
optional hydrogen count and atom map, bond symbols ``- = #``, branches, ring
closures 1-9, and '.'-separated components. Aromatic lowercase atoms,
charges, isotopes, and stereo markers are rejected with explicit messages;
aromatic rings must be supplied kekulized. Hydrogens stay implicit.
"""

from __future__ import annotations

import numpy as np

from .chem import (
    AtomVocab, BOND_NONE, BOND_SINGLE, BOND_DOUBLE, BOND_TRIPLE,
    ChemError, MolGraph, Tag,
)

_TWO_LETTER = ("Cl", "Br")
_ONE_LETTER = set("CNOSPFI")
_AROMATIC = set("bcnops")
_BOND_CHARS = {"-": BOND_SINGLE, "=": BOND_DOUBLE, "#": BOND_TRIPLE}
_BOND_SYMBOL = {BOND_SINGLE: "-", BOND_DOUBLE: "=", BOND_TRIPLE: "#"}


class SmilesError(ChemError):
    """Syntax or unsupported-feature error with the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


def parse_molecule(text: str, vocab: AtomVocab | None = None):
    """Parse one (possibly '.'-separated) molecule string.

    Returns ``(graph, atom_maps)`` where ``atom_maps`` maps node index to the
    atom-map number for bracket atoms that carried one. Implicit hydrogens are
    not materialized; bracket H counts are accepted and discarded.
    """
    if vocab is None:
        vocab = AtomVocab.default()
    symbols: list[str] = []
    maps: dict[int, int] = {}
    bonds: dict[tuple[int, int], int] = {}

    def add_bond(u: int, v: int, order: int, offset: int):
        if u == v:
            raise SmilesError("ring closure bonds an atom to itself", offset)
        key = (min(u, v), max(u, v))
        if key in bonds:
            raise SmilesError("duplicate bond between atoms", offset)
        bonds[key] = order

    i = 0
    n_text = len(text)
    prev: int | None = None
    pending: int | None = None
    pending_off = 0
    stack: list[tuple[int, int]] = []  # (return atom, '(' offset)
    rings: dict[str, tuple[int, int | None, int]] = {}

    if not text:
        raise SmilesError("empty molecule string", 0)

    while i < n_text:
        ch = text[i]
        if ch in _BOND_CHARS:
            if pending is not None:
                raise SmilesError("two bond symbols in a row", i)
            if prev is None:
                raise SmilesError("bond symbol before any atom", i)
            pending = _BOND_CHARS[ch]
            pending_off = i
            i += 1
            continue
        if ch == ":":
            raise SmilesError("aromatic bonds are not supported", i)
        if ch in "/\\":
            raise SmilesError("stereo bonds are not supported", i)
        if ch == "%":
            raise SmilesError("ring closures above 9 are not supported", i)
        if ch == "(":
            if prev is None:
                raise SmilesError("branch opens before any atom", i)
            if pending is not None:
                raise SmilesError("bond symbol before a branch open", i)
            stack.append((prev, i))
            i += 1
            continue
        if ch == ")":
            if not stack:
                raise SmilesError("unmatched ')'", i)
            if pending is not None:
                raise SmilesError("dangling bond symbol before ')'", pending_off)
            prev = stack.pop()[0]
            i += 1
            continue
        if ch == ".":
            if stack:
                raise SmilesError("'.' inside a branch", i)
            if pending is not None:
                raise SmilesError("dangling bond symbol before '.'", pending_off)
            prev = None
            i += 1
            continue
        if ch.isdigit():
            if prev is None:
                raise SmilesError("ring closure before any atom", i)
            if ch == "0":
                raise SmilesError("ring closure digit must be 1-9", i)
            if ch in rings:
                other, order0, off0 = rings.pop(ch)
                order = _merge_ring_orders(order0, pending, i)
                add_bond(other, prev, order, i)
            else:
                rings[ch] = (prev, pending, i)
            pending = None
            i += 1
            continue
        if ch == "[":
            atom_sym, map_no, width = _parse_bracket(text, i)
            idx = len(symbols)
            symbols.append(atom_sym)
            if map_no is not None:
                maps[idx] = map_no
            if prev is not None:
                add_bond(prev, idx, pending if pending is not None else BOND_SINGLE, i)
            prev = idx
            pending = None
            i += width
            continue
        # bare atom
        sym = None
        for two in _TWO_LETTER:
            if text.startswith(two, i):
                sym = two
                break
        if sym is None and ch in _ONE_LETTER:
            sym = ch
        if sym is not None:
            idx = len(symbols)
            symbols.append(sym)
            if prev is not None:
                add_bond(prev, idx, pending if pending is not None else BOND_SINGLE, i)
            prev = idx
            pending = None
            i += len(sym)
            continue
        if ch in _AROMATIC:
            raise SmilesError(
                "aromatic atoms are not supported; supply a kekulized structure", i)
        if ch in "+-":
            raise SmilesError("charges are not supported", i)
        if ch == "@":
            raise SmilesError("stereochemistry is not supported", i)
        raise SmilesError(f"unexpected character {ch!r}", i)

    if pending is not None:
        raise SmilesError("dangling bond symbol at end of input", pending_off)
    if stack:
        raise SmilesError("unmatched '('", stack[-1][1])
    if rings:
        digit, (_, _, off) = next(iter(rings.items()))
        raise SmilesError(f"unmatched ring closure {digit}", off)

    for sym in symbols:
        vocab.index(sym)  # raises ChemError on unknown element
    g = MolGraph.build(vocab, symbols, [(u, v, o) for (u, v), o in bonds.items()])
    return g, maps


def _merge_ring_orders(a: int | None, b: int | None, offset: int) -> int:
    if a is not None and b is not None and a != b:
        raise SmilesError("ring closure bond orders disagree", offset)
    if a is not None:
        return a
    if b is not None:
        return b
    return BOND_SINGLE


def _parse_bracket(text: str, start: int):
    """Parse a bracket atom starting at ``text[start] == '['``.

    Returns (element, map number or None, consumed width).
    """
    i = start + 1
    n = len(text)

    def need(cond, msg, off):
        if not cond:
            raise SmilesError(msg, off)

    need(i < n, "unterminated bracket atom", start)
    if text[i].isdigit():
        raise SmilesError("isotopes are not supported", i)
    sym = None
    for two in _TWO_LETTER:
        if text.startswith(two, i):
            sym = two
            break
    if sym is None and i < n and text[i] in _ONE_LETTER:
        sym = text[i]
    if sym is None:
        if i < n and text[i] in _AROMATIC:
            raise SmilesError(
                "aromatic atoms are not supported; supply a kekulized structure", i)
        raise SmilesError("unknown element in bracket atom", i)
    i += len(sym)
    if i < n and text[i] == "H":
        i += 1
        if i < n and text[i].isdigit():
            i += 1
    map_no = None
    if i < n and text[i] == ":":
        i += 1
        j = i
        while j < n and text[j].isdigit():
            j += 1
        need(j > i, "missing atom-map number after ':'", i)
        map_no = int(text[i:j])
        i = j
    if i < n and text[i] in "+-":
        raise SmilesError("charges are not supported", i)
    if i < n and text[i] == "@":
        raise SmilesError("stereochemistry is not supported", i)
    need(i < n and text[i] == "]", "unterminated bracket atom", start)
    return sym, map_no, i + 1 - start


def write_molecule(g: MolGraph, atom_maps: dict[int, int] | None = None) -> str:
    """Emit a SMILES-subset string that reparses to a graph isomorphic to ``g``.

    Disconnected components are joined with '.'. Atoms present in
    ``atom_maps`` are written as bracket atoms carrying their map number.
    """
    if g.n == 0:
        raise ChemError("cannot write an empty graph")
    if np.any(g.node_cat == 0) or np.any(g.node_tag == int(Tag.DUMMY)):
        raise ChemError("cannot write a graph containing dummy atoms")
    atom_maps = atom_maps or {}

    visited = np.zeros(g.n, dtype=bool)
    pieces = []
    for comp in g.components():
        root = int(comp[0])
        pieces.append(_write_component(g, root, visited, atom_maps))
    return ".".join(pieces)


def _write_component(g: MolGraph, root: int, visited: np.ndarray, maps) -> str:
    # DFS spanning tree; tree edges are emitted inline, back edges as ring digits.
    import sys
    limit_guard = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit_guard, 4 * g.n + 100))

    order: list[int] = []
    tree_children: dict[int, list[int]] = {}
    back_edges: list[tuple[int, int]] = []
    back_seen: set[tuple[int, int]] = set()
    seen: set[int] = set()

    def dfs(u: int, par: int):
        seen.add(u)
        order.append(u)
        kids: list[int] = []
        tree_children[u] = kids
        for v in sorted(int(x) for x in g.neighbors(u)):
            if v == par:
                continue
            if v in seen:
                pair = (min(u, v), max(u, v))
                if pair not in back_seen:
                    back_seen.add(pair)
                    back_edges.append((u, v))
            else:
                kids.append(v)
                dfs(v, u)

    try:
        dfs(root, -1)
    finally:
        sys.setrecursionlimit(limit_guard)
    visited[order] = True

    # Assign ring-closure digits in emission order so digits can be reused
    # once closed; the bond symbol is printed at the closing occurrence.
    emit_pos = {u: k for k, u in enumerate(order)}
    events = []  # (position, kind, pair)
    for u, v in back_edges:
        first, second = (u, v) if emit_pos[u] < emit_pos[v] else (v, u)
        events.append((emit_pos[first], emit_pos[second], first, second))
    events.sort()
    ring_at: dict[int, list[tuple[str, int, bool]]] = {}
    active: list[tuple[int, str]] = []  # (close position, digit)
    free_digits = [str(d) for d in range(1, 10)]
    for open_pos, close_pos, first, second in events:
        for cp, dig in list(active):
            if cp < open_pos:
                active.remove((cp, dig))
                free_digits.append(dig)
        free_digits.sort()
        if not free_digits:
            raise ChemError("more than 9 ring closures open at once")
        digit = free_digits.pop(0)
        active.append((close_pos, digit))
        o = int(g.edge_cat[first, second])
        ring_at.setdefault(first, []).append((digit, o, False))
        ring_at.setdefault(second, []).append((digit, o, True))

    out: list[str] = []

    def atom_token(u: int) -> str:
        sym = g.symbol(u)
        if u in maps:
            return f"[{sym}:{maps[u]}]"
        return sym

    def bond_token(order: int) -> str:
        return "" if order == BOND_SINGLE else _BOND_SYMBOL[order]

    def emit(u: int):
        out.append(atom_token(u))
        for digit, o, is_close in ring_at.get(u, ()):
            if is_close:
                out.append(bond_token(o) + digit)
            else:
                out.append(digit)
        kids = tree_children[u]
        for v in kids[:-1]:
            out.append("(" + bond_token(int(g.edge_cat[u, v])))
            emit(v)
            out.append(")")
        if kids:
            v = kids[-1]
            out.append(bond_token(int(g.edge_cat[u, v])))
            emit(v)

    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 4 * g.n + 100))
    try:
        emit(root)
    finally:
        sys.setrecursionlimit(old)
    return "".join(out)
