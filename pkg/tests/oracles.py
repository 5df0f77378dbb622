"""Independent brute-force oracles used to pin expected values in tests.

Nothing here shares code with the library paths it checks: isomorphism is a
backtracking search, cycle counts enumerate simple cycles, posteriors
enumerate the intermediate state, and component counts use a fresh BFS.
"""

from __future__ import annotations

import itertools

import numpy as np


def brute_isomorphic(a, b) -> bool:
    """Backtracking label-preserving isomorphism search on MolGraphs."""
    if a.n != b.n:
        return False
    if sorted(a.node_cat) != sorted(b.node_cat):
        return False
    n = a.n
    deg_a = [sum(1 for _ in a.neighbors(i)) for i in range(n)]
    deg_b = [sum(1 for _ in b.neighbors(i)) for i in range(n)]
    mapping = [-1] * n
    used = [False] * n

    def feasible(i, j):
        if a.node_cat[i] != b.node_cat[j] or deg_a[i] != deg_b[j]:
            return False
        for k in range(i):
            if a.edge_cat[i, k] != b.edge_cat[j, mapping[k]]:
                return False
        return True

    def place(i):
        if i == n:
            return True
        for j in range(n):
            if not used[j] and feasible(i, j):
                mapping[i] = j
                used[j] = True
                if place(i + 1):
                    return True
                used[j] = False
                mapping[i] = -1
        return False

    return place(0)


def enumerate_cycles(A: np.ndarray, k: int):
    """All simple k-cycles of a binary adjacency matrix, as vertex tuples.

    Each cycle is returned once (lexicographically smallest rotation,
    direction-deduplicated).
    """
    n = A.shape[0]
    found = set()
    for subset in itertools.combinations(range(n), k):
        sub = [list(subset)]
        first = subset[0]
        rest = subset[1:]
        for perm in itertools.permutations(rest):
            if perm[0] > perm[-1]:
                continue
            cyc = (first,) + perm
            if all(A[cyc[i], cyc[(i + 1) % k]] for i in range(k)):
                found.add(cyc)
    return found


def cycle_counts_brute(A: np.ndarray):
    """Per-node 3/4/5-cycle memberships and per-graph 3..6 totals."""
    n = A.shape[0]
    x = {k: np.zeros(n) for k in (3, 4, 5)}
    y = {}
    for k in (3, 4, 5, 6):
        cycles = enumerate_cycles(A, k) if n >= k else set()
        y[k] = float(len(cycles))
        if k in x:
            for cyc in cycles:
                for v in cyc:
                    x[k][v] += 1.0
    return x[3], x[4], x[5], y[3], y[4], y[5], y[6]


def posterior_brute(xt: int, x0: int, Q_t: np.ndarray, Qbar_prev: np.ndarray):
    """Enumerate the intermediate state: p(s) = q(xt | s) q(s | x0), normalized.

    Returns None when the pair is impossible.
    """
    dim = Q_t.shape[0]
    probs = np.array([Q_t[s, xt] * Qbar_prev[x0, s] for s in range(dim)])
    total = probs.sum()
    if total <= 0.0:
        return None
    return probs / total


def mixture_brute(xt: int, pred0: np.ndarray, Q_t, Qbar_prev):
    """Sum posterior(xt, x0) * pred0[x0] over clean states, skipping impossible pairs."""
    dim = Q_t.shape[0]
    mix = np.zeros(dim)
    for x0 in range(dim):
        post = posterior_brute(xt, x0, Q_t, Qbar_prev)
        if post is not None:
            mix += pred0[x0] * post
    total = mix.sum()
    if total <= 0.0:
        return None
    return mix / total


def cycles_up_to(A: np.ndarray, kmax: int = 6):
    """Enumerate all simple cycles of length 3..kmax by DFS.

    Each cycle appears once as a vertex tuple whose first entry is its
    minimum vertex (direction deduplicated). Much faster than the
    permutation enumeration on dense graphs; same semantics.
    """
    n = A.shape[0]
    neigh = [np.flatnonzero(A[i]) for i in range(n)]
    cycles = []
    path: list[int] = []
    on_path = set()

    def dfs(s: int, u: int):
        for w in neigh[u]:
            w = int(w)
            if w == s and len(path) >= 3:
                if path[1] < path[-1]:
                    cycles.append(tuple(path))
            elif w > s and w not in on_path and len(path) < kmax:
                path.append(w)
                on_path.add(w)
                dfs(s, w)
                path.pop()
                on_path.remove(w)

    for s in range(n):
        path = [s]
        on_path = {s}
        dfs(s, s)
    return cycles


def cycle_counts_dfs(A: np.ndarray):
    """Same outputs as cycle_counts_brute via the DFS enumerator."""
    n = A.shape[0]
    x = {k: np.zeros(n) for k in (3, 4, 5)}
    y = {3: 0.0, 4: 0.0, 5: 0.0, 6: 0.0}
    for cyc in cycles_up_to(A, 6):
        k = len(cyc)
        y[k] += 1.0
        if k in x:
            for v in cyc:
                x[k][v] += 1.0
    return x[3], x[4], x[5], y[3], y[4], y[5], y[6]


def component_count_bfs(A: np.ndarray) -> int:
    n = A.shape[0]
    seen = [False] * n
    count = 0
    for start in range(n):
        if seen[start]:
            continue
        count += 1
        queue = [start]
        seen[start] = True
        while queue:
            u = queue.pop()
            for v in np.flatnonzero(A[u]):
                if not seen[v]:
                    seen[v] = True
                    queue.append(int(v))
    return count


def random_molgraph(rng, vocab, max_n=8, p_edge=0.4, allow_dummy=False):
    """Random (not necessarily chemically valid) categorical graph."""
    from stagediff.chem import BOND_WIDTH, MolGraph

    n = int(rng.integers(1, max_n + 1))
    low = 0 if allow_dummy else 1
    cats = rng.integers(low, vocab.width, size=n).astype(np.int16)
    edges = np.zeros((n, n), dtype=np.int16)
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p_edge:
                edges[i, j] = edges[j, i] = int(rng.integers(1, BOND_WIDTH))
    tags = np.zeros(n, dtype=np.int8)
    return MolGraph(vocab, cats, edges, tags)


def permute_molgraph(g, perm):
    """Relabel nodes of a MolGraph by ``perm`` (new index = position in perm)."""
    from stagediff.chem import MolGraph

    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    # node i of the new graph is node perm[i] of the old one
    return MolGraph(
        g.vocab,
        g.node_cat[perm],
        g.edge_cat[np.ix_(perm, perm)],
        g.node_tag[perm],
    )
