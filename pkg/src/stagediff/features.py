"""Auxiliary denoiser inputs: spectral, cycle, and chemical graph features.

All features are deterministic, permutation-equivariant per node and
permutation-invariant per graph. Dummy atoms participate as isolated
vertices so feature shapes stay fixed along a denoising trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chem import (
    BOND_NONE, BOND_ORDER_WEIGHT, MolGraph, component_labels, molecular_weight,
)

_ZERO_EIG_TOL = 1e-8

#: Per-node auxiliary width: 3 cycle counts, largest-component indicator,
#: 2 spectral entries, valency.
NODE_EXTRA_WIDTH = 7
#: Per-graph auxiliary width: component count, 5 eigenvalues, 4 cycle counts,
#: molecular weight, normalized time.
GRAPH_EXTRA_WIDTH = 12


class SpectrumError(RuntimeError):
    """Jacobi sweep limit exceeded; the input matrix is pathological."""


@dataclass(frozen=True)
class FeaturePack:
    node_extra: np.ndarray   # (n, NODE_EXTRA_WIDTH)
    graph_extra: np.ndarray  # (GRAPH_EXTRA_WIDTH,)


def adjacency(g: MolGraph) -> tuple[np.ndarray, np.ndarray]:
    """Binary adjacency (bond order ignored) and degree vector.

    Edges touching dummy-category atoms are masked out so dummies stay
    isolated regardless of the noisy edge states around them.
    """
    real = (g.node_cat != 0).astype(np.float64)
    A = (g.edge_cat != BOND_NONE).astype(np.float64)
    A *= real[:, None] * real[None, :]
    return A, A.sum(axis=1)


def jacobi_eigh(M: np.ndarray, tol: float = 1e-10, max_sweeps: int = 50):
    """Full symmetric eigendecomposition by cyclic Jacobi rotations.

    Returns eigenvalues ascending and eigenvectors as matching columns.
    Raises SpectrumError if the off-diagonal norm has not dropped below
    ``tol`` after ``max_sweeps`` sweeps.
    """
    n = M.shape[0]
    A = np.array(M, dtype=np.float64)
    if A.shape != (n, n) or not np.allclose(A, A.T, atol=1e-12):
        raise ValueError("jacobi_eigh expects a symmetric square matrix")
    V = np.eye(n)
    if n < 2:
        return np.diag(A).copy(), V

    def off_norm():
        return np.sqrt(np.sum(np.tril(A, -1) ** 2) * 2.0)

    converged = False
    for _ in range(max_sweeps):
        if off_norm() < tol:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                # entries this small cannot lift the off-norm above tol
                if abs(apq) < tol * 1e-4:
                    continue
                # classic two-sided rotation zeroing A[p, q]
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * A[:, p] - s * A[:, q]
                rot_q = s * A[:, p] + c * A[:, q]
                A[:, p], A[:, q] = rot_p, rot_q
                rot_p = c * A[p, :] - s * A[q, :]
                rot_q = s * A[p, :] + c * A[q, :]
                A[p, :], A[q, :] = rot_p, rot_q
                rot_p = c * V[:, p] - s * V[:, q]
                rot_q = s * V[:, p] + c * V[:, q]
                V[:, p], V[:, q] = rot_p, rot_q
    if not converged and off_norm() >= tol:
        raise SpectrumError(f"Jacobi did not converge within {max_sweeps} sweeps")

    vals = np.diag(A).copy()
    order = np.argsort(vals, kind="stable")
    return vals[order], V[:, order]


def laplacian_spectrum(A: np.ndarray):
    """Eigenvalues (ascending) and eigenvectors of L = diag(d) - A."""
    d = A.sum(axis=1)
    L = np.diag(d) - A
    return jacobi_eigh(L)


def zero_multiplicity(eigvals: np.ndarray) -> int:
    return int((np.abs(eigvals) < _ZERO_EIG_TOL).sum())


def cycle_counts(A: np.ndarray, d: np.ndarray):
    """Closed-form per-node 3/4/5-cycle and per-graph 3..6-cycle counts.

    Uses the trace identities for memberships:
      X3 = diag(A^3)/2
      X4 = (diag(A^4) - d(d-1) - A d)/2
      X5 = (diag(A^5) - 2 diag(A^3) d - 2 (A * A^2) d - A diag(A^3)
           + 5 diag(A^3))/2
    and graph totals y_k = sum(X_k)/k for k in 3..5 plus the degree-corrected
    trace expansion for 6-cycles. Each identity subtracts the non-simple
    closed-walk shapes (backtrack excursions on triangles and cherries) from
    the corresponding walk count.
    """
    n = A.shape[0]
    if n == 0:
        z = np.zeros(0)
        return z, z, z, 0.0, 0.0, 0.0, 0.0
    A = np.asarray(A, dtype=np.float64)
    A2 = A @ A
    A3 = A2 @ A
    A4 = A3 @ A
    A5 = A4 @ A
    A6 = A5 @ A
    d = np.asarray(d, dtype=np.float64)
    diag3 = np.diag(A3)
    diag4 = np.diag(A4)

    x3 = diag3 / 2.0
    x4 = (diag4 - d * (d - 1.0) - A @ d) / 2.0
    x5 = (np.diag(A5) - 2.0 * diag3 * d - 2.0 * ((A * A2) @ d)
          - A @ diag3 + 5.0 * diag3) / 2.0

    y3 = float(x3.sum() / 3.0)
    y4 = float(x4.sum() / 4.0)
    y5 = float(x5.sum() / 5.0)
    y6 = float(
        (
            np.trace(A6)
            - 3.0 * (diag3 ** 2).sum()
            + 9.0 * (A * A2 ** 2).sum()
            - 6.0 * (d * diag4).sum()
            + 6.0 * np.trace(A4)
            - 4.0 * np.trace(A3)
            + 4.0 * (d ** 3).sum()
            + 3.0 * A3.sum()
            - 12.0 * (d ** 2).sum()
            + 4.0 * np.trace(A2)
        )
        / 12.0
    )
    return x3, x4, x5, y3, y4, y5, y6


def chemical_features(g: MolGraph):
    """Incident bond-order sums per atom and the molecular weight."""
    weights = np.array(BOND_ORDER_WEIGHT, dtype=np.float64)
    valency = weights[g.edge_cat].sum(axis=1) if g.n else np.zeros(0)
    return valency, molecular_weight(g)


def _spectral_node_features(vals: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Two per-node entries from the lowest nonzero eigenvalue clusters.

    Eigenvalues are grouped into clusters (tolerance 1e-8) and each feature is
    the diagonal of the orthogonal projector onto a cluster's eigenspace. The
    projector is basis- and sign-unambiguous, so the features stay exactly
    permutation-equivariant even for degenerate spectra; for simple
    eigenvalues they reduce to the squared eigenvector entries.
    """
    n = vals.shape[0]
    out = np.zeros((n, 2))
    if n == 0:
        return out
    clusters = []
    start = 0
    for i in range(1, n + 1):
        if i == n or vals[i] - vals[start] > _ZERO_EIG_TOL:
            clusters.append((vals[start], start, i))
            start = i
    nonzero = [(s, e) for v, s, e in clusters if v > _ZERO_EIG_TOL]
    for k, (s, e) in enumerate(nonzero[:2]):
        block = vecs[:, s:e]
        out[:, k] = (block * block).sum(axis=1)
    return out


def _nonzero_eigappend(vals: np.ndarray, count: int) -> np.ndarray:
    nz = vals[np.abs(vals) >= _ZERO_EIG_TOL]
    out = np.zeros(count)
    take = min(count, nz.shape[0])
    out[:take] = nz[:take]
    return out


def feature_pack(g: MolGraph, t_norm: float) -> FeaturePack:
    """Assemble the full auxiliary feature set for one graph at one step."""
    n = g.n
    A, d = adjacency(g)
    x3, x4, x5, y3, y4, y5, y6 = cycle_counts(A, d)
    valency, weight = chemical_features(g)

    labels = component_labels(A != 0.0)
    if n:
        sizes = np.bincount(labels)
        biggest = (sizes[labels] == sizes.max()).astype(np.float64)
        n_components = int(sizes.shape[0])
    else:
        biggest = np.zeros(0)
        n_components = 0

    if n:
        vals, vecs = laplacian_spectrum(A)
    else:
        vals, vecs = np.zeros(0), np.zeros((0, 0))
    spectral_nodes = _spectral_node_features(vals, vecs)
    eig5 = _nonzero_eigappend(vals, 5)

    node_extra = np.column_stack([x3, x4, x5, biggest,
                                  spectral_nodes[:, 0], spectral_nodes[:, 1],
                                  valency]) if n else np.zeros((0, NODE_EXTRA_WIDTH))
    graph_extra = np.concatenate([
        [float(n_components)], eig5, [y3, y4, y5, y6], [weight], [float(t_norm)],
    ])
    node_extra.setflags(write=False)
    graph_extra.setflags(write=False)
    return FeaturePack(node_extra=node_extra, graph_extra=graph_extra)
