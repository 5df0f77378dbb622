"""Categorical diffusion machinery: schedules, transition kernels, sampling.

State transitions follow the convex form Q_t = a_t*I + (1-a_t)*1 v^T, whose
products stay in the family (parameters multiply). The cumulative matrix is
therefore computed analytically from the retention curve instead of by
accumulating products, which removes drift over long horizons.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
import math

import numpy as np

from .chem import BOND_NONE, BOND_WIDTH, MolGraph


class Prior(Enum):
    """Limit distribution of the noising chain."""

    ABSORBING = "absorbing"
    UNIFORM = "uniform"


class DiffusionError(ValueError):
    pass


class ImpossiblePairError(DiffusionError):
    """A (noisy, clean) state pair with zero probability under the kernel."""


def cosine_alpha_bar(t: int, total: int, s: float) -> float:
    """Cosine retention curve evaluated at step ``t`` of ``total``.

    Returns cos(0.5*pi*(t/total + s)/(1 + s))**2, the surviving signal
    fraction after ``t`` noising steps.
    """
    if not 0 <= t <= total:
        raise DiffusionError(f"step {t} outside [0, {total}]")
    if s <= 0:
        raise DiffusionError("offset must be positive")
    x = 0.5 * math.pi * (t / total + s) / (1.0 + s)
    return math.cos(x) ** 2


@dataclass(frozen=True)
class NoiseSchedule:
    """Retention curve alpha_bar over steps 0..T plus per-step ratios.

    alpha_bar[0] is pinned to exactly 1 (zero noising steps leave the state
    untouched) so the cumulative kernel telescopes from the identity; the
    remaining entries follow the unnormalized cosine curve.
    """

    T: int
    s: float
    alpha_bar: np.ndarray
    alpha: np.ndarray

    @classmethod
    def cosine(cls, T: int, s: float = 0.008) -> "NoiseSchedule":
        if T < 1:
            raise DiffusionError("schedule needs at least one step")
        bar = np.empty(T + 1)
        bar[0] = 1.0
        for t in range(1, T + 1):
            bar[t] = cosine_alpha_bar(t, T, s)
        alpha = np.ones(T + 1)
        alpha[1:] = np.clip(bar[1:] / bar[:-1], 0.0, 1.0)
        bar.setflags(write=False)
        alpha.setflags(write=False)
        return cls(T=T, s=s, alpha_bar=bar, alpha=alpha)

    @classmethod
    def from_alpha_bar(cls, alpha_bar, s: float = 0.0) -> "NoiseSchedule":
        """Build from an explicit retention curve (mainly for tests)."""
        bar = np.asarray(alpha_bar, dtype=np.float64).copy()
        if bar.ndim != 1 or bar.shape[0] < 2 or bar[0] != 1.0:
            raise DiffusionError("alpha_bar must be 1-d and start at 1.0")
        alpha = np.ones_like(bar)
        alpha[1:] = np.clip(bar[1:] / bar[:-1], 0.0, 1.0)
        bar.setflags(write=False)
        alpha.setflags(write=False)
        return cls(T=bar.shape[0] - 1, s=s, alpha_bar=bar, alpha=alpha)


def _limit_vector(dim: int, prior: Prior) -> np.ndarray:
    if prior is Prior.ABSORBING:
        v = np.zeros(dim)
        v[0] = 1.0
    else:
        v = np.full(dim, 1.0 / dim)
    return v


@dataclass(frozen=True)
class TransitionKernel:
    """Per-step and cumulative Markov matrices with their limit row.

    ``Q[t]`` applies one noising step t-1 -> t; ``Qbar[t]`` applies 0 -> t.
    Index 0 holds identities.
    """

    dim: int
    prior: Prior
    limit: np.ndarray
    schedule: NoiseSchedule
    Q: np.ndarray
    Qbar: np.ndarray

    def row(self, t: int, category: int) -> np.ndarray:
        return self.Qbar[t, category]


def build_kernel(schedule: NoiseSchedule, dim: int, prior: Prior) -> TransitionKernel:
    """Materialize the convex-mixture kernel for one categorical axis."""
    if dim < 2:
        raise DiffusionError("kernel needs at least two categories")
    v = _limit_vector(dim, prior)
    eye = np.eye(dim)
    ones_v = np.ones((dim, 1)) @ v[None, :]
    T = schedule.T
    Q = np.empty((T + 1, dim, dim))
    Qbar = np.empty((T + 1, dim, dim))
    for t in range(T + 1):
        a = schedule.alpha[t] if t else 1.0
        ab = schedule.alpha_bar[t]
        Q[t] = a * eye + (1.0 - a) * ones_v
        Qbar[t] = ab * eye + (1.0 - ab) * ones_v
    Q.setflags(write=False)
    Qbar.setflags(write=False)
    v.setflags(write=False)
    return TransitionKernel(dim=dim, prior=prior, limit=v, schedule=schedule, Q=Q, Qbar=Qbar)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one category per row of a (m, k) probability matrix."""
    if probs.shape[0] == 0:
        return np.zeros(0, dtype=np.int16)
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(probs.shape[0])
    return np.asarray((u[:, None] > cdf).sum(axis=1), dtype=np.int16)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def forward_sample(
    g0: MolGraph,
    t: int,
    kernel_x: TransitionKernel,
    kernel_e: TransitionKernel,
    seed,
    free_nodes: np.ndarray | None = None,
    free_edges: np.ndarray | None = None,
) -> MolGraph:
    """Sample a noisy graph at step ``t`` given the clean graph.

    Each free node and free upper-triangle edge is drawn independently from
    its cumulative transition row; frozen positions are copied unchanged and
    the sampled upper triangle is mirrored.
    """
    n = g0.n
    if kernel_x.dim != g0.vocab.width or kernel_e.dim != BOND_WIDTH:
        raise DiffusionError("kernel dimensions do not match graph vocabularies")
    if not 0 <= t <= kernel_x.schedule.T:
        raise DiffusionError(f"step {t} outside the schedule horizon")
    rng = _as_rng(seed)
    if free_nodes is None:
        free_nodes = np.ones(n, dtype=bool)
    if free_edges is None:
        free_edges = ~np.eye(n, dtype=bool)

    node_cat = np.array(g0.node_cat)
    idx = np.flatnonzero(free_nodes)
    if idx.size:
        node_cat[idx] = _sample_rows(kernel_x.Qbar[t][g0.node_cat[idx]], rng)

    edge_cat = np.array(g0.edge_cat)
    iu, ju = np.triu_indices(n, k=1)
    mask = free_edges[iu, ju]
    si, sj = iu[mask], ju[mask]
    if si.size:
        drawn = _sample_rows(kernel_e.Qbar[t][g0.edge_cat[si, sj]], rng)
        edge_cat[si, sj] = drawn
        edge_cat[sj, si] = drawn
    return g0.with_states(node_cat=node_cat, edge_cat=edge_cat)


def posterior(xt: int, x0: int, kernel: TransitionKernel, t: int) -> np.ndarray:
    """One-step denoising posterior over the state at t-1.

    Proportional to Q_t[:, xt] * Qbar_{t-1}[x0, :]; raises if the (xt, x0)
    pair has zero probability under the kernel.
    """
    if not 1 <= t <= kernel.schedule.T:
        raise DiffusionError(f"step {t} outside [1, {kernel.schedule.T}]")
    unnorm = kernel.Q[t][:, xt] * kernel.Qbar[t - 1][x0, :]
    total = unnorm.sum()
    if total <= 0.0:
        raise ImpossiblePairError(
            f"state pair (xt={xt}, x0={x0}) is unreachable at step {t}")
    return unnorm / total


def posterior_mixture(xt: int, pred0: np.ndarray, kernel: TransitionKernel, t: int) -> np.ndarray:
    """Reverse-step distribution: posteriors mixed over predicted clean states.

    Clean states that make the pair unreachable contribute nothing; the mixture
    is renormalized at the end. All-zero mixtures indicate a corrupt state.
    """
    unnorm = kernel.Q[t][:, xt][None, :] * kernel.Qbar[t - 1]  # (x0, x_{t-1})
    row_sum = unnorm.sum(axis=1, keepdims=True)
    safe = np.where(row_sum > 0.0, row_sum, 1.0)
    per_x0 = unnorm / safe
    per_x0[row_sum[:, 0] <= 0.0] = 0.0
    mix = pred0 @ per_x0
    total = mix.sum()
    if total <= 0.0:
        raise ImpossiblePairError(f"no clean state can explain xt={xt} at step {t}")
    return mix / total


def _check_rows(pred: np.ndarray, what: str) -> None:
    if pred.ndim != 2:
        raise DiffusionError(f"{what} predictions must be 2-d rows")
    if np.any(pred < -1e-9) or np.any(np.abs(pred.sum(axis=1) - 1.0) > 1e-6):
        raise DiffusionError(f"{what} prediction rows are not distributions")


def reverse_step(
    gt: MolGraph,
    node_pred: np.ndarray,
    edge_pred: np.ndarray,
    kernel_x: TransitionKernel,
    kernel_e: TransitionKernel,
    t: int,
    seed,
    free_nodes: np.ndarray | None = None,
    free_edges: np.ndarray | None = None,
) -> MolGraph:
    """Sample the graph at t-1 from predicted clean-state distributions.

    For each free position the posterior is marginalized over the prediction
    row and sampled; frozen positions are copied and the upper triangle is
    mirrored onto the lower one.
    """
    n = gt.n
    rng = _as_rng(seed)
    if free_nodes is None:
        free_nodes = np.ones(n, dtype=bool)
    if free_edges is None:
        free_edges = ~np.eye(n, dtype=bool)

    node_cat = np.array(gt.node_cat)
    for i in np.flatnonzero(free_nodes):
        row = np.asarray(node_pred[i], dtype=np.float64)
        _check_rows(row[None, :], "node")
        mix = posterior_mixture(int(gt.node_cat[i]), row, kernel_x, t)
        node_cat[i] = _sample_rows(mix[None, :], rng)[0]

    edge_cat = np.array(gt.edge_cat)
    iu, ju = np.triu_indices(n, k=1)
    for i, j in zip(iu[free_edges[iu, ju]], ju[free_edges[iu, ju]]):
        row = np.asarray(edge_pred[i, j], dtype=np.float64)
        _check_rows(row[None, :], "edge")
        mix = posterior_mixture(int(gt.edge_cat[i, j]), row, kernel_e, t)
        c = _sample_rows(mix[None, :], rng)[0]
        edge_cat[i, j] = c
        edge_cat[j, i] = c
    return gt.with_states(node_cat=node_cat, edge_cat=edge_cat)


def sample_from_limit(
    g: MolGraph,
    kernel_x: TransitionKernel,
    kernel_e: TransitionKernel,
    seed,
    free_nodes: np.ndarray | None = None,
    free_edges: np.ndarray | None = None,
) -> MolGraph:
    """Initialize free positions from the kernels' limit distributions."""
    n = g.n
    rng = _as_rng(seed)
    if free_nodes is None:
        free_nodes = np.zeros(n, dtype=bool)
    if free_edges is None:
        free_edges = np.zeros((n, n), dtype=bool)
    node_cat = np.array(g.node_cat)
    idx = np.flatnonzero(free_nodes)
    if idx.size:
        node_cat[idx] = _sample_rows(np.tile(kernel_x.limit, (idx.size, 1)), rng)
    edge_cat = np.array(g.edge_cat)
    iu, ju = np.triu_indices(n, k=1)
    mask = free_edges[iu, ju]
    si, sj = iu[mask], ju[mask]
    if si.size:
        drawn = _sample_rows(np.tile(kernel_e.limit, (si.size, 1)), rng)
        edge_cat[si, sj] = drawn
        edge_cat[sj, si] = drawn
    return g.with_states(node_cat=node_cat, edge_cat=edge_cat)
