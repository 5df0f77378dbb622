"""Candidate scoring and corpus-level metrics.

Candidates are ranked by a Monte-Carlo estimate of the negative variational
lower bound: re-noise the candidate's supervised positions at evenly spaced
timesteps, run the denoiser, and accumulate the weighted cross-entropy
against the candidate itself. Lower is better. Noise draws depend only on
(seed, stage, timestep), so scores are comparable across candidates of the
same case and bitwise equal for identical candidates.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .canon import canonical_form
from .chem import MolGraph, Tag, is_valid
from .diffusion import forward_sample
from .features import feature_pack
from .model import DenoiserParams, forward, loss
from .pipeline import (
    StageConfig, StageKernels, build_stage_kernels, joint_graph, sample,
    stage_plans,
)
from .reactions import ReactionRecord, SupervisionTarget, extract_supervision


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateScore:
    candidate: MolGraph
    score: float
    atom_term: float
    bond_term: float


@dataclass(frozen=True)
class EvalSettings:
    samples_per_case: int = 100
    k_list: tuple[int, ...] = (1, 3, 5, 10)
    score_timesteps: int = 50
    seed: int = 0
    jobs: int = 1
    record_traces: bool = False


@dataclass
class CaseResult:
    index: int
    class_label: int | None
    truth_hit_rank: int | None       # 0-based rank of the ground truth, if present
    n_distinct: int
    duplicates_removed: int
    flags: frozenset
    top_scores: list[float]
    top_valid: list[bool]
    top_canon: list[bytes]
    truth_canon: bytes


@dataclass
class MetricsReport:
    k_list: tuple[int, ...]
    top_k_accuracy: dict[int, float]
    top_k_validity: dict[int, float]
    per_class_accuracy: dict[int, dict[int, float]]
    n_cases: int
    samples_per_case: int
    flagged_cases: int
    duplicates_removed: int

    def to_text(self) -> str:
        lines = [f"cases={self.n_cases}",
                 f"samples_per_case={self.samples_per_case}",
                 f"flagged_cases={self.flagged_cases}",
                 f"duplicates_removed={self.duplicates_removed}"]
        for k in self.k_list:
            lines.append(f"accuracy.top{k}={self.top_k_accuracy[k]:.6f}")
        for k in self.k_list:
            lines.append(f"validity.top{k}={self.top_k_validity[k]:.6f}")
        for cls in sorted(self.per_class_accuracy):
            for k in self.k_list:
                lines.append(
                    f"class{cls}.accuracy.top{k}="
                    f"{self.per_class_accuracy[cls][k]:.6f}")
        return "\n".join(lines) + "\n"


def _score_seeds(seed: int, stage_idx: int, t: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stage_idx, t)))


def _even_timesteps(horizon: int, count: int) -> list[int]:
    if horizon <= count:
        return list(range(1, horizon + 1))
    pts = np.linspace(1, horizon, count)
    return sorted(set(int(round(p)) for p in pts))


def score_candidate(params: DenoiserParams, product: MolGraph,
                    sup: SupervisionTarget, cfg: StageConfig,
                    kernels: StageKernels, seed: int,
                    score_timesteps: int = 50,
                    candidate: MolGraph | None = None) -> CandidateScore:
    """Estimate the ranking score of a candidate decomposition.

    ``sup`` describes the candidate reactant relative to the product (group
    atoms plus external bonds); it is re-noised and scored against itself.
    """
    full = joint_graph(product, sup, cfg.n_g)
    plans = stage_plans(full, cfg, kernels)
    atom_terms: list[float] = []
    bond_terms: list[float] = []
    for stage_idx, plan in enumerate(plans):
        atom_vals = []
        bond_vals = []
        for t in _even_timesteps(plan.horizon, score_timesteps):
            rng = _score_seeds(seed, stage_idx, t)
            gt = forward_sample(plan.clean, t, plan.kernel_x, plan.kernel_e,
                                rng, plan.free_nodes, plan.free_edges)
            feats = feature_pack(gt, t / plan.horizon)
            pred = forward(params, gt, feats, plan.free_nodes, plan.free_edges)
            rep = loss(pred, plan.clean, plan.free_nodes, plan.free_edges, cfg.mu)
            atom_vals.append(rep.atom_ce)
            bond_vals.append(rep.bond_ce)
        if plan.free_nodes.any():
            atom_terms.append(float(np.mean(atom_vals)))
        bond_terms.append(float(np.mean(bond_vals)))
    atom_term = float(np.sum(atom_terms))
    bond_term = float(np.sum(bond_terms))
    if candidate is None:
        from .pipeline import post_adapt
        group = sup.group_graph(product.vocab)
        candidate, _ = post_adapt(product, group, sup.external_bonds)
    return CandidateScore(candidate=candidate,
                          score=cfg.mu * atom_term + bond_term,
                          atom_term=atom_term, bond_term=bond_term)


def _trace_to_supervision(trace) -> SupervisionTarget:
    """Describe a sampled candidate in supervision terms for scoring."""
    group = trace.group
    return SupervisionTarget(
        group_symbols=tuple(group.symbol(i) for i in range(group.n)),
        group_bonds=tuple(sorted(group.bonds())),
        external_bonds=trace.external_bonds,
        broken_bonds=trace.report.broken,
        changed_bonds=(),
    )


def evaluate_case(params: DenoiserParams, record: ReactionRecord,
                  cfg: StageConfig, settings: EvalSettings,
                  case_index: int, kernels: StageKernels | None = None) -> CaseResult:
    """Sample, score, dedupe, and rank candidates for one product."""
    if kernels is None:
        kernels = build_stage_kernels(cfg, params.vocab.width)
    sup_truth = extract_supervision(record)
    truth_canon = canonical_form(record.reactants)
    case_seed = settings.seed ^ case_index

    by_canon: dict[bytes, tuple[int, object]] = {}
    duplicates = 0
    for s in range(settings.samples_per_case):
        trace = sample(params, record.product, cfg,
                       np.random.SeedSequence((case_seed, s)), kernels)
        canon = canonical_form(trace.reactant)
        if canon in by_canon:
            duplicates += 1
            continue
        by_canon[canon] = (s, trace)

    scored = []
    for canon, (s, trace) in by_canon.items():
        cand_sup = _trace_to_supervision(trace)
        cs = score_candidate(params, record.product, cand_sup, cfg, kernels,
                             case_seed, settings.score_timesteps,
                             candidate=trace.reactant)
        scored.append((cs.score, canon, s, cs))
    scored.sort(key=lambda item: (item[0], item[1], item[2]))

    max_k = max(settings.k_list)
    top = scored[:max_k]
    truth_rank = None
    for rank, (_, canon, _, _) in enumerate(scored):
        if canon == truth_canon:
            truth_rank = rank
            break
    return CaseResult(
        index=case_index,
        class_label=record.class_label,
        truth_hit_rank=truth_rank,
        n_distinct=len(scored),
        duplicates_removed=duplicates,
        flags=sup_truth.flags,
        top_scores=[item[0] for item in top],
        top_valid=[is_valid(item[3].candidate) for item in top],
        top_canon=[item[1] for item in top],
        truth_canon=truth_canon,
    )


def _case_worker(args):
    params, record, cfg, settings, idx = args
    return evaluate_case(params, record, cfg, settings, idx)


def rank_and_evaluate(params: DenoiserParams, records: list[ReactionRecord],
                      cfg: StageConfig, settings: EvalSettings):
    """Evaluate every record; returns (MetricsReport, per-case results)."""
    if not records:
        raise EvalError("the evaluation corpus is empty")
    if settings.jobs > 1:
        args = [(params, rec, cfg, settings, i) for i, rec in enumerate(records)]
        with ProcessPoolExecutor(max_workers=settings.jobs) as pool:
            cases = list(pool.map(_case_worker, args))
    else:
        kernels = build_stage_kernels(cfg, params.vocab.width)
        cases = [evaluate_case(params, rec, cfg, settings, i, kernels)
                 for i, rec in enumerate(records)]
    report = aggregate_metrics(cases, settings)
    return report, cases


def aggregate_metrics(cases: list[CaseResult], settings: EvalSettings) -> MetricsReport:
    n = len(cases)
    accuracy = {}
    validity = {}
    for k in settings.k_list:
        hits = sum(1 for c in cases
                   if c.truth_hit_rank is not None and c.truth_hit_rank < k)
        accuracy[k] = hits / n
        # candidates missing from a short list count as invalid slots
        valid = sum(sum(1 for v in c.top_valid[:k] if v) for c in cases)
        validity[k] = valid / (n * k)
    per_class: dict[int, dict[int, float]] = {}
    labels = sorted({c.class_label for c in cases if c.class_label is not None})
    for cls in labels:
        cls_cases = [c for c in cases if c.class_label == cls]
        per_class[cls] = {
            k: sum(1 for c in cls_cases
                   if c.truth_hit_rank is not None and c.truth_hit_rank < k)
            / len(cls_cases)
            for k in settings.k_list
        }
    return MetricsReport(
        k_list=settings.k_list,
        top_k_accuracy=accuracy,
        top_k_validity=validity,
        per_class_accuracy=per_class,
        n_cases=n,
        samples_per_case=settings.samples_per_case,
        flagged_cases=sum(1 for c in cases if c.flags),
        duplicates_removed=sum(c.duplicates_removed for c in cases),
    )


def format_case_records(cases: list[CaseResult], products: list[str]) -> str:
    """Tab-separated per-case records: product, hit rank, distinct, scores."""
    lines = ["case\tproduct\ttruth_rank\tdistinct\tflags\ttop_scores"]
    for c in cases:
        rank = "-" if c.truth_hit_rank is None else str(c.truth_hit_rank)
        flags = ",".join(sorted(c.flags)) or "-"
        scores = ",".join(f"{s:.6f}" for s in c.top_scores)
        lines.append(f"{c.index}\t{products[c.index]}\t{rank}\t"
                     f"{c.n_distinct}\t{flags}\t{scores}")
    return "\n".join(lines) + "\n"
