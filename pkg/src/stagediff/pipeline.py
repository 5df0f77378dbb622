"""Staged generation pipeline: group generation, bond generation, post-adaptation.

A reactant is produced from a product in stages. Generative stages run
reverse diffusion over disjoint position sets of one joint graph (padded
group slots spliced onto the frozen product); the final stage is rule-based:
external bonds mark reaction sites on the product and the bond between two
adjacent sites is broken.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .chem import BOND_NONE, MolGraph, Tag, splice, strip_dummies
from .diffusion import (
    NoiseSchedule, Prior, TransitionKernel, build_kernel, forward_sample,
    reverse_step, sample_from_limit,
)
from .features import feature_pack
from .model import (
    AdamState, DenoiserParams, LossReport, adam_step, backward, forward,
)
from .reactions import ReactionRecord, SupervisionTarget, extract_supervision


class StageOrder(Enum):
    GROUP_THEN_BOND = "group_then_bond"
    BOND_THEN_GROUP = "bond_then_group"
    JOINT = "joint"


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    """Stage horizons, loss weight, group budget, and prior/order switches."""

    t1: int = 500
    t2: int = 50
    mu: float = 0.2
    n_g: int = 8
    prior_kind: Prior = Prior.ABSORBING
    stage_order: StageOrder = StageOrder.GROUP_THEN_BOND
    schedule_s: float = 0.008

    def __post_init__(self):
        if self.t1 < 1 or self.t2 < 1:
            raise PipelineError("stage horizons must be at least 1")
        if self.n_g < 1:
            raise PipelineError("group budget must be at least 1")

    def to_dict(self) -> dict:
        return {
            "t1": self.t1, "t2": self.t2, "mu": self.mu, "n_g": self.n_g,
            "prior_kind": self.prior_kind.value,
            "stage_order": self.stage_order.value,
            "schedule_s": self.schedule_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        return cls(t1=d["t1"], t2=d["t2"], mu=d["mu"], n_g=d["n_g"],
                   prior_kind=Prior(d["prior_kind"]),
                   stage_order=StageOrder(d["stage_order"]),
                   schedule_s=d.get("schedule_s", 0.008))


@dataclass(frozen=True)
class StageKernels:
    """Node/edge kernels for both horizons, shared across records."""

    kx1: TransitionKernel
    ke1: TransitionKernel
    kx2: TransitionKernel
    ke2: TransitionKernel


def build_stage_kernels(cfg: StageConfig, vocab_width: int) -> StageKernels:
    sched1 = NoiseSchedule.cosine(cfg.t1, cfg.schedule_s)
    sched2 = NoiseSchedule.cosine(cfg.t2, cfg.schedule_s)
    from .chem import BOND_WIDTH
    return StageKernels(
        kx1=build_kernel(sched1, vocab_width, cfg.prior_kind),
        ke1=build_kernel(sched1, BOND_WIDTH, cfg.prior_kind),
        kx2=build_kernel(sched2, vocab_width, cfg.prior_kind),
        ke2=build_kernel(sched2, BOND_WIDTH, cfg.prior_kind),
    )


# ---------------------------------------------------------------------------
# Joint graphs and stage plans
# ---------------------------------------------------------------------------

def padded_group_graph(sup: SupervisionTarget, n_g: int, vocab) -> MolGraph:
    """Group subgraph padded with dummy slots up to the budget."""
    if sup.group_size > n_g:
        raise PipelineError(
            f"group of size {sup.group_size} exceeds the budget {n_g}")
    real = sup.group_graph(vocab)
    symbols = list(sup.group_symbols) + ["*"] * (n_g - sup.group_size)
    cats = np.array([vocab.index(s) if s != "*" else 0 for s in symbols], dtype=np.int16)
    n = n_g
    edges = np.zeros((n, n), dtype=np.int16)
    edges[:real.n, :real.n] = real.edge_cat
    tags = np.array([int(Tag.GROUP)] * real.n + [int(Tag.DUMMY)] * (n - real.n),
                    dtype=np.int8)
    return MolGraph(vocab, cats, edges, tags)


def joint_graph(product: MolGraph, sup: SupervisionTarget, n_g: int) -> MolGraph:
    """Product plus padded group plus the true external bonds."""
    group = padded_group_graph(sup, n_g, product.vocab)
    cross = [(p, product.n + g, o) for g, p, o in sup.external_bonds]
    return splice([product.with_tags(Tag.PRODUCT), group], cross)


def group_masks(g: MolGraph):
    """Free positions for the group stage: group slots and their inner edges."""
    gen = np.asarray(g.node_tag) != int(Tag.PRODUCT)
    free_nodes = gen.copy()
    free_edges = gen[:, None] & gen[None, :]
    np.fill_diagonal(free_edges, False)
    return free_nodes, free_edges


def bond_masks(g: MolGraph):
    """Free positions for the bond stage: the product-to-group cross block."""
    gen = np.asarray(g.node_tag) != int(Tag.PRODUCT)
    free_nodes = np.zeros(g.n, dtype=bool)
    free_edges = gen[:, None] ^ gen[None, :]
    return free_nodes, free_edges


def joint_masks(g: MolGraph):
    gn, ge = group_masks(g)
    bn, be = bond_masks(g)
    return gn | bn, ge | be


@dataclass(frozen=True)
class StagePlan:
    """One generative stage: clean state, free positions, horizon, weights."""

    name: str
    clean: MolGraph
    free_nodes: np.ndarray
    free_edges: np.ndarray
    horizon: int
    mu: float
    kernel_x: TransitionKernel
    kernel_e: TransitionKernel


def _zero_cross(g: MolGraph) -> MolGraph:
    _, cross = bond_masks(g)
    edges = np.array(g.edge_cat)
    edges[cross] = BOND_NONE
    return g.with_states(edge_cat=edges)


def _blank_group(g: MolGraph) -> MolGraph:
    """Force group slots to dummy and clear group-internal edges."""
    nodes = np.array(g.node_cat)
    gen = np.asarray(g.node_tag) != int(Tag.PRODUCT)
    nodes[gen] = 0
    _, inner = group_masks(g)
    edges = np.array(g.edge_cat)
    edges[inner] = BOND_NONE
    return g.with_states(node_cat=nodes, edge_cat=edges)


def stage_plans(full: MolGraph, cfg: StageConfig, kernels: StageKernels) -> list[StagePlan]:
    """Training-time plans for the configured stage order.

    The clean state of each stage holds the positions generated in later
    stages at their empty values, and earlier-stage positions at their true
    values (teacher forcing).
    """
    fn_g, fe_g = group_masks(full)
    fn_b, fe_b = bond_masks(full)
    order = cfg.stage_order
    if order is StageOrder.GROUP_THEN_BOND:
        return [
            StagePlan("group", _zero_cross(full), fn_g, fe_g, cfg.t1, cfg.mu,
                      kernels.kx1, kernels.ke1),
            StagePlan("bond", full, fn_b, fe_b, cfg.t2, 0.0,
                      kernels.kx2, kernels.ke2),
        ]
    if order is StageOrder.BOND_THEN_GROUP:
        return [
            StagePlan("bond", _blank_group(full), fn_b, fe_b, cfg.t2, 0.0,
                      kernels.kx2, kernels.ke2),
            StagePlan("group", full, fn_g, fe_g, cfg.t1, cfg.mu,
                      kernels.kx1, kernels.ke1),
        ]
    fn, fe = joint_masks(full)
    return [StagePlan("joint", full, fn, fe, cfg.t1, cfg.mu,
                      kernels.kx1, kernels.ke1)]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class PreparedRecord:
    record: ReactionRecord
    sup: SupervisionTarget
    plans: list[StagePlan]


@dataclass
class TrainSettings:
    steps_per_stage: tuple[int, ...] = (2000, 1000)
    batch: int = 8
    lr: float = 1e-4
    lr_final: float | None = None   # linear decay target within each stage
    seed: int = 0
    log_every: int = 50
    replay_fraction: float = 0.3


def prepare_records(records: list[ReactionRecord], cfg: StageConfig,
                    kernels: StageKernels):
    """Extract supervision and build joint graphs; oversized groups are skipped."""
    prepared: list[PreparedRecord] = []
    skipped = 0
    for rec in records:
        sup = extract_supervision(rec)
        if sup.group_size > cfg.n_g:
            skipped += 1
            continue
        full = joint_graph(rec.product, sup, cfg.n_g)
        prepared.append(PreparedRecord(rec, sup, stage_plans(full, cfg, kernels)))
    if not prepared:
        raise PipelineError("no usable records after group-budget filtering")
    return prepared, skipped


def train_chunk(params, prepared, stage_idx, settings, opt, rng, log_rows,
                start_step, steps, replay_from=None):
    """Train one stage objective for ``steps`` optimizer steps.

    Shared by the stage loops and by incremental protocols (convergence
    scans); returns the next global step index."""
    step = start_step
    for local in range(steps):
        if settings.lr_final is None or steps <= 1:
            lr = settings.lr
        else:
            frac = local / (steps - 1)
            lr = settings.lr + (settings.lr_final - settings.lr) * frac
        grads_sum = None
        atom_sum = bond_sum = 0.0
        for _ in range(settings.batch):
            rec = prepared[int(rng.integers(len(prepared)))]
            idx = stage_idx
            if replay_from is not None and rng.random() < settings.replay_fraction:
                idx = replay_from
            plan = rec.plans[idx]
            t = int(rng.integers(1, plan.horizon + 1))
            gt = forward_sample(plan.clean, t, plan.kernel_x, plan.kernel_e, rng,
                                plan.free_nodes, plan.free_edges)
            feats = feature_pack(gt, t / plan.horizon)
            report, grads = backward(params, gt, feats, plan.free_nodes,
                                     plan.free_edges, plan.clean, plan.mu)
            atom_sum += report.atom_ce
            bond_sum += report.bond_ce
            if grads_sum is None:
                grads_sum = grads
            else:
                for name in grads_sum:
                    grads_sum[name] += grads[name]
        for name in grads_sum:
            grads_sum[name] /= settings.batch
        adam_step(params, grads_sum, opt, lr)
        step += 1
        if settings.log_every and step % settings.log_every == 0:
            log_rows.append((step, stage_idx, atom_sum / settings.batch,
                             bond_sum / settings.batch))
    return step


def train(params: DenoiserParams, records: list[ReactionRecord],
          cfg: StageConfig, settings: TrainSettings,
          opt: AdamState | None = None, kernels: StageKernels | None = None):
    """Run all configured stages sequentially over one parameter set.

    Later stages replay earlier-stage objectives for a fraction of batch
    items so a single network keeps serving every stage. Returns
    (optimizer state, skipped record count, loss-log rows).
    """
    if kernels is None:
        kernels = build_stage_kernels(cfg, params.vocab.width)
    prepared, skipped = prepare_records(records, cfg, kernels)
    if opt is None:
        opt = AdamState.for_params(params)
    rng = np.random.default_rng(settings.seed)
    log_rows: list[tuple] = []
    n_stages = len(prepared[0].plans)
    step = 0
    for stage_idx in range(n_stages):
        steps = settings.steps_per_stage[min(stage_idx, len(settings.steps_per_stage) - 1)]
        replay_from = stage_idx - 1 if stage_idx > 0 else None
        step = train_chunk(params, prepared, stage_idx, settings, opt, rng,
                           log_rows, step, steps, replay_from)
    return opt, skipped, log_rows


def train_stage1(params, records, cfg, settings, opt=None):
    """Train only the first configured stage (group stage by default)."""
    kernels = build_stage_kernels(cfg, params.vocab.width)
    prepared, skipped = prepare_records(records, cfg, kernels)
    if opt is None:
        opt = AdamState.for_params(params)
    rng = np.random.default_rng(settings.seed)
    log_rows: list[tuple] = []
    train_chunk(params, prepared, 0, settings, opt, rng, log_rows, 0,
                settings.steps_per_stage[0])
    return opt, skipped, log_rows


def train_stage2(params, records, cfg, settings, opt=None):
    """Train only the second configured stage (teacher-forced condition)."""
    kernels = build_stage_kernels(cfg, params.vocab.width)
    prepared, skipped = prepare_records(records, cfg, kernels)
    if len(prepared[0].plans) < 2:
        raise PipelineError("the configured stage order has a single stage")
    if opt is None:
        opt = AdamState.for_params(params)
    rng = np.random.default_rng(settings.seed + 1)
    log_rows: list[tuple] = []
    train_chunk(params, prepared, 1, settings, opt, rng, log_rows, 0,
                settings.steps_per_stage[min(1, len(settings.steps_per_stage) - 1)])
    return opt, skipped, log_rows


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PostAdaptReport:
    sites: tuple[int, ...]
    broken: tuple[tuple[int, int], ...]
    invalid_sites: bool


@dataclass
class SampleTrace:
    """Full record of one sampled reactant."""

    product: MolGraph
    reactant: MolGraph
    group: MolGraph
    external_bonds: tuple[tuple[int, int, int], ...]
    joint_final: MolGraph
    report: PostAdaptReport
    strip_inconsistencies: int
    steps: list[tuple[str, int, MolGraph]] = field(default_factory=list)
    stage_boundaries: list[int] = field(default_factory=list)


def post_adapt(product: MolGraph, group: MolGraph, external_bonds):
    """Break product bonds between adjacent reaction sites and splice.

    Every product endpoint of an external bond is a reaction site; a product
    bond whose two endpoints are both sites is deleted. Two sites without a
    product bond between them are reported as an invalid configuration (no
    break happens there).
    """
    for gnode, p, _ in external_bonds:
        if not (0 <= p < product.n and 0 <= gnode < group.n):
            raise PipelineError(f"external bond ({gnode}, {p}) out of range")
    sites = sorted({p for _, p, _ in external_bonds})
    broken = []
    invalid = False
    for a_idx in range(len(sites)):
        for b_idx in range(a_idx + 1, len(sites)):
            u, v = sites[a_idx], sites[b_idx]
            if product.edge_cat[u, v] != BOND_NONE:
                broken.append((u, v))
            else:
                invalid = True
    edges = np.array(product.edge_cat)
    for u, v in broken:
        edges[u, v] = edges[v, u] = BOND_NONE
    adapted = product.with_states(edge_cat=edges)
    cross = [(p, product.n + g, o) for g, p, o in external_bonds]
    reactant = splice([adapted, group], cross) if group.n else adapted
    report = PostAdaptReport(sites=tuple(sites), broken=tuple(broken),
                             invalid_sites=invalid)
    return reactant, report


def _assert_frozen(before: MolGraph, after: MolGraph, free_nodes, free_edges):
    frozen_n = ~free_nodes
    if not np.array_equal(before.node_cat[frozen_n], after.node_cat[frozen_n]):
        raise PipelineError("a frozen node changed during sampling")
    frozen_e = ~free_edges
    if not np.array_equal(before.edge_cat[frozen_e], after.edge_cat[frozen_e]):
        raise PipelineError("a frozen edge changed during sampling")


def sampling_scaffold(product: MolGraph, n_g: int) -> MolGraph:
    """Product plus empty group slots, no cross bonds."""
    vocab = product.vocab
    slots = MolGraph(
        vocab,
        np.zeros(n_g, dtype=np.int16),
        np.zeros((n_g, n_g), dtype=np.int16),
        np.full(n_g, int(Tag.GROUP), dtype=np.int8),
    )
    return splice([product.with_tags(Tag.PRODUCT), slots])


def sample(params: DenoiserParams, product: MolGraph, cfg: StageConfig,
           seed, kernels: StageKernels | None = None,
           record_trace: bool = False) -> SampleTrace:
    """Generate one reactant: staged reverse diffusion then post-adaptation."""
    if kernels is None:
        kernels = build_stage_kernels(cfg, params.vocab.width)
    rng = np.random.default_rng(seed)
    g = sampling_scaffold(product, cfg.n_g)
    plans = stage_plans(g, cfg, kernels)  # clean states unused when sampling

    steps: list[tuple[str, int, MolGraph]] = []
    boundaries: list[int] = []
    first = True
    for plan in plans:
        g = sample_from_limit(g, plan.kernel_x, plan.kernel_e, rng,
                              plan.free_nodes, plan.free_edges)
        if first and record_trace:
            steps.append((plan.name, plan.horizon, g))
        first = False
        boundaries.append(len(steps))
        for t in range(plan.horizon, 0, -1):
            feats = feature_pack(g, t / plan.horizon)
            pred = forward(params, g, feats, plan.free_nodes, plan.free_edges)
            nxt = reverse_step(g, pred.node_probs(), pred.edge_probs(),
                               plan.kernel_x, plan.kernel_e, t, rng,
                               plan.free_nodes, plan.free_edges)
            _assert_frozen(g, nxt, plan.free_nodes, plan.free_edges)
            g = nxt
            if record_trace:
                steps.append((plan.name, t - 1, g))

    stripped, n_bad = strip_dummies(g)
    is_group = np.asarray(stripped.node_tag) != int(Tag.PRODUCT)
    group_idx = np.flatnonzero(is_group)
    local = {int(gi): k for k, gi in enumerate(group_idx)}
    group = stripped.subgraph(group_idx)
    external = []
    for i, j, order in stripped.bonds():
        gi, gj = bool(is_group[i]), bool(is_group[j])
        if gi != gj:
            p, gnode = (j, i) if gi else (i, j)
            external.append((local[int(gnode)], int(p), int(order)))
    external = tuple(sorted(external))
    reactant, report = post_adapt(product, group, external)
    return SampleTrace(
        product=product, reactant=reactant, group=group,
        external_bonds=external, joint_final=g, report=report,
        strip_inconsistencies=n_bad, steps=steps, stage_boundaries=boundaries,
    )


# ---------------------------------------------------------------------------
# Trace dump (MGF text blocks)
# ---------------------------------------------------------------------------

def write_trace_mgf(trace: SampleTrace, path) -> None:
    """One text block per recorded step: atoms, tags, bonds."""
    tag_letter = {int(Tag.PRODUCT): "P", int(Tag.GROUP): "G", int(Tag.DUMMY): "D"}
    with open(path, "w", encoding="utf-8") as fh:
        for k, (stage, t, g) in enumerate(trace.steps):
            fh.write(f"[step {k} stage={stage} t={t}]\n")
            fh.write(f"n={g.n}\n")
            fh.write("atoms " + " ".join(g.symbol(i) for i in range(g.n)) + "\n")
            fh.write("tags " + " ".join(tag_letter[int(x)] for x in g.node_tag) + "\n")
            fh.write("bonds\n")
            for i, j, c in g.bonds():
                fh.write(f"{i} {j} {c}\n")
            fh.write("\n")


def read_trace_mgf(path, vocab) -> list[tuple[str, int, MolGraph]]:
    from .chem import MolGraph as MG
    blocks: list[tuple[str, int, MolGraph]] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    i = 0
    tag_value = {"P": int(Tag.PRODUCT), "G": int(Tag.GROUP), "D": int(Tag.DUMMY)}
    while i < len(lines):
        if not lines[i].startswith("[step"):
            i += 1
            continue
        head = lines[i].strip("[]").split()
        stage = head[2].split("=")[1]
        t = int(head[3].split("=")[1])
        n = int(lines[i + 1].split("=")[1])
        atoms = lines[i + 2].split()[1:]
        tags = [tag_value[x] for x in lines[i + 3].split()[1:]]
        assert lines[i + 4] == "bonds"
        i += 5
        bonds = []
        while i < len(lines) and lines[i].strip():
            a, b, c = lines[i].split()
            bonds.append((int(a), int(b), int(c)))
            i += 1
        cats = np.array([0 if s == "*" else vocab.index(s) for s in atoms], dtype=np.int16)
        edges = np.zeros((n, n), dtype=np.int16)
        for a, b, c in bonds:
            edges[a, b] = edges[b, a] = c
        blocks.append((stage, t, MG(vocab, cats, edges, np.array(tags, dtype=np.int8))))
    return blocks
