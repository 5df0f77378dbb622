"""Graph-transformer denoiser predicting clean node and edge categories.

Wiring per block: multi-head node self-attention whose pre-softmax scores are
modulated by the edge channel; an edge update modulated first by the score
tensor and then by the global channel; a global update pooling nodes and
edges; the attention output modulated by the global channel before it
re-enters the node stream. Every sub-update is wrapped in a residual
connection and layer normalization. Edge outputs are symmetrized by
averaging with their transpose, which keeps the network exactly
permutation-equivariant.

Parameters are stored float32 (the checkpoint format is float32) while all
arithmetic runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nnops as ops
from .chem import AtomVocab, BOND_WIDTH, MolGraph, Tag
from .features import FeaturePack, GRAPH_EXTRA_WIDTH, NODE_EXTRA_WIDTH

# fixed input scaling so large-magnitude features do not dominate training
_NODE_SCALE = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.25])
_GRAPH_SCALE = np.concatenate([[0.125], np.full(5, 0.125), np.ones(4), [0.01], [1.0]])


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    """Desk-scale architecture sizes."""

    n_layer: int = 4
    dx: int = 64
    de: int = 32
    dy: int = 32
    n_head: int = 4

    def __post_init__(self):
        if self.dx % self.n_head:
            raise ModelError("node width must be divisible by the head count")

    @property
    def df(self) -> int:
        return self.dx // self.n_head


@dataclass
class DenoiserParams:
    """All learnable tensors plus the vocabulary and sizes they assume."""

    arch: ArchConfig
    vocab: AtomVocab
    tensors: dict[str, np.ndarray]
    init_seed: int

    def node_in_width(self) -> int:
        return self.vocab.width + NODE_EXTRA_WIDTH + 2

    def edge_in_width(self) -> int:
        return BOND_WIDTH + 1

    def clone(self) -> "DenoiserParams":
        return DenoiserParams(self.arch, self.vocab,
                              {k: v.copy() for k, v in self.tensors.items()},
                              self.init_seed)


@dataclass(frozen=True)
class Prediction:
    """Clean-category logits; edge logits are symmetric by construction."""

    node_logits: np.ndarray   # (n, vocab.width)
    edge_logits: np.ndarray   # (n, n, BOND_WIDTH)

    def node_probs(self) -> np.ndarray:
        return _softmax_rows(self.node_logits)

    def edge_probs(self) -> np.ndarray:
        return _softmax_rows(self.edge_logits)


@dataclass(frozen=True)
class LossReport:
    atom_ce: float
    bond_ce: float
    total: float
    n_atom_positions: int
    n_bond_positions: int


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_params(arch: ArchConfig, vocab: AtomVocab, seed: int = 0,
                dtype=np.float32) -> DenoiserParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, unit gains."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}

    def weight(name, fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)

    def bias(name, width):
        tensors[name] = np.zeros(width, dtype=dtype)

    def ln(prefix, width):
        tensors[prefix + ".g"] = np.ones(width, dtype=dtype)
        tensors[prefix + ".b"] = np.zeros(width, dtype=dtype)

    dx, de, dy, h = arch.dx, arch.de, arch.dy, arch.n_head
    node_in = vocab.width + NODE_EXTRA_WIDTH + 2
    edge_in = BOND_WIDTH + 1

    for name, din, dmid in (("enc_x", node_in, dx), ("enc_e", edge_in, de),
                            ("enc_y", GRAPH_EXTRA_WIDTH, dy)):
        weight(f"{name}.w1", din, dmid)
        bias(f"{name}.b1", dmid)
        weight(f"{name}.w2", dmid, dmid)
        bias(f"{name}.b2", dmid)

    for i in range(arch.n_layer):
        p = f"L{i}"
        for qkv in ("wq", "wk", "wv"):
            weight(f"{p}.{qkv}", dx, dx)
            bias(f"{p}.b{qkv[1]}", dx)
        weight(f"{p}.score_w1", de, h)
        weight(f"{p}.score_w2", h, h)
        weight(f"{p}.xfilm_w1", dy, dx)
        weight(f"{p}.xfilm_w2", dx, dx)
        weight(f"{p}.xout_w", dx, dx)
        bias(f"{p}.xout_b", dx)
        weight(f"{p}.efilm_s_w1", h, de)
        weight(f"{p}.efilm_s_w2", de, de)
        weight(f"{p}.efilm_y_w1", dy, de)
        weight(f"{p}.efilm_y_w2", de, de)
        weight(f"{p}.eout_w", de, de)
        bias(f"{p}.eout_b", de)
        weight(f"{p}.pnax_w", 4 * dx, dy)
        weight(f"{p}.pnae_w", 4 * de, dy)
        weight(f"{p}.yself_w", dy, dy)
        bias(f"{p}.yself_b", dy)
        ln(f"{p}.lnx", dx)
        ln(f"{p}.lne", de)
        ln(f"{p}.lny", dy)

    weight("dec_x.w1", dx, dx)
    bias("dec_x.b1", dx)
    weight("dec_x.w2", dx, vocab.width)
    bias("dec_x.b2", vocab.width)
    weight("dec_e.w1", de, de)
    bias("dec_e.b1", de)
    weight("dec_e.w2", de, BOND_WIDTH)
    bias("dec_e.b2", BOND_WIDTH)

    return DenoiserParams(arch=arch, vocab=vocab, tensors=tensors, init_seed=seed)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def assemble_inputs(g: MolGraph, feats: FeaturePack,
                    free_nodes: np.ndarray, free_edges: np.ndarray):
    """Concatenate one-hot states, auxiliary features, and condition bits.

    The condition is encoded as two node bits (product membership and
    position-is-generated) plus one edge bit (position-is-generated).
    """
    is_product = (np.asarray(g.node_tag) == int(Tag.PRODUCT)).astype(np.float64)
    x = np.concatenate([
        g.node_onehot(),
        feats.node_extra * _NODE_SCALE,
        is_product[:, None],
        free_nodes.astype(np.float64)[:, None],
    ], axis=1)
    e = np.concatenate([
        g.edge_onehot(),
        free_edges.astype(np.float64)[:, :, None],
    ], axis=2)
    y = feats.graph_extra * _GRAPH_SCALE
    return x, e, y


def forward(params: DenoiserParams, g: MolGraph, feats: FeaturePack,
            free_nodes: np.ndarray, free_edges: np.ndarray,
            want_cache: bool = False):
    """Run the denoiser; returns a Prediction (and the tape when asked)."""
    if g.vocab.width != params.vocab.width:
        raise ModelError("graph vocabulary does not match the model")
    t = {k: v.astype(np.float64) for k, v in params.tensors.items()}
    n = g.n
    arch = params.arch
    tape: list = []

    def push(out_and_cache):
        out, cache = out_and_cache
        tape.append(cache)
        return out

    x_in, e_in, y_in = assemble_inputs(g, feats, free_nodes, free_edges)

    def encoder(prefix, val):
        h1 = push(ops.linear(val, t[f"{prefix}.w1"], t[f"{prefix}.b1"]))
        h1 = push(ops.relu(h1))
        return push(ops.linear(h1, t[f"{prefix}.w2"], t[f"{prefix}.b2"]))

    x = encoder("enc_x", x_in)
    e = encoder("enc_e", e_in)
    y = encoder("enc_y", y_in)

    for i in range(arch.n_layer):
        p = f"L{i}"
        q = push(ops.linear(x, t[f"{p}.wq"], t[f"{p}.bq"])).reshape(n, arch.n_head, arch.df)
        k = push(ops.linear(x, t[f"{p}.wk"], t[f"{p}.bk"])).reshape(n, arch.n_head, arch.df)
        v = push(ops.linear(x, t[f"{p}.wv"], t[f"{p}.bv"])).reshape(n, arch.n_head, arch.df)
        s0 = push(ops.pair_scores(q, k))
        s = push(ops.film(e, s0, t[f"{p}.score_w1"], t[f"{p}.score_w2"]))
        attn = push(ops.softmax(s, axis=1))
        gath = push(ops.attn_apply(attn, v)).reshape(n, arch.dx)
        y_rows = np.broadcast_to(y, (n, arch.dy))
        xf = push(ops.film(y_rows, gath, t[f"{p}.xfilm_w1"], t[f"{p}.xfilm_w2"]))
        xo = push(ops.linear(xf, t[f"{p}.xout_w"], t[f"{p}.xout_b"]))
        x = push(ops.layer_norm(x + xo, t[f"{p}.lnx.g"], t[f"{p}.lnx.b"]))

        e1 = push(ops.film(s, e, t[f"{p}.efilm_s_w1"], t[f"{p}.efilm_s_w2"]))
        y_pairs = np.broadcast_to(y, (n, n, arch.dy))
        e2 = push(ops.film(y_pairs, e1, t[f"{p}.efilm_y_w1"], t[f"{p}.efilm_y_w2"]))
        eo = push(ops.linear(e2, t[f"{p}.eout_w"], t[f"{p}.eout_b"]))
        eo = push(ops.sym_pairs(eo))
        e = push(ops.layer_norm(e + eo, t[f"{p}.lne.g"], t[f"{p}.lne.b"]))

        px = push(ops.pna(x, t[f"{p}.pnax_w"]))
        pe = push(ops.pna(e.reshape(n * n, arch.de), t[f"{p}.pnae_w"]))
        ys = push(ops.linear(y, t[f"{p}.yself_w"], t[f"{p}.yself_b"]))
        y = push(ops.layer_norm(y + ys + px + pe, t[f"{p}.lny.g"], t[f"{p}.lny.b"]))

    def decoder(prefix, val):
        h1 = push(ops.linear(val, t[f"{prefix}.w1"], t[f"{prefix}.b1"]))
        h1 = push(ops.relu(h1))
        return push(ops.linear(h1, t[f"{prefix}.w2"], t[f"{prefix}.b2"]))

    node_logits = decoder("dec_x", x)
    edge_raw = decoder("dec_e", e)
    edge_logits = push(ops.sym_pairs(edge_raw))

    for name, arr in (("node_logits", node_logits), ("edge_logits", edge_logits)):
        if not np.all(np.isfinite(arr)):
            raise ModelError(f"non-finite values in {name}")
    pred = Prediction(node_logits=node_logits, edge_logits=edge_logits)
    if want_cache:
        return pred, tape
    return pred


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def loss(pred: Prediction, target: MolGraph, free_nodes: np.ndarray,
         free_edges: np.ndarray, mu: float) -> LossReport:
    """Mean cross-entropy over supervised positions, atoms weighted by mu."""
    report, _, _ = _loss_with_grads(pred, target, free_nodes, free_edges, mu)
    return report


def _loss_with_grads(pred: Prediction, target: MolGraph, free_nodes, free_edges, mu):
    n = target.n
    node_idx = np.flatnonzero(free_nodes)
    iu, ju = np.triu_indices(n, k=1)
    pair_mask = free_edges[iu, ju]
    ei, ej = iu[pair_mask], ju[pair_mask]
    if node_idx.size == 0 and ei.size == 0:
        raise ModelError("no supervised positions")

    g_nodes = np.zeros_like(pred.node_logits)
    atom_ce = 0.0
    if node_idx.size:
        probs = _softmax_rows(pred.node_logits[node_idx])
        tgt = target.node_cat[node_idx]
        atom_ce = float(-np.log(probs[np.arange(node_idx.size), tgt]).mean())
        delta = probs
        delta[np.arange(node_idx.size), tgt] -= 1.0
        g_nodes[node_idx] = mu * delta / node_idx.size

    g_edges = np.zeros_like(pred.edge_logits)
    bond_ce = 0.0
    if ei.size:
        probs = _softmax_rows(pred.edge_logits[ei, ej])
        tgt = target.edge_cat[ei, ej]
        bond_ce = float(-np.log(probs[np.arange(ei.size), tgt]).mean())
        delta = probs
        delta[np.arange(ei.size), tgt] -= 1.0
        g_edges[ei, ej] = delta / ei.size

    total = mu * atom_ce + bond_ce
    report = LossReport(atom_ce=atom_ce, bond_ce=bond_ce, total=total,
                        n_atom_positions=int(node_idx.size),
                        n_bond_positions=int(ei.size))
    return report, g_nodes, g_edges


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def backward(params: DenoiserParams, g: MolGraph, feats: FeaturePack,
             free_nodes: np.ndarray, free_edges: np.ndarray,
             target: MolGraph, mu: float):
    """Loss plus exact gradients of the total loss for every tensor."""
    pred, tape = forward(params, g, feats, free_nodes, free_edges, want_cache=True)
    report, g_nodes, g_edges = _loss_with_grads(pred, target, free_nodes, free_edges, mu)

    grads = {name: np.zeros(ts.shape, dtype=np.float64)
             for name, ts in params.tensors.items()}
    n = g.n
    arch = params.arch
    pop = _TapePopper(tape)

    def linear_back(prefix_w, prefix_b, grad):
        gx, gw, gb = ops.linear_bwd(pop(), grad)
        grads[prefix_w] += gw
        grads[prefix_b] += gb
        return gx

    def decoder_back(prefix, grad):
        grad = linear_back(f"{prefix}.w2", f"{prefix}.b2", grad)
        grad = ops.relu_bwd(pop(), grad)
        return linear_back(f"{prefix}.w1", f"{prefix}.b1", grad)

    # decoder (reverse order of forward pushes)
    g_edge_raw = ops.sym_pairs_bwd(pop(), g_edges)
    ge = decoder_back("dec_e", g_edge_raw)
    gx = decoder_back("dec_x", g_nodes)
    gy = np.zeros(arch.dy)

    for i in reversed(range(arch.n_layer)):
        p = f"L{i}"
        # global sub-update
        g_in, gg, gb = ops.layer_norm_bwd(pop(), gy)
        grads[f"{p}.lny.g"] += gg
        grads[f"{p}.lny.b"] += gb
        gy = g_in  # residual path
        g_ys = linear_back(f"{p}.yself_w", f"{p}.yself_b", g_in)
        gy = gy + g_ys
        g_pe_in, gw = ops.pna_bwd(pop(), g_in)
        # popped in forward order: pna_e was pushed after pna_x; reverse it
        grads[f"{p}.pnae_w"] += gw
        ge = ge + g_pe_in.reshape(n, n, arch.de)
        g_px_in, gw = ops.pna_bwd(pop(), g_in)
        grads[f"{p}.pnax_w"] += gw
        gx = gx + g_px_in

        # edge sub-update
        g_in, gg, gb = ops.layer_norm_bwd(pop(), ge)
        grads[f"{p}.lne.g"] += gg
        grads[f"{p}.lne.b"] += gb
        ge = g_in
        g_eo = ops.sym_pairs_bwd(pop(), g_in)
        g_e2 = linear_back(f"{p}.eout_w", f"{p}.eout_b", g_eo)
        g_ypairs, g_e1, gw1, gw2 = ops.film_bwd(pop(), g_e2)
        grads[f"{p}.efilm_y_w1"] += gw1
        grads[f"{p}.efilm_y_w2"] += gw2
        gy = gy + g_ypairs.sum(axis=(0, 1))
        g_s_edge, g_e_old, gw1, gw2 = ops.film_bwd(pop(), g_e1)
        grads[f"{p}.efilm_s_w1"] += gw1
        grads[f"{p}.efilm_s_w2"] += gw2
        ge = ge + g_e_old

        # node sub-update
        g_in, gg, gb = ops.layer_norm_bwd(pop(), gx)
        grads[f"{p}.lnx.g"] += gg
        grads[f"{p}.lnx.b"] += gb
        gx = g_in
        g_xf = linear_back(f"{p}.xout_w", f"{p}.xout_b", g_in)
        g_yrows, g_gath, gw1, gw2 = ops.film_bwd(pop(), g_xf)
        grads[f"{p}.xfilm_w1"] += gw1
        grads[f"{p}.xfilm_w2"] += gw2
        gy = gy + g_yrows.sum(axis=0)
        g_attn, g_v = ops.attn_apply_bwd(pop(), g_gath.reshape(n, arch.n_head, arch.df))
        g_s = ops.softmax_bwd(pop(), g_attn)
        g_s = g_s + g_s_edge
        g_e_film, g_s0, gw1, gw2 = ops.film_bwd(pop(), g_s)
        grads[f"{p}.score_w1"] += gw1
        grads[f"{p}.score_w2"] += gw2
        ge = ge + g_e_film
        g_q, g_k = ops.pair_scores_bwd(pop(), g_s0)
        gx = gx + linear_back(f"{p}.wv", f"{p}.bv", g_v.reshape(n, arch.dx))
        gx = gx + linear_back(f"{p}.wk", f"{p}.bk", g_k.reshape(n, arch.dx))
        gx = gx + linear_back(f"{p}.wq", f"{p}.bq", g_q.reshape(n, arch.dx))

    def encoder_back(prefix, grad):
        grad = linear_back(f"{prefix}.w2", f"{prefix}.b2", grad)
        grad = ops.relu_bwd(pop(), grad)
        linear_back(f"{prefix}.w1", f"{prefix}.b1", grad)

    encoder_back("enc_y", gy)
    encoder_back("enc_e", ge)
    encoder_back("enc_x", gx)
    pop.assert_empty()

    for name, arr in grads.items():
        if not np.all(np.isfinite(arr)):
            raise ModelError(f"non-finite gradient for {name}")
    return report, grads


class _TapePopper:
    def __init__(self, tape):
        self._tape = tape

    def __call__(self):
        return self._tape.pop()

    def assert_empty(self):
        if self._tape:
            raise ModelError("forward/backward tape mismatch")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: DenoiserParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t) for k, t in params.tensors.items()},
            v={k: np.zeros_like(t) for k, t in params.tensors.items()},
            step=0,
        )


def adam_step(params: DenoiserParams, grads: dict[str, np.ndarray],
              state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, applied in place (float64 math, float32 store)."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, tensor in params.tensors.items():
        grad = grads[name]
        m = state.m[name].astype(np.float64)
        v = state.v[name].astype(np.float64)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new = tensor.astype(np.float64) - update
        params.tensors[name] = new.astype(tensor.dtype)
        state.m[name] = m.astype(tensor.dtype)
        state.v[name] = v.astype(tensor.dtype)
