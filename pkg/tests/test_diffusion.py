import math

import numpy as np
import pytest

from stagediff.chem import AtomVocab, BOND_WIDTH, MolGraph
from stagediff.diffusion import (
    DiffusionError, ImpossiblePairError, NoiseSchedule, Prior, TransitionKernel,
    build_kernel, cosine_alpha_bar, forward_sample, posterior,
    posterior_mixture, reverse_step, sample_from_limit,
)

from oracles import mixture_brute, posterior_brute

VOCAB = AtomVocab.default()


class TestCosine:
    def test_terminal_step_is_zero(self):
        for s in (0.004, 0.008, 0.05):
            assert cosine_alpha_bar(500, 500, s) < 1e-12

    def test_start_value(self):
        # direct double-precision evaluation of the curve at t=0
        expected = math.cos(0.5 * math.pi * 0.008 / 1.008) ** 2
        assert expected == pytest.approx(0.9998446, abs=1e-7)
        assert cosine_alpha_bar(0, 500, 0.008) == expected

    def test_midpoint_small_offset(self):
        assert cosine_alpha_bar(250, 500, 1e-9) == pytest.approx(0.5, abs=1e-6)

    def test_range_checks(self):
        with pytest.raises(DiffusionError):
            cosine_alpha_bar(501, 500, 0.008)
        with pytest.raises(DiffusionError):
            cosine_alpha_bar(0, 500, 0.0)


class TestSchedule:
    def test_monotone_and_pinned(self):
        sched = NoiseSchedule.cosine(500)
        assert sched.alpha_bar[0] == 1.0
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert sched.alpha_bar[-1] < 1e-12
        assert np.all((sched.alpha[1:] >= 0) & (sched.alpha[1:] <= 1))

    def test_alpha_is_ratio(self):
        sched = NoiseSchedule.cosine(50)
        for t in range(2, 51):
            assert sched.alpha[t] == pytest.approx(
                sched.alpha_bar[t] / sched.alpha_bar[t - 1], rel=1e-12)


class TestKernel:
    def test_identity_when_alpha_one(self):
        sched = NoiseSchedule.from_alpha_bar([1.0, 1.0, 0.5])
        k = build_kernel(sched, 4, Prior.ABSORBING)
        assert np.allclose(k.Q[1], np.eye(4))

    def test_absorbing_row_when_alpha_zero(self):
        sched = NoiseSchedule.from_alpha_bar([1.0, 0.0])
        k = build_kernel(sched, 5, Prior.ABSORBING)
        expect = np.zeros((5, 5))
        expect[:, 0] = 1.0
        assert np.allclose(k.Q[1], expect)

    @pytest.mark.parametrize("prior", [Prior.ABSORBING, Prior.UNIFORM])
    @pytest.mark.parametrize("dim", [2, 5, 10])
    def test_rows_stochastic(self, prior, dim):
        k = build_kernel(NoiseSchedule.cosine(500), dim, prior)
        for mat in (k.Q, k.Qbar):
            sums = mat.sum(axis=2)
            assert np.max(np.abs(sums - 1.0)) < 1e-12
            assert mat.min() >= 0.0

    @pytest.mark.parametrize("prior", [Prior.ABSORBING, Prior.UNIFORM])
    def test_accumulated_limit(self, prior):
        # numerically accumulate the per-step products and compare to 1 v^T
        k = build_kernel(NoiseSchedule.cosine(500), 5, prior)
        acc = np.eye(5)
        for t in range(1, 501):
            acc = acc @ k.Q[t]
        limit = np.ones((5, 1)) @ k.limit[None, :]
        assert np.max(np.abs(acc - limit)) < 1e-3

    def test_chapman_kolmogorov_and_closure(self):
        k = build_kernel(NoiseSchedule.cosine(200), 6, Prior.ABSORBING)
        acc = np.eye(6)
        for t in range(1, 201):
            step = k.Qbar[t - 1] @ k.Q[t]
            assert np.max(np.abs(step - k.Qbar[t])) < 1e-12
            acc = acc @ k.Q[t]
            assert np.max(np.abs(acc - k.Qbar[t])) < 1e-10

    def test_closure_of_convex_form(self):
        # the product of two mixture matrices is the mixture with multiplied weight
        rng = np.random.default_rng(0)
        v = rng.random(6)
        v /= v.sum()
        ones_v = np.ones((6, 1)) @ v[None, :]
        for _ in range(20):
            a, b = rng.random(2)
            qa = a * np.eye(6) + (1 - a) * ones_v
            qb = b * np.eye(6) + (1 - b) * ones_v
            qc = a * b * np.eye(6) + (1 - a * b) * ones_v
            assert np.max(np.abs(qa @ qb - qc)) < 1e-14

    def test_dim_validation(self):
        with pytest.raises(DiffusionError):
            build_kernel(NoiseSchedule.cosine(10), 1, Prior.ABSORBING)


def _kernels(T=20, width=VOCAB.width):
    sched = NoiseSchedule.cosine(T)
    return (build_kernel(sched, width, Prior.ABSORBING),
            build_kernel(sched, BOND_WIDTH, Prior.ABSORBING))


class TestForwardSample:
    def test_identity_at_t0(self):
        kx, ke = _kernels()
        g = MolGraph.build(VOCAB, ["C", "O"], [(0, 1, 1)])
        out = forward_sample(g, 0, kx, ke, seed=1)
        assert np.array_equal(out.node_cat, g.node_cat)
        assert np.array_equal(out.edge_cat, g.edge_cat)

    def test_terminal_step_all_dummy(self):
        kx, ke = _kernels()
        g = MolGraph.build(VOCAB, ["C", "O", "N"], [(0, 1, 1), (1, 2, 2)])
        out = forward_sample(g, 20, kx, ke, seed=1)
        assert np.all(out.node_cat == 0)
        assert np.all(out.edge_cat == 0)

    def test_frozen_positions_copied(self):
        kx, ke = _kernels()
        g = MolGraph.build(VOCAB, ["C", "O", "N"], [(0, 1, 1), (1, 2, 2)])
        free_nodes = np.array([False, True, True])
        free_edges = np.zeros((3, 3), dtype=bool)
        free_edges[1, 2] = free_edges[2, 1] = True
        out = forward_sample(g, 20, kx, ke, 3, free_nodes, free_edges)
        assert out.node_cat[0] == g.node_cat[0]
        assert out.edge_cat[0, 1] == g.edge_cat[0, 1]
        assert out.edge_cat[1, 2] == 0

    def test_seed_determinism(self):
        kx, ke = _kernels()
        g = MolGraph.build(VOCAB, ["C", "O", "N", "C"], [(0, 1, 1), (1, 2, 2)])
        a = forward_sample(g, 7, kx, ke, seed=42)
        b = forward_sample(g, 7, kx, ke, seed=42)
        assert np.array_equal(a.node_cat, b.node_cat)
        assert np.array_equal(a.edge_cat, b.edge_cat)

    def test_symmetry_of_sampled_edges(self):
        kx, ke = _kernels()
        g = MolGraph.build(VOCAB, ["C"] * 6,
                           [(i, i + 1, 1) for i in range(5)])
        out = forward_sample(g, 9, kx, ke, seed=5)
        assert np.array_equal(out.edge_cat, out.edge_cat.T)

    def test_marginal_frequencies_match_row(self):
        # 1e5 draws of one 3-category node at alpha_bar ~ 0.6
        sched = NoiseSchedule.from_alpha_bar([1.0, 0.6])
        k3 = build_kernel(sched, 3, Prior.ABSORBING)
        vocab3 = AtomVocab(("*", "C", "O"))
        g = MolGraph.build(vocab3, ["O"])
        ke = build_kernel(sched, BOND_WIDTH, Prior.ABSORBING)
        rng = np.random.default_rng(123)
        counts = np.zeros(3)
        n_draws = 100000
        for _ in range(n_draws):
            out = forward_sample(g, 1, k3, ke, rng)
            counts[out.node_cat[0]] += 1
        expected = k3.Qbar[1][g.node_cat[0]]
        for c in range(3):
            p = expected[c]
            sigma = math.sqrt(n_draws * p * (1 - p))
            assert abs(counts[c] - n_draws * p) <= 4 * sigma + 1e-9

    def test_dimension_mismatch(self):
        kx, ke = _kernels(width=3)
        g = MolGraph.build(VOCAB, ["C"])
        with pytest.raises(DiffusionError):
            forward_sample(g, 1, kx, ke, 0)


class TestPosterior:
    def test_delta_at_t1(self):
        kx, _ = _kernels()
        for x0 in range(kx.dim):
            post = posterior(x0, x0, kx, 1)
            assert post[x0] == pytest.approx(1.0, abs=1e-12)

    def test_matches_enumeration_oracle(self):
        # 1000 random (dim, xt, x0, t) cases across both priors
        rng = np.random.default_rng(7)
        checked = 0
        for prior in (Prior.ABSORBING, Prior.UNIFORM):
            for dim in range(2, 11):
                sched = NoiseSchedule.cosine(40)
                k = build_kernel(sched, dim, prior)
                for _ in range(56):
                    t = int(rng.integers(1, 41))
                    xt = int(rng.integers(dim))
                    x0 = int(rng.integers(dim))
                    expected = posterior_brute(xt, x0, k.Q[t], k.Qbar[t - 1])
                    if expected is None:
                        with pytest.raises(ImpossiblePairError):
                            posterior(xt, x0, k, t)
                    else:
                        got = posterior(xt, x0, k, t)
                        assert np.max(np.abs(got - expected)) < 1e-12
                    checked += 1
        assert checked >= 1000

    def test_absorbing_dummy_pair_prefers_dummy(self):
        k = build_kernel(NoiseSchedule.cosine(40), 5, Prior.ABSORBING)
        for t in range(2, 41):
            post = posterior(0, 0, k, t)
            assert post[0] >= post.max() - 1e-15

    def test_impossible_pair_raises(self):
        k = build_kernel(NoiseSchedule.cosine(40), 4, Prior.ABSORBING)
        # an absorbing chain can never move category 1 to category 2
        with pytest.raises(ImpossiblePairError):
            posterior(2, 1, k, 5)


class TestReverseStep:
    def test_mixture_matches_brute_force(self):
        rng = np.random.default_rng(9)
        for prior in (Prior.ABSORBING, Prior.UNIFORM):
            for dim in range(2, 11):
                k = build_kernel(NoiseSchedule.cosine(30), dim, prior)
                for _ in range(20):
                    t = int(rng.integers(1, 31))
                    xt = int(rng.integers(dim))
                    pred = rng.random(dim)
                    pred /= pred.sum()
                    expected = mixture_brute(xt, pred, k.Q[t], k.Qbar[t - 1])
                    if expected is None:
                        continue
                    got = posterior_mixture(xt, pred, k, t)
                    assert np.max(np.abs(got - expected)) < 1e-12

    def test_delta_prediction_at_t1_recovers_truth(self):
        kx, ke = _kernels(T=10)
        g0 = MolGraph.build(VOCAB, ["C", "O", "N"], [(0, 1, 1), (1, 2, 2)])
        gt = forward_sample(g0, 1, kx, ke, seed=0)
        node_pred = g0.node_onehot()
        edge_pred = g0.edge_onehot()
        out = reverse_step(gt, node_pred, edge_pred, kx, ke, 1, seed=1)
        assert np.array_equal(out.node_cat, g0.node_cat)
        assert np.array_equal(out.edge_cat, g0.edge_cat)

    def test_uniform_pred_large_t_absorbing_prefers_dummy(self):
        sched = NoiseSchedule.cosine(100)
        k3 = build_kernel(sched, 3, Prior.ABSORBING)
        pred = np.full(3, 1.0 / 3.0)
        mix = posterior_mixture(0, pred, k3, 95)
        assert mix[0] > mix[1] and mix[0] > mix[2]
        # independent evaluation for dim=3
        expected = mixture_brute(0, pred, k3.Q[95], k3.Qbar[94])
        assert np.max(np.abs(mix - expected)) < 1e-12

    def test_invalid_prediction_row_rejected(self):
        kx, ke = _kernels(T=5)
        g = MolGraph.build(VOCAB, ["C"])
        bad = np.full((1, VOCAB.width), 0.5)
        with pytest.raises(DiffusionError):
            reverse_step(g, bad, g.edge_onehot(), kx, ke, 1, seed=0)

    def test_seed_determinism(self):
        kx, ke = _kernels(T=10)
        g0 = MolGraph.build(VOCAB, ["C", "O", "N", "S"], [(0, 1, 1)])
        gt = forward_sample(g0, 6, kx, ke, seed=2)
        node_pred = np.full((4, VOCAB.width), 1.0 / VOCAB.width)
        edge_pred = np.full((4, 4, BOND_WIDTH), 1.0 / BOND_WIDTH)
        a = reverse_step(gt, node_pred, edge_pred, kx, ke, 6, seed=9)
        b = reverse_step(gt, node_pred, edge_pred, kx, ke, 6, seed=9)
        assert np.array_equal(a.node_cat, b.node_cat)
        assert np.array_equal(a.edge_cat, b.edge_cat)


class TestLimitInit:
    def test_absorbing_limit_is_deterministic_dummy(self):
        kx, ke = _kernels(T=5)
        g = MolGraph.build(VOCAB, ["C", "O"], [(0, 1, 1)])
        free_nodes = np.ones(2, dtype=bool)
        free_edges = ~np.eye(2, dtype=bool)
        out = sample_from_limit(g, kx, ke, 0, free_nodes, free_edges)
        assert np.all(out.node_cat == 0)
        assert np.all(out.edge_cat == 0)
