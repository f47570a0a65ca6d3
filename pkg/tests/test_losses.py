import itertools
import math

import numpy as np
import pytest

from minisvs import losses
from minisvs.autodiff import Tensor, gradient_check, log_softmax


class TestReconL1:
    def test_identical_zero(self):
        x = np.random.default_rng(0).uniform(size=(4, 6))
        assert losses.recon_l1(x, x) == 0.0

    def test_direct_value(self):
        assert losses.recon_l1(np.array([[1.0, 2.0]]), np.array([[2.0, 4.0]])) == 1.5

    def test_triangle_inequality(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b, c = (rng.standard_normal((3, 5)) for _ in range(3))
            ab = losses.recon_l1(a, b)
            bc = losses.recon_l1(b, c)
            ac = losses.recon_l1(a, c)
            assert ac <= ab + bc + 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            losses.recon_l1(np.zeros((2, 3)), np.zeros((3, 2)))


class TestLsgan:
    def test_perfect_discriminator(self):
        assert losses.lsgan_d(np.array([1.0]), np.array([0.0])) == 0.0

    def test_perfect_generator(self):
        assert losses.lsgan_g(np.array([1.0])) == 0.0

    def test_half_scores(self):
        assert losses.lsgan_d(np.array([0.5]), np.array([0.5])) == 0.5
        assert losses.lsgan_g(np.array([0.5])) == 0.25


class TestFeatureMatching:
    def test_identical_zero(self):
        feats = [np.ones((3, 4)), np.zeros((2, 2))]
        assert losses.feature_matching(feats, [f.copy() for f in feats]) == 0.0

    def test_single_layer_value(self):
        assert losses.feature_matching([np.array([1.0, 3.0])], [np.array([2.0, 5.0])]) == 1.5

    def test_additive_over_layers(self):
        a = [np.array([1.0, 3.0]), np.array([0.0])]
        b = [np.array([2.0, 5.0]), np.array([2.0])]
        one = losses.feature_matching(a[:1], b[:1])
        two = losses.feature_matching(a[1:], b[1:])
        assert losses.feature_matching(a, b) == one + two

    def test_layer_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            losses.feature_matching([np.zeros(2)], [np.zeros(2), np.zeros(2)])


def _brute_force_ctc(logp, labels):
    t_len, vocab = logp.shape
    total = -np.inf
    for path in itertools.product(range(vocab), repeat=t_len):
        out, prev = [], None
        for s in path:
            if s != prev and s != 0:
                out.append(s)
            prev = s
        if tuple(out) == tuple(labels):
            total = np.logaddexp(total, sum(logp[i, s] for i, s in enumerate(path)))
    return -total


class TestCtc:
    def test_two_frame_uniform_example(self):
        logp = np.log(np.full((2, 2), 0.5))
        loss = losses.ctc_loss(logp, losses.CtcTarget((1,), 1))
        assert abs(loss - (-math.log(0.75))) < 1e-12

    def test_certain_canonical_alignment_gives_zero(self):
        logp = np.full((3, 3), -1e9)
        logp[0, 1] = logp[1, 0] = logp[2, 2] = 0.0
        assert abs(losses.ctc_loss(logp, losses.CtcTarget((1, 2), 2))) < 1e-12

    def test_dp_matches_brute_force_enumeration(self):
        rng = np.random.default_rng(2)
        checked = 0
        while checked < 50:
            t_len = int(rng.integers(2, 6))
            a_len = int(rng.integers(1, 4))
            logits = rng.standard_normal((t_len, a_len + 1))
            logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
            labels = tuple(int(x) for x in rng.integers(1, a_len + 1, size=rng.integers(1, 4)))
            target = losses.CtcTarget(labels, a_len)
            try:
                dp = losses.ctc_loss(logp, target)
            except ValueError:
                continue  # infeasible target for this T
            assert abs(dp - _brute_force_ctc(logp, labels)) < 1e-10
            checked += 1

    def test_infeasible_target_rejected(self):
        logp = np.log(np.full((2, 3), 1.0 / 3))
        with pytest.raises(ValueError):
            losses.ctc_loss(logp, losses.CtcTarget((1, 1), 2))  # needs >= 3 frames

    def test_graph_value_matches_plain(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((7, 4)), requires_grad=True)
        target = losses.CtcTarget((1, 3, 2), 3)
        ls = log_softmax(x, axis=-1)
        a = float(losses.ctc_loss_graph(ls, target).data)
        b = losses.ctc_loss(ls.data, target)
        assert abs(a - b) < 1e-12

    def test_graph_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
        target = losses.CtcTarget((2, 2), 3)
        err = gradient_check(
            lambda: losses.ctc_loss_graph(log_softmax(x, axis=-1), target),
            [x],
            n_points=12,
            rng=np.random.default_rng(5),
        )
        assert err < 1e-4

    def test_label_validation(self):
        with pytest.raises(ValueError):
            losses.CtcTarget((0,), 3)
        with pytest.raises(ValueError):
            losses.CtcTarget((4,), 3)


class TestContrastive:
    def test_orthogonal_negatives_worked_example(self):
        n = 6
        h = np.eye(n, 16)  # every frame orthogonal to every other
        val = losses.contrastive_loss(
            h, h.copy(), tau_cont=1.0, n_negatives=2, rng=np.random.default_rng(6)
        )
        expect = 2 * n * (math.log(2.0) - 1.0)
        assert abs(val - expect) < 1e-12

    def test_swap_symmetry(self):
        rng = np.random.default_rng(7)
        h = rng.standard_normal((8, 5))
        ht = rng.standard_normal((8, 5))
        a = losses.contrastive_loss(h, ht, 0.3, 4, np.random.default_rng(8))
        b = losses.contrastive_loss(ht, h, 0.3, 4, np.random.default_rng(8))
        assert abs(a - b) < 1e-12

    def test_row_scale_invariance(self):
        rng = np.random.default_rng(9)
        h = rng.standard_normal((8, 5))
        ht = rng.standard_normal((8, 5))
        scales = rng.uniform(0.1, 5.0, size=(8, 1))
        a = losses.contrastive_loss(h, ht, 0.5, 3, np.random.default_rng(10))
        b = losses.contrastive_loss(h * scales, ht * 2.0, 0.5, 3, np.random.default_rng(10))
        assert abs(a - b) < 1e-9

    def test_zero_rows_rejected(self):
        h = np.zeros((4, 3))
        with pytest.raises(ValueError):
            losses.contrastive_loss(h, h, 0.5, 2, np.random.default_rng(0))

    def test_too_few_frames_rejected(self):
        with pytest.raises(ValueError):
            losses.contrastive_loss(np.ones((1, 3)), np.ones((1, 3)), 0.5, 2)

    def test_gradients_flow_to_both_streams(self):
        rng = np.random.default_rng(11)
        h = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
        ht = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
        err = gradient_check(
            lambda: losses.contrastive_loss(h, ht, 0.5, 3, np.random.default_rng(12)),
            [h, ht],
            n_points=8,
            rng=np.random.default_rng(13),
        )
        assert err < 1e-4


def test_losses_nonnegative_and_finite_on_valid_inputs():
    # every loss except the contrastive one is >= 0; all stay finite
    rng = np.random.default_rng(20)
    for _ in range(20):
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((5, 4))
        scores_r = rng.standard_normal(6)
        scores_f = rng.standard_normal(6)
        logits = rng.standard_normal((6, 4))
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        vals = [
            losses.recon_l1(a, b),
            losses.lsgan_d(scores_r, scores_f),
            losses.lsgan_g(scores_f),
            losses.feature_matching([a], [b]),
            losses.ctc_loss(logp, losses.CtcTarget((1, 2), 3)),
        ]
        assert all(np.isfinite(v) and v >= 0 for v in vals)
    # the contrastive loss may legitimately go negative
    h = np.eye(4, 8)
    assert losses.contrastive_loss(h, h.copy(), 1.0, 2, np.random.default_rng(0)) < 0


class TestTotals:
    def test_generator_total_worked_example(self):
        parts = dict(adv=1.0, recon=1.0, emb=1.0, fm=1.0, lyrics=1.0, note=1.0)
        total = losses.generator_total(parts, losses.LossWeights())
        assert abs(total - 50.02) < 1e-12

    def test_all_zero_parts(self):
        parts = dict(adv=0.0, recon=0.0, emb=0.0, fm=0.0, lyrics=0.0, note=0.0)
        assert losses.generator_total(parts, losses.LossWeights()) == 0.0

    def test_doubling_one_part_adds_its_weight(self):
        w = losses.LossWeights()
        base = dict(adv=1.0, recon=1.0, emb=1.0, fm=1.0, lyrics=1.0, note=1.0)
        for name in ("recon", "emb", "fm", "lyrics", "note"):
            bumped = dict(base)
            bumped[name] = 2.0
            delta = losses.generator_total(bumped, w) - losses.generator_total(base, w)
            assert abs(delta - getattr(w, name)) < 1e-12

    def test_latent_total_matches_weighted_sum(self):
        assert losses.latent_generator_total(1.0, 2.0, 0.5) == 2.0
        assert losses.latent_generator_total(1.0, 2.0, 0.5, [0.25, 0.5]) == 2.75

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            losses.LossWeights(recon=-1.0)
