import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from uatvr.autodiff import Tensor
from uatvr.gradcheck import GRADCHECK_TOL, make_problem, run_gradcheck
from uatvr.matching import token_wise_similarity
from uatvr.encoders import EmbeddingMatrix
from uatvr.objectives import (
    MAX_SCALE,
    BatchBundle,
    LossError,
    LossWeights,
    dsa_loss,
    dua_directions,
    dua_loss,
    dua_loss_lists,
    info_nce,
    kl_loss,
    logit_scale,
    symmetric_info_nce,
    total_loss,
)


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def bundle(b=4, n=3, m=5, d=6, k=3, seed=0):
    rng = np.random.default_rng(seed)
    wm, fm = np.ones((b, n), bool), np.ones((b, m), bool)
    wm[1 % b, -1] = False
    fm[2 % b, -2:] = False
    words, frames = unit(rng.normal(size=(b, n, d))), unit(rng.normal(size=(b, m, d)))
    words[~wm] = 0.0
    frames[~fm] = 0.0
    return BatchBundle(Tensor(words), wm, Tensor(frames), fm,
                       Tensor(unit(rng.normal(size=(b, d)))), Tensor(rng.normal(0, 0.5, (b, d))),
                       Tensor(unit(rng.normal(size=(b, d)))), Tensor(rng.normal(0, 0.5, (b, d))),
                       Tensor(rng.normal(size=(b, k, d))), Tensor(rng.normal(size=(b, k, d))))


def nce_oracle(sim, scale):
    """Straight-line symmetric InfoNCE with explicit softmax loops."""
    b = sim.shape[0]
    total = 0.0
    for i in range(b):
        row = [math.exp(scale * sim[i, j]) for j in range(b)]
        col = [math.exp(scale * sim[j, i]) for j in range(b)]
        total -= math.log(row[i] / sum(row)) + math.log(col[i] / sum(col))
    return total / b


def dua_oracle(ts, vs, scale):
    """Enumerate every anchor and candidate sample."""
    b, k, _ = ts.shape

    def direction(anchors, cands):
        per_item = []
        for i in range(b):
            terms = []
            for a in anchors[i]:
                pos = sum(math.exp(scale * a @ c) for c in cands[i])
                allc = sum(math.exp(scale * a @ c) for j in range(b) for c in cands[j])
                terms.append(-math.log(pos / allc))
            per_item.append(sum(terms) / k)
        return sum(per_item) / b

    return direction(ts, vs), direction(vs, ts)


class TestInfoNCE:
    def test_identity_b2(self):
        out = info_nce(Tensor(np.eye(2)), 1.0).data
        assert_allclose(out, -math.log(math.e / (math.e + 1)), rtol=1e-12)
        assert_allclose(out, 0.3133, atol=1e-4)

    @pytest.mark.parametrize("b", [1, 2, 5, 8])
    def test_all_equal_is_log_b(self, b):
        assert_allclose(info_nce(Tensor(np.full((b, b), 0.3)), 7.0).data, math.log(b), rtol=1e-14, atol=1e-15)

    def test_b1_is_zero(self):
        assert info_nce(Tensor(np.array([[0.4]])), 100.0).data == 0.0

    def test_decreases_with_scale(self):
        sim = Tensor(np.eye(3) * 0.5 + 0.1)
        losses = [float(info_nce(sim, s).data) for s in (1, 10, 100)]
        assert losses[0] > losses[1] > losses[2] >= 0.0

    def test_non_square(self):
        with pytest.raises(LossError):
            info_nce(Tensor(np.ones((2, 3))), 1.0)

    def test_symmetric_is_sum_of_directions(self):
        sim = Tensor(np.random.default_rng(0).uniform(-1, 1, (5, 5)))
        both = symmetric_info_nce(sim, 3.0).data
        assert both == info_nce(sim, 3.0, "t2v").data + info_nce(sim, 3.0, "v2t").data

    def test_matches_oracle(self):
        sim = np.random.default_rng(1).uniform(-1, 1, (6, 6))
        assert_allclose(symmetric_info_nce(Tensor(sim), 4.0).data, nce_oracle(sim, 4.0), rtol=1e-12)

    def test_argmax_invariant_to_scale(self):
        sim = np.random.default_rng(2).uniform(-1, 1, (6, 6))
        picks = [np.argmax(s * sim, axis=1) for s in (0.5, 1.0, 100.0)]
        assert all(np.array_equal(picks[0], p) for p in picks[1:])


class TestLogitScale:
    def test_clamped(self):
        assert logit_scale(Tensor(np.log(1000.0))).data == MAX_SCALE

    def test_below_clamp(self):
        assert_allclose(logit_scale(Tensor(np.log(5.0))).data, 5.0, rtol=1e-15)


class TestDsaLoss:
    def test_matches_oracle(self):
        bb = bundle()
        sim = np.array([[token_wise_similarity(EmbeddingMatrix(bb.words.data[i], bb.word_mask[i]),
                                               EmbeddingMatrix(bb.frames.data[j], bb.frame_mask[j]))
                         for j in range(4)] for i in range(4)])
        assert_allclose(dsa_loss(bb, 20.0).data, nce_oracle(sim, 20.0), rtol=1e-12)

    def test_b1_zero(self):
        assert dsa_loss(bundle(b=1), 100.0).data == 0.0


class TestDuaLoss:
    def test_all_equal_b8(self):
        s = np.tile(unit(np.ones(4)), (8, 3, 1))
        out = dua_loss_lists(list(s), list(s), 10.0)
        assert_allclose(out, 2 * math.log(8), rtol=1e-13)
        assert_allclose(out, 4.1589, atol=1e-4)

    def test_k1_is_info_nce(self):
        rng = np.random.default_rng(3)
        ts, vs = rng.normal(size=(5, 1, 4)), rng.normal(size=(5, 1, 4))
        t_dir, v_dir = dua_directions(Tensor(ts), Tensor(vs), 2.0)
        sim = Tensor(ts[:, 0] @ vs[:, 0].T)
        assert_allclose(t_dir.data, info_nce(sim, 2.0, "t2v").data, rtol=1e-12)
        assert_allclose(v_dir.data, info_nce(sim, 2.0, "v2t").data, rtol=1e-12)

    def test_brute_force_b2_k2(self):
        ts = np.array([[[1.0, 0.0], [0.8, 0.6]], [[0.0, 1.0], [-0.6, 0.8]]])
        vs = np.array([[[0.9, 0.1], [0.7, -0.2]], [[0.2, 1.1], [0.0, 0.5]]])
        t_dir, v_dir = dua_directions(Tensor(ts), Tensor(vs), 3.0)
        want_t, want_v = dua_oracle(ts, vs, 3.0)
        assert_allclose([t_dir.data, v_dir.data], [want_t, want_v], rtol=1e-12)

    def test_random_matches_oracle_and_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            ts, vs = rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 3, 5))
            t_dir, v_dir = dua_directions(Tensor(ts), Tensor(vs), 1.5)
            assert_allclose([t_dir.data, v_dir.data], dua_oracle(ts, vs, 1.5), rtol=1e-12)
            assert t_dir.data >= 0 and v_dir.data >= 0

    def test_k_mismatch(self):
        with pytest.raises(LossError):
            dua_loss_lists([np.ones((2, 3))], [np.ones((3, 3))], 1.0)

    def test_needs_samples(self):
        bb = bundle()
        bb.text_samples = None
        with pytest.raises(LossError):
            dua_loss(bb, 1.0)


class TestKlLoss:
    def test_unit_mu_unit_sigma(self):
        bb = bundle()
        d = bb.text_mu.shape[1]
        bb.text_log_var = bb.video_log_var = Tensor(np.zeros((4, d)))
        assert_allclose(kl_loss(bb).data, 1.0, rtol=1e-14)

    def test_monotone_in_log_var_above_zero(self):
        bb = bundle()
        bb.text_log_var = Tensor(np.abs(bb.text_log_var.data))
        bb.video_log_var = Tensor(np.abs(bb.video_log_var.data))
        before = kl_loss(bb).data
        bb.text_log_var = Tensor(bb.text_log_var.data + 0.3)
        bb.video_log_var = Tensor(bb.video_log_var.data + 0.3)
        assert kl_loss(bb).data > before

    def test_per_item_oracle(self):
        bb = bundle()

        def kl(mu, lv):
            return 0.5 * np.sum(mu ** 2 + np.exp(lv) - lv - 1)

        want = np.mean([kl(bb.text_mu.data[i], bb.text_log_var.data[i]) + kl(bb.video_mu.data[i], bb.video_log_var.data[i])
                        for i in range(4)])
        assert_allclose(kl_loss(bb).data, want, rtol=1e-12)


class TestTotalLoss:
    def test_defaults(self):
        w = LossWeights()
        assert (w.alpha, w.beta) == (1e-2, 1e-4)

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-1.0)

    def test_zero_weights_equal_dsa_exactly(self):
        bb = bundle()
        total, parts = total_loss(bb, LossWeights(0.0, 0.0), 30.0)
        assert total.data == dsa_loss(bb, 30.0).data
        assert parts["total"] == parts["dsa"]

    def test_linearity(self):
        bb = bundle()
        a, b = 0.37, 0.05
        full = total_loss(bb, LossWeights(a, b), 30.0)[0].data
        base = total_loss(bb, LossWeights(0.0, 0.0), 30.0)[0].data
        want = a * dua_loss(bb, 30.0).data + b * kl_loss(bb).data
        assert_allclose(full - base, want, rtol=1e-12)

    def test_breakdown(self):
        bb = bundle()
        _, parts = total_loss(bb, LossWeights(), 30.0)
        assert set(parts) == {"dsa", "dua", "kl", "total"}
        assert_allclose(parts["dua"], dua_loss(bb, 30.0).data, rtol=1e-15)

    def test_without_samples_reports_nan(self):
        bb = bundle()
        bb.text_samples = bb.video_samples = None
        _, parts = total_loss(bb, LossWeights(), 30.0)
        assert math.isnan(parts["dua"])


class TestTotalGradient:
    def test_subset_of_coordinates(self):
        res = run_gradcheck(trials=150, seed=1)
        assert res.max_rel_error <= GRADCHECK_TOL

    def test_problem_covers_every_group(self):
        prob = make_problem()
        groups = {name.split(".")[0] for name in prob.params}
        assert {"text", "video", "logit"} <= groups
