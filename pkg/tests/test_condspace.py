"""Set/sequence triplet encoders and anchor-based condition distributions."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from condsim.backend import kernels as K
from condsim.condspace import (
    AnchorBank,
    SetEncoder,
    condition_weights,
    encode,
    pair_set,
    pair_stack_batch,
)
from condsim.errors import ConfigError
from condsim.numcore import ParamStore, grad_check


def _random_encoder(rng, d, variant="set2"):
    return SetEncoder(
        rng.standard_normal((2 * d, 2 * d)) / math.sqrt(2 * d),
        rng.standard_normal(2 * d) / 10.0,
        rng.standard_normal((d, 2 * d)) / math.sqrt(2 * d),
        rng.standard_normal(d) / 10.0,
        variant=variant,
    )


class TestPairSet:
    def test_sizes(self):
        e = np.ones(3)
        assert len(pair_set(e, e, e, "set2")) == 2
        assert len(pair_set(e, e, e, "seq3")) == 3

    def test_set2_is_order_blind_as_a_multiset(self):
        rng = np.random.default_rng(0)
        ex, ey, ez = rng.standard_normal((3, 4))
        fwd = pair_set(ex, ey, ez, "set2")
        rev = pair_set(ex, ez, ey, "set2")
        fwd_set = {tuple(p) for p in fwd}
        rev_set = {tuple(p) for p in rev}
        assert fwd_set == rev_set

    def test_seq3_differs_under_reversal(self):
        rng = np.random.default_rng(1)
        ex, ey, ez = rng.standard_normal((3, 4))
        fwd = {tuple(p) for p in pair_set(ex, ey, ez, "seq3")}
        rev = {tuple(p) for p in pair_set(ex, ez, ey, "seq3")}
        assert fwd != rev

    def test_unknown_variant(self):
        e = np.ones(2)
        with pytest.raises(ConfigError):
            pair_set(e, e, e, "transformer")


class TestEncode:
    def test_single_pair_skips_the_max(self):
        rng = np.random.default_rng(2)
        enc = _random_encoder(rng, 3)
        p = rng.standard_normal(6)
        direct = K.affine_fwd(
            K.relu_fwd(K.affine_fwd(p[None], enc.w1, enc.b1)), enc.w2, enc.b2
        )[0]
        assert_allclose(encode(enc, [p]), direct)

    def test_duplicated_pair_is_idempotent(self):
        rng = np.random.default_rng(3)
        enc = _random_encoder(rng, 3)
        p = rng.standard_normal(6)
        assert_allclose(encode(enc, [p, p, p]), encode(enc, [p]))

    def test_set2_reversal_is_bit_identical(self):
        rng = np.random.default_rng(4)
        enc = _random_encoder(rng, 4)
        for _ in range(50):
            ex, ey, ez = rng.standard_normal((3, 4))
            g1 = encode(enc, pair_set(ex, ey, ez, "set2"))
            g2 = encode(enc, pair_set(ex, ez, ey, "set2"))
            assert g1.tobytes() == g2.tobytes()

    def test_empty_pair_list_rejected(self):
        rng = np.random.default_rng(5)
        enc = _random_encoder(rng, 3)
        with pytest.raises(ConfigError):
            encode(enc, [])


class TestConditionWeights:
    def test_single_anchor(self):
        bank = AnchorBank(np.array([[1.0, 0.0]]), 1.0)
        assert_allclose(condition_weights(np.array([3.0, 1.0]), bank), [1.0])

    def test_equidistant_gives_uniform(self):
        # anchors that form equal cosines with g
        g = np.array([1.0, 0.0, 0.0])
        anchors = np.array(
            [[1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 0.0, 1.0], [1.0, 0.0, -1.0]]
        )
        w = condition_weights(g, AnchorBank(anchors, 1.0))
        assert_allclose(w, np.full(4, 0.25), atol=1e-14)

    def test_two_anchor_closed_form(self):
        g = np.array([1.0, 0.0])
        anchors = np.array([[1.0, 0.0], [-1.0, 0.0]])  # cosines +1 and -1
        w = condition_weights(g, AnchorBank(anchors, 1.0))
        e = math.exp(1.0)
        expected = np.array([e, 1.0 / e]) / (e + 1.0 / e)
        assert_allclose(w, expected, rtol=1e-9)  # eps norm guard shifts ~1e-12

    def test_simplex_invariants(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            d = int(rng.integers(2, 6))
            k = int(rng.integers(1, 7))
            bank = AnchorBank(rng.standard_normal((k, d)), float(rng.uniform(0.2, 3.0)))
            w = condition_weights(rng.standard_normal(d), bank)
            assert abs(w.sum() - 1.0) < 1e-12
            assert np.all(w > 0.0) and np.all(w <= 1.0)

    def test_dimension_mismatch(self):
        bank = AnchorBank(np.ones((2, 3)), 1.0)
        with pytest.raises(ConfigError):
            condition_weights(np.ones(4), bank)


class TestEncoderGradients:
    @pytest.mark.parametrize("variant", ["set2", "seq3"])
    def test_full_condition_space_gradient(self, variant):
        rng = np.random.default_rng(7)
        d = 4
        params = ParamStore(0)
        w1 = params.add("w1", rng.standard_normal((2 * d, 2 * d)) / 3.0)
        b1 = params.add("b1", rng.standard_normal(2 * d) / 10.0)
        w2 = params.add("w2", rng.standard_normal((d, 2 * d)) / 3.0)
        b2 = params.add("b2", rng.standard_normal(d) / 10.0)
        anchors = params.add("a", rng.standard_normal((3, d)))
        ex, ey, ez = rng.standard_normal((3, 2, d))  # batch of 2
        v = rng.standard_normal((2, 3))
        temp = 0.9

        def loss():
            pairs = pair_stack_batch(ex, ey, ez, variant)
            pre = [K.affine_fwd(pairs[p], w1, b1) for p in range(pairs.shape[0])]
            hidden = np.stack([K.relu_fwd(h) for h in pre])
            pooled, arg = K.maxpool_fwd(hidden)
            g = K.affine_fwd(pooled, w2, b2)
            sims = K.cosine_fwd(g, anchors)
            w = K.softmax_fwd(sims, temp)

            gsims = K.softmax_bwd(v, w, temp)
            gg, ga = K.cosine_bwd(gsims, g, anchors)
            params.grad("a")[...] = ga
            gpooled, gw2, gb2 = K.affine_bwd(gg, pooled, w2)
            params.grad("w2")[...] = gw2
            params.grad("b2")[...] = gb2
            ghidden = K.maxpool_bwd(gpooled, arg, pairs.shape[0])
            gw1 = np.zeros_like(w1)
            gb1 = np.zeros_like(b1)
            for p in range(pairs.shape[0]):
                gpre = K.relu_bwd(ghidden[p], pre[p])
                _, gw1p, gb1p = K.affine_bwd(gpre, pairs[p], w1)
                gw1 += gw1p
                gb1 += gb1p
            params.grad("w1")[...] = gw1
            params.grad("b1")[...] = gb1
            return float((w * v).sum())

        assert grad_check(loss, params, eps=1e-5) < 1e-4


class TestOrderSensitivity:
    def test_set2_weights_identical_seq3_weights_differ(self):
        hits = 0
        trials = 100
        for seed in range(trials):
            rng = np.random.default_rng(seed)
            d = 4
            bank = AnchorBank(rng.standard_normal((4, d)), 1.0)
            enc2 = _random_encoder(rng, d, "set2")
            enc3 = SetEncoder(enc2.w1, enc2.b1, enc2.w2, enc2.b2, "seq3")
            ex, ey, ez = rng.standard_normal((3, d))

            w_fwd2 = condition_weights(encode(enc2, pair_set(ex, ey, ez, "set2")), bank)
            w_rev2 = condition_weights(encode(enc2, pair_set(ex, ez, ey, "set2")), bank)
            assert w_fwd2.tobytes() == w_rev2.tobytes()

            w_fwd3 = condition_weights(encode(enc3, pair_set(ex, ey, ez, "seq3")), bank)
            w_rev3 = condition_weights(encode(enc3, pair_set(ex, ez, ey, "seq3")), bank)
            if 0.5 * np.abs(w_fwd3 - w_rev3).sum() > 1e-6:
                hits += 1
        assert hits >= 0.95 * trials
