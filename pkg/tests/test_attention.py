"""Attention primitives: hand oracles, permutation properties, gradients."""

import numpy as np
import pytest

from fusedet import attention as A
from fusedet import tensor as T
from fusedet.attention import (AttentionParams, CafParams, DenseAttentionParams,
                               TokenSequence, attention_recorder, caf,
                               dense_attention, multi_head_attention, pma,
                               self_attention, sincos_positional_encoding_2d)
from fusedet.tensor import ShapeError, Tensor, grad_check


def identity_params(d, heads=1):
    p = AttentionParams.create(d, heads, np.random.default_rng(0))
    for w in (p.wq, p.wk, p.wv, p.wo):
        w.data = np.eye(d, dtype=w.data.dtype)
    for b in (p.bq, p.bk, p.bv, p.bo):
        b.data = np.zeros(d, dtype=b.data.dtype)
    return p


def seq(rng, h, w, d, level=4):
    tokens = Tensor(rng.standard_normal((h * w, d)))
    pos = sincos_positional_encoding_2d(h, w, d)
    return TokenSequence(tokens, pos, [(level, h, w)])


class TestPositionalEncoding:
    def test_origin_is_sin0_cos1(self):
        pe = sincos_positional_encoding_2d(3, 3, 8).data
        row0 = pe[0]
        np.testing.assert_allclose(row0[0::2], 0.0, atol=1e-7)  # sines
        np.testing.assert_allclose(row0[1::2], 1.0, atol=1e-7)  # cosines

    def test_range(self):
        pe = sincos_positional_encoding_2d(16, 16, 32).data
        assert pe.min() >= -1.0 and pe.max() <= 1.0

    def test_all_positions_distinct_8x8(self):
        pe = sincos_positional_encoding_2d(8, 8, 16).data
        # exhaustive pairwise comparison
        diffs = np.abs(pe[:, None, :] - pe[None, :, :]).max(axis=-1)
        off_diag = diffs + np.eye(64)
        assert off_diag.min() > 1e-4

    def test_rejects_bad_width(self):
        with pytest.raises(ValueError):
            sincos_positional_encoding_2d(2, 2, 6)

    def test_row_column_split(self):
        # first half varies with row only, second half with column only
        pe = sincos_positional_encoding_2d(4, 5, 16).data.reshape(4, 5, 16)
        np.testing.assert_allclose(pe[:, 0, :8], pe[:, 3, :8], atol=1e-7)
        np.testing.assert_allclose(pe[0, :, 8:], pe[2, :, 8:], atol=1e-7)


class TestMultiHeadAttention:
    def test_single_key_returns_value_row(self, rng):
        d = 4
        q = Tensor(rng.standard_normal((5, d)))
        k = Tensor(rng.standard_normal((1, d)))
        v = Tensor(rng.standard_normal((1, d)))
        out = multi_head_attention(q, k, v, identity_params(d, heads=2))
        np.testing.assert_allclose(out.data, np.repeat(v.data, 5, axis=0),
                                   rtol=1e-5, atol=1e-6)

    def test_identical_keys_average_values(self, rng):
        d = 4
        q = Tensor(rng.standard_normal((3, d)))
        k = Tensor(np.tile(rng.standard_normal((1, d)), (6, 1)))
        v = Tensor(rng.standard_normal((6, d)))
        out = multi_head_attention(q, k, v, identity_params(d, heads=2))
        want = np.tile(v.data.mean(axis=0, keepdims=True), (3, 1))
        np.testing.assert_allclose(out.data, want, rtol=1e-5, atol=1e-6)

    def test_joint_kv_permutation_invariant(self, rng):
        d = 8
        p = AttentionParams.create(d, 4, rng)
        q = Tensor(rng.standard_normal((5, d)))
        k = Tensor(rng.standard_normal((7, d)))
        v = Tensor(rng.standard_normal((7, d)))
        base = multi_head_attention(q, k, v, p).data
        for seed in range(5):
            perm = np.random.default_rng(seed).permutation(7)
            out = multi_head_attention(q, Tensor(k.data[perm]),
                                       Tensor(v.data[perm]), p).data
            np.testing.assert_allclose(out, base, atol=1e-6)

    def test_kv_count_mismatch(self, rng):
        d = 4
        p = identity_params(d)
        with pytest.raises(ShapeError):
            multi_head_attention(Tensor(rng.standard_normal((2, d))),
                                 Tensor(rng.standard_normal((3, d))),
                                 Tensor(rng.standard_normal((4, d))), p)

    def test_weights_row_stochastic(self, rng):
        d = 8
        p = AttentionParams.create(d, 4, rng)
        q = Tensor(rng.standard_normal((5, d)))
        k = Tensor(rng.standard_normal((9, d)))
        with attention_recorder() as weights:
            multi_head_attention(q, k, k, p)
        assert len(weights) == 1
        w = weights[0]
        assert w.shape == (4, 5, 9)
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)

    def test_batched_matches_loop(self, rng):
        d = 8
        p = AttentionParams.create(d, 2, rng)
        qb = Tensor(rng.standard_normal((3, 4, d)))
        kb = Tensor(rng.standard_normal((3, 6, d)))
        out = multi_head_attention(qb, kb, kb, p).data
        for i in range(3):
            one = multi_head_attention(Tensor(qb.data[i]), Tensor(kb.data[i]),
                                       Tensor(kb.data[i]), p).data
            np.testing.assert_allclose(out[i], one, rtol=1e-4, atol=1e-5)


class TestPma:
    def test_zero_pos_equals_mha(self, rng):
        d = 8
        p = AttentionParams.create(d, 2, rng)
        q = Tensor(rng.standard_normal((4, d)))
        k = Tensor(rng.standard_normal((6, d)))
        zq, zk = T.zeros((4, d)), T.zeros((6, d))
        np.testing.assert_array_equal(
            pma(q, k, k, zq, zk, p).data,
            multi_head_attention(q, k, k, p).data)

    def test_joint_permutation_with_pos(self, rng):
        d = 8
        p = AttentionParams.create(d, 2, rng)
        q = Tensor(rng.standard_normal((4, d)))
        k = Tensor(rng.standard_normal((6, d)))
        v = Tensor(rng.standard_normal((6, d)))
        pq = Tensor(rng.standard_normal((4, d)))
        pk = Tensor(rng.standard_normal((6, d)))
        base = pma(q, k, v, pq, pk, p).data
        for seed in range(5):
            perm = np.random.default_rng(100 + seed).permutation(6)
            out = pma(q, Tensor(k.data[perm]), Tensor(v.data[perm]),
                      pq, Tensor(pk.data[perm]), p).data
            np.testing.assert_allclose(out, base, atol=1e-6)

    @pytest.mark.parametrize("n_k", [1, 3, 17])
    def test_output_shape(self, rng, n_k):
        d = 8
        p = AttentionParams.create(d, 2, rng)
        q = Tensor(rng.standard_normal((5, d)))
        k = Tensor(rng.standard_normal((n_k, d)))
        out = pma(q, k, k, T.zeros((5, d)), T.zeros((n_k, d)), p)
        assert out.data.shape == (5, d)

    def test_pos_never_reaches_values(self, rng):
        # huge positional encodings shift attention weights but the mixed
        # content stays a convex combination of projected value rows
        d = 4
        p = identity_params(d)
        q = Tensor(rng.standard_normal((2, d)))
        k = Tensor(rng.standard_normal((3, d)))
        v = Tensor(rng.standard_normal((3, d)))
        big = Tensor(1e3 * np.ones((3, d)))
        out = pma(q, k, v, T.zeros((2, d)), big, p).data
        assert np.abs(out).max() <= np.abs(v.data).max() + 1e-3


class TestDenseAttention:
    def test_zero_value_path_gives_ln(self, rng):
        d = 8
        p = DenseAttentionParams.create(d, 2, rng)
        p.mha.wv.data[:] = 0
        p.mha.bv.data[:] = 0
        p.mha.wo.data[:] = 0
        p.mha.bo.data[:] = 0
        fq, fk = seq(rng, 2, 3, d), seq(rng, 2, 2, d)
        out = dense_attention(fq, fk, p)
        want = T.layer_norm(fq.tokens, p.ln_gain, p.ln_bias).data
        np.testing.assert_allclose(out.tokens.data, want, rtol=1e-5, atol=1e-6)

    @pytest.mark.parametrize("fk_hw", [(1, 1), (2, 3), (4, 4)])
    def test_output_follows_fq(self, rng, fk_hw):
        d = 8
        p = DenseAttentionParams.create(d, 2, rng)
        fq = seq(rng, 3, 3, d)
        fk = seq(rng, *fk_hw, d)
        out = dense_attention(fq, fk, p)
        assert out.tokens.data.shape == (9, d)
        assert out.origin == fq.origin
        np.testing.assert_array_equal(out.pos.data, fq.pos.data)

    def test_sensitive_to_key_positions(self, rng):
        d = 8
        p = DenseAttentionParams.create(d, 2, rng)
        fq, fk = seq(rng, 2, 2, d), seq(rng, 2, 3, d)
        base = dense_attention(fq, fk, p).tokens.data
        perm = np.array([3, 0, 5, 1, 4, 2])
        fk_shuffled_pos = TokenSequence(fk.tokens, Tensor(fk.pos.data[perm]),
                                        fk.origin)
        out = dense_attention(fq, fk_shuffled_pos, p).tokens.data
        assert np.abs(out - base).max() > 1e-4

    def test_channel_mismatch(self, rng):
        p = DenseAttentionParams.create(8, 2, rng)
        with pytest.raises(ShapeError):
            dense_attention(seq(rng, 2, 2, 8), seq(rng, 2, 2, 4), p)


class TestSelfAttention:
    def test_equals_dense_attention_on_self(self, rng):
        d = 8
        p = DenseAttentionParams.create(d, 2, rng)
        f = seq(rng, 3, 4, d)
        np.testing.assert_array_equal(
            self_attention(f, p).tokens.data,
            dense_attention(f, f, p).tokens.data)

    def test_single_token_zero_value_path(self, rng):
        d = 8
        p = DenseAttentionParams.create(d, 2, rng)
        for w in (p.mha.wv, p.mha.bv, p.mha.wo, p.mha.bo):
            w.data[:] = 0
        f = seq(rng, 1, 1, d)
        out = self_attention(f, p)
        want = T.layer_norm(f.tokens, p.ln_gain, p.ln_bias).data
        np.testing.assert_allclose(out.tokens.data, want, rtol=1e-5, atol=1e-6)

    def test_shape_preserving(self, rng):
        d = 16
        p = DenseAttentionParams.create(d, 4, rng)
        f = seq(rng, 3, 4, d)
        out = self_attention(f, p)
        assert out.tokens.data.shape == (12, d)


class TestCaf:
    def test_zero_ffn_reduces_to_ln_of_da(self, rng):
        d = 8
        p = CafParams.create(d, 2, 16, rng)
        p.ffn_w2.data[:] = 0
        p.ffn_b2.data[:] = 0
        fq, fk = seq(rng, 2, 2, d), seq(rng, 2, 3, d)
        crossed = dense_attention(fq, fk, p.da)
        want = T.layer_norm(crossed.tokens, p.ln_gain, p.ln_bias).data
        out = caf(fq, fk, p)
        np.testing.assert_allclose(out.tokens.data, want, rtol=1e-5, atol=1e-6)

    def test_output_token_count_follows_query(self, rng):
        d = 8
        p = CafParams.create(d, 2, 16, rng)
        out = caf(seq(rng, 3, 3, d), seq(rng, 5, 5, d), p)
        assert out.tokens.data.shape == (9, d)


class TestGradients:
    def test_caf_gradients(self, fp64, rng):
        d = 8
        p = CafParams.create(d, 2, 16, rng)
        fq, fk = seq(rng, 2, 2, d), seq(rng, 2, 2, d)

        def fn(tq, tk, wq, w1, g2):
            p.da.mha.wq = wq
            p.ffn_w1 = w1
            p.ln_gain = g2
            a = TokenSequence(tq, fq.pos, fq.origin)
            b = TokenSequence(tk, fk.pos, fk.origin)
            return caf(a, b, p).tokens

        err = grad_check(fn, [fq.tokens, fk.tokens, p.da.mha.wq, p.ffn_w1,
                              p.ln_gain])
        assert err < 1e-4, f"caf rel err {err:.3e}"

    def test_mha_gradients(self, fp64, rng):
        d = 8
        p = AttentionParams.create(d, 2, rng)
        q = Tensor(rng.standard_normal((3, d)))
        k = Tensor(rng.standard_normal((4, d)))

        def fn(tq, tk, wq, wo):
            p.wq = wq
            p.wo = wo
            return multi_head_attention(tq, tk, tk, p)

        err = grad_check(fn, [q, k, p.wq, p.wo])
        assert err < 1e-4, f"mha rel err {err:.3e}"

    def test_self_attention_gradients(self, fp64, rng):
        d = 8
        p = DenseAttentionParams.create(d, 2, rng)
        f = seq(rng, 2, 2, d)

        def fn(t, wk, gain):
            p.mha.wk = wk
            p.ln_gain = gain
            return self_attention(TokenSequence(t, f.pos, f.origin), p).tokens

        err = grad_check(fn, [f.tokens, p.mha.wk, p.ln_gain])
        assert err < 1e-4, f"sa rel err {err:.3e}"


class TestTokenSequence:
    def test_pos_shape_must_match(self, rng):
        with pytest.raises(ShapeError):
            TokenSequence(Tensor(rng.standard_normal((4, 8))),
                          Tensor(rng.standard_normal((4, 4))), [(4, 2, 2)])

    def test_origin_must_cover_tokens(self, rng):
        with pytest.raises(ShapeError):
            TokenSequence(Tensor(rng.standard_normal((4, 8))),
                          Tensor(rng.standard_normal((4, 8))), [(4, 1, 3)])
