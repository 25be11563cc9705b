import numpy as np
import pytest

from miavsr.attention import (AttentionInputs, BlockCache, IiabParams, iiab_attention, iiab_block,
                              make_qkv, relative_position_bias, relative_position_index)
from miavsr.masking import BlockMask
from miavsr.tensor import Tensor


def dense_attention(q, k, v, heads=1, bias=None):
    """Loop-per-query reference, no batching tricks."""
    nq, C = q.shape
    d = C // heads
    out = np.zeros((nq, C))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(nq):
            logits = np.array([q[i, sl] @ k[j, sl] / np.sqrt(d) for j in range(k.shape[0])])
            if bias is not None:
                logits = logits + bias[h, i]
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, sl] = w @ v[:, sl]
    return out


def inputs(rng, H, W, C, same=False):
    x = rng.normal(size=(H, W, C))
    if same:
        return AttentionInputs(Tensor(x), Tensor(x.copy()), Tensor(x.copy()))
    return AttentionInputs(Tensor(x), Tensor(rng.normal(size=(H, W, C))),
                           Tensor(rng.normal(size=(H, W, C))))


@pytest.fixture
def params():
    return IiabParams.init(8, 2, 4, seed=3, dtype=np.float64)


class TestParams:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            IiabParams.init(6, 4, 2)

    def test_ffn_ratio(self):
        p = IiabParams.init(8, 2, 4, ratio=2)
        assert p.ffn_in.shape == (8, 16) and p.ffn_out.shape == (16, 8)


class TestMakeQkv:
    def test_sizes_all_ones(self, rng, params):
        h = Tensor(rng.normal(size=(16, 8)))
        hp = Tensor(rng.normal(size=(32, 8)))
        qkv = make_qkv(h, hp, params, 4, 4, 4, query_mask=BlockMask.ones(4, 4))
        assert qkv.q.shape == (16, 8)
        assert qkv.k.shape == (1, 48, 8) and qkv.v.shape == (1, 48, 8)

    def test_empty_window_emits_no_queries(self, rng, params):
        h, hp = Tensor(rng.normal(size=(64, 8))), Tensor(rng.normal(size=(128, 8)))
        m = np.ones((8, 8), dtype=np.uint8)
        m[:4, :4] = 0
        qkv = make_qkv(h, hp, params, 8, 8, 4, query_mask=BlockMask(m))
        assert qkv.q.shape[0] == 48
        assert 0 not in set(qkv.query_window.tolist())
        assert qkv.k.shape == (4, 48, 8)

    def test_identical_frames_give_triplicate_keys(self, rng, params):
        x = rng.normal(size=(16, 8))
        qkv = make_qkv(Tensor(x), Tensor(np.concatenate([x, x])), params, 4, 4, 4)
        k = qkv.k.data[0]
        np.testing.assert_array_equal(k[:16], k[16:32])
        np.testing.assert_array_equal(k[:16], k[32:])

    def test_mask_shape_mismatch(self, rng, params):
        with pytest.raises(ValueError):
            make_qkv(Tensor(np.zeros((16, 8))), Tensor(np.zeros((32, 8))), params, 4, 4, 4,
                     query_mask=BlockMask.ones(2, 8))

    def test_token_count_mismatch(self, params):
        with pytest.raises(ValueError):
            make_qkv(Tensor(np.zeros((16, 8))), Tensor(np.zeros((16, 8))), params, 4, 4, 4)


class TestAttention:
    def test_one_key_returns_value(self, rng):
        v = rng.normal(size=(1, 4))
        out = iiab_attention(Tensor(rng.normal(size=(1, 4)) * 50), Tensor(rng.normal(size=(1, 4))),
                             Tensor(v))
        np.testing.assert_allclose(out.data, v, rtol=1e-15)

    def test_orthogonal_query_averages_values(self, rng):
        k = rng.normal(size=(6, 4))
        k[:, 0] = 0.0
        q = np.array([[1.0, 0, 0, 0]])
        v = rng.normal(size=(6, 4))
        out = iiab_attention(Tensor(q), Tensor(k), Tensor(v))
        np.testing.assert_allclose(out.data[0], v.mean(axis=0), atol=1e-15)

    def test_dense_oracle_single_head(self, rng):
        q, k, v = (rng.normal(size=(4, 6)) for _ in range(3))
        out = iiab_attention(Tensor(q), Tensor(k), Tensor(v))
        np.testing.assert_allclose(out.data, dense_attention(q, k, v), rtol=0, atol=1e-10)

    def test_dense_oracle_multi_head_with_bias(self, rng):
        q, k, v = rng.normal(size=(4, 8)), rng.normal(size=(12, 8)), rng.normal(size=(12, 8))
        b = rng.normal(size=(2, 4, 12))
        out = iiab_attention(Tensor(q), Tensor(k), Tensor(v), Tensor(b), heads=2)
        np.testing.assert_allclose(out.data, dense_attention(q, k, v, 2, b), rtol=0, atol=1e-10)

    def test_output_in_convex_hull(self, rng):
        q, k, v = rng.normal(size=(9, 4)) * 5, rng.normal(size=(9, 4)), rng.normal(size=(9, 4))
        out = iiab_attention(Tensor(q), Tensor(k), Tensor(v), heads=2).data
        assert (out >= v.min(axis=0) - 1e-12).all() and (out <= v.max(axis=0) + 1e-12).all()

    def test_batched_and_gather_paths_agree(self, rng):
        nW, nt, nk, C = 3, 4, 12, 8
        q = rng.normal(size=(nW * nt, C))
        k, v = rng.normal(size=(nW, nk, C)), rng.normal(size=(nW, nk, C))
        b = rng.normal(size=(2, nt, nk))
        qwin = np.repeat(np.arange(nW), nt)[::-1].copy()
        qtok = np.tile(np.arange(nt), nW)
        args = (Tensor(q), Tensor(k), Tensor(v), Tensor(b), 2, qwin, qtok)
        np.testing.assert_allclose(iiab_attention(*args).data,
                                   iiab_attention(*args, dense_ok=False).data, atol=1e-14)

    def test_window_permutation_invariance(self, rng):
        nW, nt, nk, C = 4, 4, 12, 4
        q = rng.normal(size=(nW * nt, C))
        k, v = rng.normal(size=(nW, nk, C)), rng.normal(size=(nW, nk, C))
        qwin = np.repeat(np.arange(nW), nt)
        base = iiab_attention(Tensor(q), Tensor(k), Tensor(v), query_window=qwin,
                              query_token=np.tile(np.arange(nt), nW)).data
        perm = rng.permutation(nW)
        inv = np.argsort(perm)
        out = iiab_attention(Tensor(q), Tensor(k[perm]), Tensor(v[perm]), query_window=inv[qwin],
                             query_token=np.tile(np.arange(nt), nW)).data
        np.testing.assert_allclose(out, base, atol=1e-15)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            iiab_attention(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))),
                           Tensor(np.zeros((2, 4))))
        with pytest.raises(ValueError):
            iiab_attention(Tensor(np.zeros((2, 6))), Tensor(np.zeros((3, 6))),
                           Tensor(np.zeros((3, 6))), heads=4)


class TestRelativeBias:
    def test_single_token_window(self, rng):
        table, off = rng.normal(size=(1, 2)), rng.normal(size=(3, 2))
        b = relative_position_bias(Tensor(table), Tensor(off), 1).data
        assert b.shape == (2, 1, 3)
        for h in range(2):
            np.testing.assert_array_equal(b[h, 0], table[0, h] + off[:, h])
            assert len(set(b[h, 0].tolist())) == 3

    def test_zero_table_is_unbiased(self, rng):
        b = relative_position_bias(Tensor(np.zeros((9, 1))), Tensor(np.zeros((3, 1))), 2)
        q, k, v = rng.normal(size=(4, 4)), rng.normal(size=(12, 4)), rng.normal(size=(12, 4))
        np.testing.assert_array_equal(iiab_attention(Tensor(q), Tensor(k), Tensor(v), b).data,
                                      iiab_attention(Tensor(q), Tensor(k), Tensor(v)).data)

    def test_equal_offsets_share_entry(self):
        side = 3
        idx = relative_position_index(side)
        coords = [(i // side, i % side) for i in range(side * side)]
        for a in range(side * side):
            for b in range(side * side):
                for c in range(side * side):
                    for d in range(side * side):
                        same = (np.subtract(coords[a], coords[b]) ==
                                np.subtract(coords[c], coords[d])).all()
                        assert (idx[a, b] == idx[c, d]) == same

    def test_table_size_checked(self):
        with pytest.raises(ValueError):
            relative_position_bias(Tensor(np.zeros((4, 1))), Tensor(np.zeros((3, 1))), 2)


class TestBlock:
    def test_all_ones_mask_is_unmasked(self, rng, params):
        inp = inputs(rng, 8, 8, 8)
        cache = BlockCache(rng.normal(size=(64, 8)), rng.normal(size=(64, 8)))
        a, _ = iiab_block(inp, params, None, None, side=4)
        b, _ = iiab_block(inp, params, BlockMask.ones(8, 8), cache, side=4)
        np.testing.assert_array_equal(a.data, b.data)

    def test_ones_output_ignores_cache(self, rng, params):
        inp = inputs(rng, 8, 8, 8)
        outs = [iiab_block(inp, params, BlockMask.ones(8, 8),
                           BlockCache(rng.normal(size=(64, 8)), rng.normal(size=(64, 8))),
                           side=4, shift=(2, 2))[0].data for _ in range(2)]
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_zero_mask_reuses_previous_output(self, rng, params):
        inp = inputs(rng, 8, 8, 8)
        prev, cache = iiab_block(inp, params, None, None, side=4)
        out, new_cache = iiab_block(inp, params, BlockMask.zeros(8, 8), cache, side=4)
        np.testing.assert_array_equal(out.data, prev.data)
        np.testing.assert_array_equal(new_cache.x_pp, cache.x_pp)

    @pytest.mark.parametrize("shift", [(0, 0), (2, 2)])
    def test_half_mask_matches_blend_oracle(self, rng, params, shift):
        _, cache = iiab_block(inputs(rng, 8, 8, 8), params, None, None, side=4, shift=shift)
        inp = inputs(rng, 8, 8, 8)
        full, full_cache = iiab_block(inp, params, None, None, side=4, shift=shift)
        m = np.zeros(64, dtype=np.uint8)
        m[rng.permutation(64)[:32]] = 1
        mask = BlockMask(m.reshape(8, 8))
        out, new_cache = iiab_block(inp, params, mask, cache, side=4, shift=shift)
        sel = m.astype(bool)
        expected = np.where(sel[:, None], full.data.reshape(64, 8), cache.x_pp)
        np.testing.assert_allclose(out.data.reshape(64, 8), expected, rtol=0, atol=1e-12)
        expected_p = np.where(sel[:, None], full_cache.x_prime, cache.x_prime)
        np.testing.assert_allclose(new_cache.x_prime, expected_p, rtol=0, atol=1e-12)

    def test_soft_gate_path_matches_sparse(self, rng, params):
        _, cache = iiab_block(inputs(rng, 4, 4, 8), params, None, None, side=4)
        inp = inputs(rng, 4, 4, 8)
        m = (rng.random((4, 4)) > 0.5).astype(np.uint8)
        sparse, _ = iiab_block(inp, params, BlockMask(m), cache, side=4)
        gate = Tensor(m.reshape(16, 1).astype(np.float64))
        dense, _ = iiab_block(inp, params, gate, cache, side=4)
        np.testing.assert_allclose(sparse.data, dense.data, rtol=0, atol=1e-12)

    def test_non_trivial_mask_needs_cache(self, rng, params):
        with pytest.raises(ValueError):
            iiab_block(inputs(rng, 4, 4, 8), params, BlockMask.zeros(4, 4), None, side=4)

    def test_mismatched_inputs(self, rng):
        with pytest.raises(ValueError):
            AttentionInputs(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((4, 4, 2))),
                            Tensor(np.zeros((4, 2, 2))))

    def test_unaligned_frame_size(self, rng):
        p = IiabParams.init(4, 1, 4, dtype=np.float64)
        out, cache = iiab_block(inputs(rng, 5, 7, 4), p, None, None, side=4, shift=(2, 2))
        assert out.shape == (5, 7, 4) and np.isfinite(out.data).all()
        assert cache.x_pp.shape == (35, 4)
