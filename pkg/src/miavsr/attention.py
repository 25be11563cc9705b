"""Intra&inter-frame attention block (IIAB).

Queries come from the current frame only; keys and values come from the
current frame plus the two previously enhanced frames, all projected with
the block's own ``wk``/``wv``. Attention runs in (optionally shifted)
``side x side`` windows, so every query sees ``3 * side**2`` keys.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flops
from .masking import BlockMask, masked_blend
from .tensor import (Tensor, apply_op, concat_rows, gather_rows, gelu, layer_norm, linear,
                     reshape, residual_add, scatter_rows, softmax_np, window_layout)

FRAME_GROUPS = 3  # intra, t-1, t-2


def _trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std).astype(dtype)


@dataclass
class IiabParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ffn_in: Tensor
    ffn_in_b: Tensor
    ffn_out: Tensor
    ffn_out_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    rel_table: Tensor  # (2w-1)^2 x heads
    group_offset: Tensor  # 3 x heads
    heads: int

    TENSORS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ffn_in", "ffn_in_b",
               "ffn_out", "ffn_out_b", "ln1_g", "ln1_b", "ln2_g", "ln2_b",
               "rel_table", "group_offset")

    def __post_init__(self):
        C = self.wq.shape[0]
        if C % self.heads:
            raise ValueError(f"channels {C} not divisible by {self.heads} heads")
        if self.rel_table.shape[1] != self.heads or self.group_offset.shape != (3, self.heads):
            raise ValueError("bias table does not match head count")

    @classmethod
    def init(cls, C: int, heads: int, side: int, ratio: int = 2, seed=0,
             dtype=np.float32) -> IiabParams:
        rng = np.random.default_rng(seed)
        hid = ratio * C

        def t(a):
            return Tensor(a)
        z = lambda *s: t(np.zeros(s, dtype=dtype))  # noqa: E731
        return cls(
            wq=t(_trunc_normal(rng, (C, C), dtype=dtype)), bq=z(C),
            wk=t(_trunc_normal(rng, (C, C), dtype=dtype)), bk=z(C),
            wv=t(_trunc_normal(rng, (C, C), dtype=dtype)), bv=z(C),
            wo=t(_trunc_normal(rng, (C, C), dtype=dtype)), bo=z(C),
            ffn_in=t(_trunc_normal(rng, (C, hid), dtype=dtype)), ffn_in_b=z(hid),
            ffn_out=t(_trunc_normal(rng, (hid, C), dtype=dtype)), ffn_out_b=z(C),
            ln1_g=t(np.ones(C, dtype=dtype)), ln1_b=z(C),
            ln2_g=t(np.ones(C, dtype=dtype)), ln2_b=z(C),
            rel_table=t(_trunc_normal(rng, ((2 * side - 1) ** 2, heads), dtype=dtype)),
            group_offset=z(FRAME_GROUPS, heads),
            heads=heads,
        )

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in self.TENSORS}


@dataclass
class AttentionInputs:
    """Current block input and the two enhanced past features, all H x W x C."""

    x_cur: Tensor
    past1: Tensor
    past2: Tensor

    def __post_init__(self):
        if not (self.x_cur.shape == self.past1.shape == self.past2.shape):
            raise ValueError("current and past features must share dims")
        if self.x_cur.data.ndim != 3:
            raise ValueError("features must be H x W x C")


@dataclass
class BlockCache:
    """Hidden features of the previous frame, (H*W) x C, held as constants."""

    x_prime: np.ndarray
    x_pp: np.ndarray

    @property
    def nbytes(self) -> int:
        return self.x_prime.nbytes + self.x_pp.nbytes


# --- relative position bias -----------------------------------------------------

def relative_position_index(side: int) -> np.ndarray:
    """Swin-style index into a (2w-1)^2 table for every (query, key) token pair."""
    if side < 1:
        raise ValueError("window side must be >= 1")
    ys, xs = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()])
    rel = coords[:, :, None] - coords[:, None, :] + (side - 1)
    return rel[0] * (2 * side - 1) + rel[1]


def _rel_bias(table, offsets, *, index):
    T = index.shape[0]
    heads = table.shape[1]
    b = table[index][:, None, :, :] + offsets[None, :, None, :]  # T, 3, T, heads
    out = b.reshape(T, FRAME_GROUPS * T, heads).transpose(2, 0, 1)

    def back(g, needs):
        gg = g.transpose(1, 2, 0).reshape(T, FRAME_GROUPS, T, heads)
        gt = None
        if needs[0]:
            gt = np.zeros_like(table)
            np.add.at(gt, index.ravel(), gg.sum(axis=1).reshape(-1, heads))
        return gt, (gg.sum(axis=(0, 2)) if needs[1] else None)
    return np.ascontiguousarray(out), back


def relative_position_bias(table: Tensor, offsets: Tensor, side: int) -> Tensor:
    """Bias B of shape heads x w^2 x 3w^2.

    Entry ``[h, q, g*w^2 + k]`` is ``table[rel(q, k), h] + offsets[g, h]`` with
    frame group g in (intra, t-1, t-2).
    """
    index = relative_position_index(side)
    if table.shape[0] != (2 * side - 1) ** 2:
        raise ValueError(f"table has {table.shape[0]} rows, window side {side} needs "
                         f"{(2 * side - 1) ** 2}")
    return apply_op("relative_position_bias", _rel_bias, [table, offsets], index=index)


# --- attention ------------------------------------------------------------------------

def _attention(q, k, v, bias=None, *, heads, qwin, qtok, scale):
    nq, C = q.shape
    nW, nk, _ = k.shape
    d = C // heads
    qh = q.reshape(nq, heads, 1, d)
    kg = k.reshape(nW, nk, heads, d).transpose(0, 2, 3, 1)[qwin]  # nq, heads, d, nk
    vg = v.reshape(nW, nk, heads, d).transpose(0, 2, 1, 3)[qwin]  # nq, heads, nk, d
    logits = (qh @ kg)[:, :, 0, :] * scale
    if bias is not None:
        logits = logits + bias[:, qtok, :].transpose(1, 0, 2)
    a = softmax_np(logits)
    out = (a[:, :, None, :] @ vg)[:, :, 0, :].reshape(nq, C)

    def back(g, needs):
        gh = g.reshape(nq, heads, 1, d)
        ga = (gh @ vg.transpose(0, 1, 3, 2))[:, :, 0, :]
        gl = a * (ga - (ga * a).sum(axis=-1, keepdims=True))
        gq = gk = gv = gb = None
        if needs[0]:
            gq = (gl[:, :, None, :] @ kg.transpose(0, 1, 3, 2))[:, :, 0, :].reshape(nq, C) * scale
        if needs[1] or needs[2]:
            # scatter-add per-query contributions back onto their windows
            onehot = (qwin[None, :] == np.arange(nW)[:, None]).astype(q.dtype)
            if needs[1]:
                gkg = (qh.transpose(0, 1, 3, 2) @ gl[:, :, None, :]) * scale  # nq, heads, d, nk
                gk = (onehot @ gkg.reshape(nq, -1)).reshape(nW, heads, d, nk)
                gk = gk.transpose(0, 3, 1, 2).reshape(nW, nk, C)
            if needs[2]:
                gvg = a[:, :, :, None] @ gh  # nq, heads, nk, d
                gv = (onehot @ gvg.reshape(nq, -1)).reshape(nW, heads, nk, d)
                gv = gv.transpose(0, 2, 1, 3).reshape(nW, nk, C)
        if bias is not None and needs[3]:
            T = bias.shape[1]
            tok_onehot = (qtok[None, :] == np.arange(T)[:, None]).astype(q.dtype)
            gb = (tok_onehot @ gl.reshape(nq, -1)).reshape(T, heads, nk).transpose(1, 0, 2)
        return gq, gk, gv, gb
    return out, back


def _attention_dense(q, k, v, bias=None, *, heads, perm, scale):
    # every window holds all of its query tokens: batch per window, no gathers
    nq, C = q.shape
    nW, nk, _ = k.shape
    d = C // heads
    nt = nq // nW
    qw = q[perm].reshape(nW, nt, heads, d).transpose(0, 2, 1, 3)  # nW, heads, nt, d
    kw = k.reshape(nW, nk, heads, d).transpose(0, 2, 3, 1)  # nW, heads, d, nk
    vw = v.reshape(nW, nk, heads, d).transpose(0, 2, 1, 3)  # nW, heads, nk, d
    logits = (qw @ kw) * scale
    if bias is not None:
        logits = logits + bias[:, :nt][None]
    a = softmax_np(logits)
    ow = a @ vw
    out = np.empty_like(q)
    out[perm] = ow.transpose(0, 2, 1, 3).reshape(nq, C)

    def back(g, needs):
        gw = g[perm].reshape(nW, nt, heads, d).transpose(0, 2, 1, 3)
        ga = gw @ vw.transpose(0, 1, 3, 2)
        gl = a * (ga - (ga * a).sum(axis=-1, keepdims=True))
        gq = gk = gv = gb = None
        if needs[0]:
            gq = np.empty_like(q)
            gqw = (gl @ kw.transpose(0, 1, 3, 2)) * scale
            gq[perm] = gqw.transpose(0, 2, 1, 3).reshape(nq, C)
        if needs[1]:
            gk = ((qw.transpose(0, 1, 3, 2) @ gl) * scale).transpose(0, 3, 1, 2).reshape(nW, nk, C)
        if needs[2]:
            gv = (a.transpose(0, 1, 3, 2) @ gw).transpose(0, 2, 1, 3).reshape(nW, nk, C)
        if bias is not None and needs[3]:
            gb = np.zeros_like(bias)
            gb[:, :nt] = gl.sum(axis=0)
        return gq, gk, gv, gb
    return out, back


def _window_order(qwin, qtok, nW):
    """Permutation sorting queries into full windows, or None if some are missing."""
    nq = qwin.size
    if nq % nW:
        return None
    nt = nq // nW
    perm = np.lexsort((qtok, qwin))
    if (np.array_equal(qwin[perm], np.repeat(np.arange(nW), nt))
            and np.array_equal(qtok[perm], np.tile(np.arange(nt), nW))):
        return perm
    return None


def iiab_attention(Q: Tensor, K: Tensor, V: Tensor, bias: Tensor | None = None, heads: int = 1,
                   query_window=None, query_token=None, dense_ok: bool = True) -> Tensor:
    """``SoftMax(Q K^T / sqrt(d) + B) V`` per head, d = C / heads.

    ``K``/``V`` are either ``keys x C`` (one window) or
    ``windows x keys x C``; ``query_window[i]`` / ``query_token[i]`` give the
    window and in-window position of query row i (defaults: all in window 0,
    tokens in order). ``bias`` is ``heads x tokens x keys``. When the
    queries fill whole windows a batched per-window kernel is used unless
    ``dense_ok`` is False; both give the same values.
    """
    if K.data.ndim == 2:
        K = reshape(K, (1,) + K.shape)
        V = reshape(V, (1,) + V.shape)
    nq, C = Q.shape
    nW, nk, Ck = K.shape
    if Ck != C or V.shape != K.shape:
        raise ValueError(f"attention: Q {Q.dims}, K {K.dims}, V {V.dims}")
    if heads < 1 or C % heads:
        raise ValueError(f"{C} channels cannot be split into {heads} heads")
    qwin = np.zeros(nq, np.intp) if query_window is None else np.asarray(query_window, np.intp)
    qtok = np.arange(nq, dtype=np.intp) if query_token is None else np.asarray(query_token, np.intp)
    if bias is not None and (bias.shape[0] != heads or bias.shape[2] != nk):
        raise ValueError(f"bias {bias.dims} does not match {heads} heads x {nk} keys")
    inputs = [Q, K, V] + ([bias] if bias is not None else [])
    scale = 1.0 / np.sqrt(C // heads)
    perm = _window_order(qwin, qtok, nW) if dense_ok else None
    if perm is not None:
        out = apply_op("iiab_attention", _attention_dense, inputs, heads=heads, perm=perm,
                       scale=scale)
    else:
        out = apply_op("iiab_attention", _attention, inputs, heads=heads, qwin=qwin, qtok=qtok,
                       scale=scale)
    flops.record(macs=2 * nq * nk * C, elementwise=6 * nq * heads * nk)
    return out


# --- block -----------------------------------------------------------------------------

@dataclass
class QKV:
    """Projected tokens of one block.

    ``q`` holds one row per selected pixel (``pixels``), ``k``/``v`` are
    windows x 3w^2 x C with key groups ordered (intra, t-1, t-2).
    """

    q: Tensor
    k: Tensor
    v: Tensor
    pixels: np.ndarray
    query_window: np.ndarray
    query_token: np.ndarray


def _selected_pixels(mask: BlockMask | None, n: int) -> np.ndarray | None:
    if mask is None or mask.all_ones:
        return None
    return np.flatnonzero(mask.values.reshape(-1))


def make_qkv(h_cur: Tensor, h_past: Tensor, p: IiabParams, H: int, W: int, side: int,
             shift=(0, 0), query_mask: BlockMask | None = None) -> QKV:
    """Project normalised tokens to windowed Q, K, V.

    ``h_cur`` is (H*W) x C, ``h_past`` is the (2*H*W) x C stack [t-1; t-2].
    Only pixels where ``query_mask`` is 1 produce query rows.
    """
    n = H * W
    if h_cur.shape[0] != n or h_past.shape[0] != 2 * n:
        raise ValueError("token counts do not match the frame size")
    if query_mask is not None and query_mask.shape != (H, W):
        raise ValueError(f"mask {query_mask.shape} does not match frame {(H, W)}")
    lay = window_layout(H, W, side, tuple(shift))
    sel = _selected_pixels(query_mask, n)
    with flops.scope(kind="qkv"):
        tokens = concat_rows([h_cur, h_past])
        K = linear(tokens, p.wk, p.bk)
        V = linear(tokens, p.wv, p.bv)
        q_in = h_cur if sel is None else gather_rows(h_cur, sel, unique=True)
        Q = linear(q_in, p.wq, p.bq)
    idx = np.concatenate([lay.src + g * n for g in range(FRAME_GROUPS)], axis=1)
    unique = H % side == 0 and W % side == 0
    Kw = gather_rows(K, idx, unique=unique)
    Vw = gather_rows(V, idx, unique=unique)
    pixels = np.arange(n) if sel is None else sel
    return QKV(Q, Kw, Vw, pixels, lay.pixel_window[pixels], lay.pixel_token[pixels])


def iiab_block(inp: AttentionInputs, p: IiabParams, mask=None, cache: BlockCache | None = None,
               *, side: int, shift=(0, 0)) -> tuple[Tensor, BlockCache]:
    """One pre-norm IIAB with masked reuse of the previous frame's hidden features.

    ``mask`` is ``None`` (compute everything), a :class:`BlockMask`
    (inference: masked rows are never computed) or an (H*W) x 1 tensor of
    hard 0/1 values carrying straight-through gradients (training: everything
    is computed, then blended). Returns the output and the cache for the
    next frame.
    """
    x = inp.x_cur
    H, W, C = x.shape
    n = H * W
    training = isinstance(mask, Tensor)
    if isinstance(mask, BlockMask) and mask.all_ones:
        mask = None
    if mask is not None and cache is None:
        raise ValueError("a non-trivial mask needs the previous frame's cache")

    x2 = reshape(x, (n, C))
    past = concat_rows([reshape(inp.past1, (n, C)), reshape(inp.past2, (n, C))])
    with flops.scope(kind="norm_misc"):
        h = layer_norm(x2, p.ln1_g, p.ln1_b)
        hp = layer_norm(past, p.ln1_g, p.ln1_b)
    qkv = make_qkv(h, hp, p, H, W, side, shift, None if training else mask)
    with flops.scope(kind="attn_matmul"):
        bias = relative_position_bias(p.rel_table, p.group_offset, side)
        att = iiab_attention(qkv.q, qkv.k, qkv.v, bias, p.heads, qkv.query_window, qkv.query_token)
    with flops.scope(kind="proj"):
        a = linear(att, p.wo, p.bo)
    sparse = mask is not None and not training
    x_rows = gather_rows(x2, qkv.pixels, unique=True) if sparse else x2
    with flops.scope(kind="norm_misc"):
        xp = residual_add(x_rows, a)
    if training:
        xp = masked_blend(xp, Tensor(cache.x_prime), mask)

    with flops.scope(kind="norm_misc"):
        g = layer_norm(xp, p.ln2_g, p.ln2_b)
    with flops.scope(kind="ffn"):
        f = linear(gelu(linear(g, p.ffn_in, p.ffn_in_b)), p.ffn_out, p.ffn_out_b)
    with flops.scope(kind="norm_misc"):
        xpp = residual_add(xp, f)
    if training:
        xpp = masked_blend(xpp, Tensor(cache.x_pp), mask)
    elif sparse:
        xp = scatter_rows(Tensor(cache.x_prime), qkv.pixels, xp)
        xpp = scatter_rows(Tensor(cache.x_pp), qkv.pixels, xpp)
    new_cache = BlockCache(xp.data.copy(), xpp.data.copy())
    return reshape(xpp, (H, W, C)), new_cache
