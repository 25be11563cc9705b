"""Finite-difference checks of every differentiable stage, in double precision."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import AttentionInputs, BlockCache, IiabParams, iiab_attention, iiab_block
from .autodiff import GradCheck, finite_diff_check
from .masking import gumbel_gate_logits, masked_blend, sparsity_loss
from .model import ModelConfig, ModelParams, charbonnier_loss, forward_sequence, reconstruct
from .tensor import (Tensor, conv2d, layer_norm, linear, mul, pixel_shuffle, reshape, softmax,
                     sum_, window_layout)

TOLERANCE = 1e-4
# tighter than the 1e-7 default so that small gradients are still compared
ABS_FLOOR = 1e-9


def _fd(f, params, **kw):
    return finite_diff_check(f, params, **{"abs_floor": ABS_FLOOR, **kw})


def _r(rng, *shape, s=1.0):
    return Tensor(rng.normal(0.0, s, size=shape))


def _weighted(out: Tensor, rng) -> Callable[[], Tensor]:
    w = _r(rng, *out.shape)
    return lambda y: sum_(mul(y, w))


def check_linear(rng):
    x, w, b = _r(rng, 5, 8), _r(rng, 8, 3), _r(rng, 3)
    loss = _weighted(linear(x, w, b), rng)
    return _fd(lambda: loss(linear(x, w, b)), {"x": x, "weight": w, "bias": b})


def check_layer_norm(rng):
    x, g, b = _r(rng, 6, 8, s=2.0), _r(rng, 8), _r(rng, 8)
    loss = _weighted(layer_norm(x, g, b), rng)
    return _fd(lambda: loss(layer_norm(x, g, b)), {"x": x, "gamma": g, "beta": b})


def check_softmax(rng):
    x = _r(rng, 4, 7, s=2.0)
    loss = _weighted(softmax(x), rng)
    return _fd(lambda: loss(softmax(x)), {"x": x})


def check_attention(rng):
    side, heads, C = 2, 2, 4
    lay = window_layout(4, 4, side, (1, 1))
    nk = 3 * side * side
    q = _r(rng, 16, C)
    k, v = _r(rng, lay.n_windows, nk, C), _r(rng, lay.n_windows, nk, C)
    b = _r(rng, heads, side * side, nk)

    def f():
        return iiab_attention(q, k, v, b, heads, lay.pixel_window, lay.pixel_token)
    loss = _weighted(f(), rng)
    return _fd(lambda: loss(f()), {"q": q, "k": k, "v": v, "bias": b})


def check_conv(rng):
    x, k, b = _r(rng, 5, 6, 3), _r(rng, 3, 3, 3, 4), _r(rng, 4)
    loss = _weighted(conv2d(x, k, b), rng)
    return _fd(lambda: loss(conv2d(x, k, b)), {"x": x, "kernel": k, "bias": b})


def check_pixel_shuffle(rng):
    cfg = ModelConfig(scale=2, channels=4, window=2, heads=2, M=1, N=2, dtype="float64")
    p = ModelParams.init(cfg, seed=int(rng.integers(1 << 30)))
    p.recon_w.data = rng.normal(0.0, 0.3, size=p.recon_w.shape)
    feat, lr = _r(rng, 3, 4, 4), Tensor(rng.random((3, 4, 3)))

    def f():
        return reconstruct(feat, lr, p, 2)
    loss = _weighted(f(), rng)
    direct = _weighted(pixel_shuffle(feat, 2), rng)
    out = _fd(lambda: loss(f()), {"feat": feat, "weight": p.recon_w, "bias": p.recon_b})
    out.update({f"shuffle.{k}": v for k, v in
                _fd(lambda: direct(pixel_shuffle(feat, 2)), {"x": feat}).items()})
    return out


def check_charbonnier(rng):
    pred, target = Tensor(rng.random((4, 5, 3))), Tensor(rng.random((4, 5, 3)))
    return _fd(lambda: charbonnier_loss(pred, target),
              {"pred": pred, "target": target})


def check_gumbel_gate(rng):
    # logits kept away from the binarisation point
    z = Tensor(rng.choice([-1, 1], size=(12, 1)) * rng.uniform(0.3, 2.0, size=(12, 1)))
    g1, g2 = rng.gumbel(size=(12, 1)), rng.gumbel(size=(12, 1))
    loss = _weighted(z, rng)
    return _fd(lambda: loss(gumbel_gate_logits(z, 2 / 3, g1, g2)), {"z": z})


def check_sparsity(rng):
    z = Tensor(rng.normal(size=(10, 1)))
    g1, g2 = rng.gumbel(size=(10, 1)), rng.gumbel(size=(10, 1))
    z2 = Tensor(rng.normal(size=(6, 1)))
    return _fd(
        lambda: sparsity_loss([gumbel_gate_logits(z, 2 / 3, g1, g2), z2]), {"z": z, "z2": z2})


def check_masked_blend(rng):
    cur, cached = _r(rng, 4, 4, 3), _r(rng, 4, 4, 3)
    m = Tensor(rng.random((16, 1)))
    loss = _weighted(cur, rng)
    return _fd(lambda: loss(masked_blend(cur, cached, m)),
              {"cur": cur, "cached": cached, "mask": m})


def _block_setup(rng, C=8, heads=2, side=4, H=8, W=8):
    p = IiabParams.init(C, heads, side, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    # non-trivial attention: the default init makes the logits nearly flat
    for name in ("wq", "wk", "wv", "wo", "rel_table"):
        t = getattr(p, name)
        t.data = rng.normal(0.0, 0.4, size=t.shape)
    for name in ("bq", "bk", "group_offset", "ln1_b", "ln2_b"):
        t = getattr(p, name)
        t.data = rng.normal(0.0, 0.2, size=t.shape)
    inp = AttentionInputs(_r(rng, H, W, C), _r(rng, H, W, C), _r(rng, H, W, C))
    return p, inp


def check_iiab_block(rng):
    p, inp = _block_setup(rng)

    def f():
        return iiab_block(inp, p, side=4, shift=(2, 2))[0]
    loss = _weighted(f(), rng)
    return _fd(lambda: loss(f()),
              {**p.named(), "x": inp.x_cur, "past1": inp.past1, "past2": inp.past2})


def check_iiab_block_masked(rng):
    p, inp = _block_setup(rng)
    H, W, C = inp.x_cur.shape
    cache = BlockCache(rng.normal(size=(H * W, C)), rng.normal(size=(H * W, C)))
    mask = Tensor((rng.random((H * W, 1)) > 0.5).astype(np.float64))

    def f():
        return iiab_block(inp, p, mask, cache, side=4, shift=(0, 0))[0]
    loss = _weighted(f(), rng)
    return _fd(lambda: loss(f()), {**p.named(), "x": inp.x_cur, "mask": mask})


def check_model(rng):
    cfg = ModelConfig(scale=2, channels=4, window=2, heads=2, M=2, N=2, skip_interval=1,
                      dtype="float64")
    p = ModelParams.init(cfg, seed=int(rng.integers(1 << 30)))
    p.recon_w.data = rng.normal(0.0, 0.1, size=p.recon_w.shape)
    # one frame: with more, finite differences would also see the cross-frame
    # path that truncated backpropagation deliberately cuts
    frames = [rng.random((4, 4, 3))]
    targets = [rng.random((8, 8, 3))]
    named = p.named()
    probe = {k: named[k] for k in ("shallow.weight", "fpm0.block0.wq", "fpm1.block1.ffn_out",
                                   "fpm0.block1.rel_table", "recon.bias")}
    return _fd(lambda: forward_sequence(frames, cfg, p, targets=targets).loss.total,
              probe, max_elements=6)


CHECKS: dict[str, Callable] = {
    "linear": check_linear,
    "layer_norm": check_layer_norm,
    "softmax": check_softmax,
    "attention": check_attention,
    "conv2d": check_conv,
    "pixel_shuffle": check_pixel_shuffle,
    "charbonnier": check_charbonnier,
    "gumbel_gate": check_gumbel_gate,
    "sparsity": check_sparsity,
    "masked_blend": check_masked_blend,
    "iiab_block": check_iiab_block,
    "iiab_block_masked": check_iiab_block_masked,
    "model": check_model,
}


@dataclass
class OpResult:
    op: str
    worst: GradCheck

    @property
    def ok(self) -> bool:
        return self.worst.max_rel_error < TOLERANCE


def run_checks(names=None, seed: int = 0) -> list[OpResult]:
    out = []
    for name in names or CHECKS:
        rng = np.random.default_rng([seed, sorted(CHECKS).index(name)])
        report = CHECKS[name](rng)
        out.append(OpResult(name, max(report.values(), key=lambda g: g.max_rel_error)))
    return out


def results_csv(results: list[OpResult]) -> str:
    lines = ["op,parameter,max_rel_error,tolerance,status"]
    for r in results:
        lines.append(f"{r.op},{r.worst.name},{r.worst.max_rel_error:.3e},{TOLERANCE:g},"
                     f"{'pass' if r.ok else 'FAIL'}")
    return "\n".join(lines) + "\n"
