"""Dense tensors and the differentiable primitives the network is built from.

Every primitive runs a numpy forward, checks the result is finite, charges
the active FLOP ledger and, when a :class:`~miavsr.autodiff.Tape` is
recording and an input requires gradients, records a backward closure.

Layouts are row-major: feature maps are ``H x W x C``, token matrices are
``tokens x C`` and window batches are ``windows x tokens x C``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import prod

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from . import flops

LAYER_NORM_EPS = 1e-5

# innermost recording tape; managed by autodiff.Tape.__enter__/__exit__
_TAPES: list = []


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    """A dense array plus the bookkeeping reverse-mode differentiation needs."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim > 4:
            raise ValueError(f"tensors have at most 4 dims, got {arr.ndim}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(dims={self.dims}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)


def _as_tensor(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def is_recording() -> bool:
    return bool(_TAPES)


def apply_op(name: str, fwd, inputs: list[Tensor], **kw) -> Tensor:
    """Run ``fwd`` on the input arrays and record it on the active tape.

    ``fwd(*arrays, **kw)`` returns ``(out, back)`` where
    ``back(grad_out, needs)`` returns one gradient (or ``None``) per input.
    """
    out, back = fwd(*[t.data for t in inputs], **kw)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    result = Tensor(out)
    if _TAPES and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        _TAPES[-1].record(name, fwd, kw, inputs, result, back)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise ------------------------------------------------------------

def _add(a, b):
    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)
    return a + b, back


def _sub(a, b):
    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)
    return a - b, back


def _mul(a, b):
    def back(g, needs):
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)
    return a * b, back


def add(a: Tensor, b: Tensor) -> Tensor:
    out = apply_op("add", _add, [a, b])
    flops.record(elementwise=out.data.size)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = apply_op("sub", _sub, [a, b])
    flops.record(elementwise=out.data.size)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = apply_op("mul", _mul, [a, b])
    flops.record(elementwise=out.data.size)
    return out


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b`` charged as one residual pass (a misc term)."""
    out = apply_op("add", _add, [a, b])
    flops.record(elementwise=out.data.size, passes=out.data.size)
    return out


def _scale(x, *, s):
    return x * s, lambda g, needs: (g * s,)


def scale(x: Tensor, s: float) -> Tensor:
    out = apply_op("scale", _scale, [x], s=s)
    flops.record(elementwise=out.data.size)
    return out


def _unary(name, f, df, cost=1):
    """Build an elementwise op from value and derivative (in terms of x, y)."""
    def fwd(x):
        y = f(x)
        return y, lambda g, needs: (g * df(x, y),)

    def op(x: Tensor) -> Tensor:
        out = apply_op(name, fwd, [x])
        flops.record(elementwise=cost * out.data.size)
        return out

    op.__name__ = name
    return op


def _sigmoid_np(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

abs_ = _unary("abs", np.abs, lambda x, y: np.sign(x))
square = _unary("square", np.square, lambda x, y: 2 * x)
sqrt = _unary("sqrt", np.sqrt, lambda x, y: 0.5 / y)
exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x)
sigmoid = _unary("sigmoid", _sigmoid_np, lambda x, y: y * (1 - y), cost=4)
gelu = _unary(
    "gelu",
    lambda x: (0.5 * x * (1.0 + erf(x * _SQRT1_2))).astype(x.dtype),
    lambda x, y: 0.5 * (1.0 + erf(x * _SQRT1_2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x),
    cost=8,
)


def _sum(x):
    return np.asarray(x.sum()), lambda g, needs: (np.broadcast_to(g, x.shape).copy(),)


def _mean(x):
    n = x.size
    return np.asarray(x.mean()), lambda g, needs: (np.full(x.shape, g / n, dtype=x.dtype),)


def sum_(x: Tensor) -> Tensor:
    out = apply_op("sum", _sum, [x])
    flops.record(elementwise=x.data.size)
    return out


def mean(x: Tensor) -> Tensor:
    out = apply_op("mean", _mean, [x])
    flops.record(elementwise=x.data.size)
    return out


# --- shape plumbing -------------------------------------------------------------

def _reshape(x, *, shape):
    return x.reshape(shape), lambda g, needs: (g.reshape(x.shape),)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if prod(shape) != x.data.size:
        raise ValueError(f"cannot reshape {x.dims} to {list(shape)}")
    return apply_op("reshape", _reshape, [x], shape=shape)


def _transpose(x):
    return x.T.copy(), lambda g, needs: (g.T.copy(),)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return apply_op("transpose", _transpose, [x])


def _concat_rows(*xs):
    sizes = np.cumsum([x.shape[0] for x in xs])[:-1]

    def back(g, needs):
        return tuple(p if n else None for p, n in zip(np.split(g, sizes, axis=0), needs))
    return np.concatenate(xs, axis=0), back


def concat_rows(xs: list[Tensor]) -> Tensor:
    return apply_op("concat_rows", _concat_rows, list(xs))


def _gather_rows(x, *, idx, unique):
    out = x[idx]

    def back(g, needs):
        gx = np.zeros_like(x)
        flat_idx = idx.reshape(-1)
        flat_g = g.reshape((flat_idx.size,) + x.shape[1:])
        if unique:
            gx[flat_idx] = flat_g
        else:
            np.add.at(gx, flat_idx, flat_g)
        return (gx,)
    return out, back


def gather_rows(x: Tensor, idx, unique: bool | None = None) -> Tensor:
    """``x[idx]`` along the first axis; ``idx`` may be any integer array."""
    idx = np.asarray(idx, dtype=np.intp)
    if unique is None:
        unique = np.unique(idx).size == idx.size
    return apply_op("gather_rows", _gather_rows, [x], idx=idx, unique=unique)


def _scatter_rows(base, values, *, idx):
    out = base.copy()
    out[idx] = values

    def back(g, needs):
        gb = None
        if needs[0]:
            gb = g.copy()
            gb[idx] = 0
        return gb, (g[idx] if needs[1] else None)
    return out, back


def scatter_rows(base: Tensor, idx, values: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``idx`` (distinct) replaced by ``values``."""
    idx = np.asarray(idx, dtype=np.intp)
    if values.shape[0] != idx.size or values.shape[1:] != base.shape[1:]:
        raise ValueError(f"scatter of {values.dims} into {base.dims} at {idx.size} rows")
    return apply_op("scatter_rows", _scatter_rows, [base, values], idx=idx)


# --- neural primitives ------------------------------------------------------------

def _linear(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b

    def back(g, needs):
        gx = g @ w.T if needs[0] else None
        gw = x.T @ g if needs[1] else None
        gb = g.sum(axis=0) if b is not None and needs[2] else None
        return gx, gw, gb
    return y, back


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape tokens x C_in."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: x {x.dims} incompatible with weight {weight.dims}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias {bias.dims} does not match C_out={weight.shape[1]}")
    inputs = [x, weight] + ([bias] if bias is not None else [])
    out = apply_op("linear", _linear, inputs)
    n, cin = x.shape
    cout = weight.shape[1]
    flops.record(macs=n * cin * cout, elementwise=n * cout if bias is not None else 0)
    return out


def _layer_norm(x, gamma=None, beta=None, *, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat if gamma is None else xhat * gamma + beta

    def back(g, needs):
        gx = gg = gb = None
        if gamma is not None:
            flat_g = g.reshape(-1, g.shape[-1])
            gg = (flat_g * xhat.reshape(flat_g.shape)).sum(axis=0) if needs[1] else None
            gb = flat_g.sum(axis=0) if needs[2] else None
            g = g * gamma
        if needs[0]:
            gx = inv * (g - g.mean(axis=-1, keepdims=True)
                        - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb
    return y, back


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis with population variance, then ``* gamma + beta``.

    Without ``gamma``/``beta`` no affine is applied.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[-1]
    if gamma is not None and (gamma.shape != (c,) or beta is None or beta.shape != (c,)):
        raise ValueError("layer_norm: gamma/beta must both have shape (C,)")
    inputs = [x] if gamma is None else [x, gamma, beta]
    out = apply_op("layer_norm", _layer_norm, inputs, eps=eps)
    flops.record(elementwise=8 * x.data.size, passes=x.data.size)
    return out


def softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax(x):
    y = softmax_np(x)
    return y, lambda g, needs: (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis (max-subtracted)."""
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    out = apply_op("softmax", _softmax, [x])
    flops.record(elementwise=4 * x.data.size)
    return out


def _im2col(x, k):
    p = k // 2
    H, W, _ = x.shape
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    cols = sliding_window_view(xp, (k, k), axis=(0, 1))  # H, W, Cin, k, k
    return cols.transpose(0, 1, 3, 4, 2).reshape(H * W, -1)


def _conv2d(x, kernel, bias=None):
    k, _, cin, cout = kernel.shape
    H, W, _ = x.shape
    cols = _im2col(x, k)
    k2 = kernel.reshape(k * k * cin, cout)
    y = cols @ k2
    if bias is not None:
        y = y + bias

    def back(g, needs):
        g2 = g.reshape(H * W, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if needs[1] else None
        gb = g2.sum(axis=0) if bias is not None and needs[2] else None
        gx = None
        if needs[0]:
            p = k // 2
            gcols = (g2 @ k2.T).reshape(H, W, k, k, cin)
            gxp = np.zeros((H + 2 * p, W + 2 * p, cin), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[i:i + H, j:j + W] += gcols[:, :, i, j]
            gx = gxp[p:p + H, p:p + W]
        return gx, gk, gb
    return y.reshape(H, W, cout), back


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded (zero) cross-correlation of an H x W x C_in map.

    ``kernel`` is k x k x C_in x C_out with odd k.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d: x {x.dims}, kernel {kernel.dims}")
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {k}x{k2}")
    if x.shape[2] != cin:
        raise ValueError(f"conv2d: input has {x.shape[2]} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError("conv2d: bias must have shape (C_out,)")
    inputs = [x, kernel] + ([bias] if bias is not None else [])
    out = apply_op("conv2d", _conv2d, inputs)
    H, W, _ = x.shape
    flops.record(macs=H * W * k * k * cin * cout,
                 elementwise=H * W * cout if bias is not None else 0)
    return out


def _pixel_shuffle_np(x, s):
    H, W, cs = x.shape
    c = cs // (s * s)
    return x.reshape(H, W, c, s, s).transpose(0, 3, 1, 4, 2).reshape(H * s, W * s, c)


def _pixel_unshuffle_np(x, s):
    Hs, Ws, c = x.shape
    H, W = Hs // s, Ws // s
    return x.reshape(H, s, W, s, c).transpose(0, 2, 4, 1, 3).reshape(H, W, c * s * s)


def _pixel_shuffle(x, *, s):
    return _pixel_shuffle_np(x, s), lambda g, needs: (_pixel_unshuffle_np(g, s),)


def _pixel_unshuffle(x, *, s):
    return _pixel_unshuffle_np(x, s), lambda g, needs: (_pixel_shuffle_np(g, s),)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """H x W x (s^2 c) -> sH x sW x c; channel ``ci*s*s + i*s + j`` lands at offset (i, j)."""
    if x.data.ndim != 3 or x.shape[2] % (s * s):
        raise ValueError(f"pixel_shuffle: {x.dims} channels not divisible by {s * s}")
    return apply_op("pixel_shuffle", _pixel_shuffle, [x], s=s)


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    if x.data.ndim != 3 or x.shape[0] % s or x.shape[1] % s:
        raise ValueError(f"pixel_unshuffle: {x.dims} not divisible by {s}")
    return apply_op("pixel_unshuffle", _pixel_unshuffle, [x], s=s)


# --- windows ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WindowLayout:
    """Index maps between an H x W grid and shifted ``side x side`` windows.

    ``src[win, tok]`` is the flat pixel feeding each window token (padding
    reflects back into the frame); ``pixel_slot[p]`` is the flat
    ``win * side**2 + tok`` slot that pixel ``p`` occupies.
    """

    H: int
    W: int
    side: int
    shift: tuple[int, int]
    src: np.ndarray
    pixel_slot: np.ndarray

    @property
    def n_windows(self) -> int:
        return self.src.shape[0]

    @property
    def pixel_window(self) -> np.ndarray:
        return self.pixel_slot // (self.side * self.side)

    @property
    def pixel_token(self) -> np.ndarray:
        return self.pixel_slot % (self.side * self.side)


@lru_cache(maxsize=256)
def window_layout(H: int, W: int, side: int, shift: tuple[int, int] = (0, 0)) -> WindowLayout:
    if side < 1:
        raise ValueError("window side must be >= 1")
    Hp = -(-H // side) * side
    Wp = -(-W // side) * side
    rows = np.pad(np.arange(H), (0, Hp - H), mode="reflect") if Hp > H else np.arange(H)
    cols = np.pad(np.arange(W), (0, Wp - W), mode="reflect") if Wp > W else np.arange(W)
    dy, dx = shift[0] % Hp, shift[1] % Wp
    py = (np.arange(Hp) + dy) % Hp
    px = (np.arange(Wp) + dx) % Wp
    grid = rows[py][:, None] * W + cols[px][None, :]
    nh, nw = Hp // side, Wp // side
    src = grid.reshape(nh, side, nw, side).transpose(0, 2, 1, 3).reshape(nh * nw, side * side)

    ys, xs = np.meshgrid(np.arange(Hp), np.arange(Wp), indexing="ij")
    slot = ((ys // side) * nw + xs // side) * side * side + (ys % side) * side + xs % side
    pyy, pxx = py[ys], px[xs]
    genuine = (pyy < H) & (pxx < W)
    pixel_slot = np.empty(H * W, dtype=np.intp)
    pixel_slot[(pyy * W + pxx)[genuine]] = slot[genuine]
    src.setflags(write=False)
    pixel_slot.setflags(write=False)
    return WindowLayout(H, W, side, (dy, dx), src.astype(np.intp), pixel_slot)


def window_partition(x: Tensor, side: int, shift: tuple[int, int] = (0, 0)) -> Tensor:
    """H x W x C -> windows x side^2 x C after a cyclic shift by ``shift``."""
    H, W, C = x.shape
    lay = window_layout(H, W, side, tuple(shift))
    flat = reshape(x, (H * W, C))
    return gather_rows(flat, lay.src, unique=(H % side == 0 and W % side == 0))


def window_reverse(wb: Tensor, H: int, W: int, shift: tuple[int, int] = (0, 0)) -> Tensor:
    """Inverse of :func:`window_partition` (crops any padding)."""
    nw, t, C = wb.shape
    side = int(round(t ** 0.5))
    lay = window_layout(H, W, side, tuple(shift))
    if nw != lay.n_windows or side * side != t:
        raise ValueError(f"window batch {wb.dims} does not tile {H}x{W}")
    flat = reshape(wb, (nw * t, C))
    return reshape(gather_rows(flat, lay.pixel_slot, unique=True), (H, W, C))
