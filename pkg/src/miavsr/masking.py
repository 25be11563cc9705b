"""Block-wise computation masks.

Pipeline for one block at frame t::

    delta = |norm(x_t) - norm(x_{t-1})|          per pixel and channel
    pi1   = sigmoid(conv1x1(delta))               keep probability
    soft  = gumbel-softmax(pi1, pi2 = 1 - pi1)    training only
    mask  = soft > 0.5                            (pi1 > 0.5 at inference)

plus the handcrafted threshold baseline, the masked blend that substitutes
cached features where the mask is 0, and the l1 sparsity loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import flops
from .tensor import (Tensor, _sigmoid_np, abs_, apply_op, concat_rows, layer_norm, linear,
                     mean, reshape, sigmoid, sub, transpose)

TAU = 2.0 / 3.0
SATURATION_LOGIT = 1e4


@dataclass
class BlockMask:
    """Binary H x W mask for one block; ``alpha`` is the density of ones."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"mask must be H x W, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        self.values = v.astype(np.uint8)

    @classmethod
    def ones(cls, H: int, W: int) -> BlockMask:
        return cls(np.ones((H, W), dtype=np.uint8))

    @classmethod
    def zeros(cls, H: int, W: int) -> BlockMask:
        return cls(np.zeros((H, W), dtype=np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def ones_count(self) -> int:
        return int(self.values.sum())

    @property
    def alpha(self) -> float:
        return self.ones_count / self.values.size

    @property
    def all_ones(self) -> bool:
        return self.ones_count == self.values.size


@dataclass
class MaskPredictorParams:
    """The 1x1 convolution C -> 1 and the gate temperature."""

    weight: Tensor  # C x 1
    bias: Tensor  # (1,)
    tau: float = TAU

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def init(cls, C: int, dtype=np.float32, tau: float = TAU) -> MaskPredictorParams:
        # a positive weight with zero bias keeps every pixel whose features moved
        return cls(Tensor(np.full((C, 1), 4.0 / C, dtype=dtype)),
                   Tensor(np.zeros(1, dtype=dtype)), tau)

    def named(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


# --- difference normalisation, kept swappable -------------------------------------

def channel_layernorm(x: Tensor) -> Tensor:
    """Per-pixel normalisation over channels, no affine."""
    return layer_norm(x)


def channel_standardize(x: Tensor) -> Tensor:
    """Per-channel standardisation over all pixels of the frame."""
    H, W, C = x.shape
    cols = transpose(reshape(x, (H * W, C)))
    return reshape(transpose(layer_norm(cols)), (H, W, C))


NORMS: dict[str, Callable[[Tensor], Tensor]] = {
    "channel_layernorm": channel_layernorm,
    "channel_standardize": channel_standardize,
}


def feature_difference(x_cur: Tensor, x_prev: Tensor, norm: str = "channel_layernorm") -> Tensor:
    """Elementwise ``|norm(x_cur) - norm(x_prev)|`` of two H x W x C maps."""
    if x_cur.shape != x_prev.shape:
        raise ValueError(f"feature maps differ: {x_cur.dims} vs {x_prev.dims}")
    f = NORMS[norm]
    return abs_(sub(f(x_cur), f(x_prev)))


def predictor_logits(delta: Tensor, p: MaskPredictorParams) -> Tensor:
    """``f(delta)``: the 1x1 convolution, returned as an (H*W) x 1 column."""
    H, W, C = delta.shape
    if p.weight.shape != (C, 1):
        raise ValueError(f"predictor expects {p.weight.shape[0]} channels, got {C}")
    return linear(reshape(delta, (H * W, C)), p.weight, p.bias)


def mask_logits(delta: Tensor, p: MaskPredictorParams) -> Tensor:
    """Keep probability ``pi1 = sigmoid(f(delta))`` as an H x W map."""
    H, W, _ = delta.shape
    return reshape(sigmoid(predictor_logits(delta, p)), (H, W))


def _gumbel_gate(z, *, g1, g2, tau):
    # exp((log p1 + g1)/tau) / sum_i exp((log p_i + g_i)/tau)
    #   == sigmoid((log p1 - log p2 + g1 - g2) / tau), and log p1 - log p2 == z
    s = _sigmoid_np((z + g1 - g2) / tau)
    return s, lambda g, needs: (g * s * (1 - s) / tau,)


def gumbel_gate_logits(z: Tensor, tau: float, g1: np.ndarray, g2: np.ndarray) -> Tensor:
    """Soft mask from predictor logits and explicit Gumbel noise."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    out = apply_op("gumbel_gate", _gumbel_gate, [z], g1=np.asarray(g1, dtype=z.dtype),
                   g2=np.asarray(g2, dtype=z.dtype), tau=tau)
    flops.record(elementwise=8 * z.data.size)
    return out


def _logit(p):
    lp = np.log(p) - np.log1p(-p)
    return lp, lambda g, needs: (g / (p * (1 - p)),)


def gumbel_gate(pi1: Tensor, tau: float, rng: np.random.Generator | None = None,
                noise: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Gumbel-softmax sample of the keep decision (training mode).

    Noise is drawn independently per pixel from ``rng`` unless given.
    """
    p = pi1.data
    if not ((p > 0) & (p < 1)).all():
        raise ValueError("pi1 must lie strictly inside (0, 1)")
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or explicit noise")
        noise = (rng.gumbel(size=p.shape), rng.gumbel(size=p.shape))
    z = apply_op("logit", _logit, [pi1])
    return gumbel_gate_logits(z, tau, *noise)


def _straight_through(soft, *, threshold):
    hard = (soft > threshold).astype(soft.dtype)
    return hard, lambda g, needs: (g,)


def straight_through(soft: Tensor, threshold: float = 0.5) -> Tensor:
    """Forward ``soft > threshold`` as 0/1, backward the identity."""
    return apply_op("straight_through", _straight_through, [soft], threshold=threshold)


def binarize(mask_features, threshold: float = 0.5) -> BlockMask:
    """1 where the masking feature is strictly above ``threshold``."""
    v = mask_features.data if isinstance(mask_features, Tensor) else np.asarray(mask_features)
    return BlockMask((v > threshold).astype(np.uint8))


def handcrafted_mask(delta: Tensor, threshold: float = 0.2) -> BlockMask:
    """Uniform-threshold baseline: 1 where the channel mean of delta exceeds it."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    flops.record(elementwise=delta.data.size)
    return BlockMask((delta.data.mean(axis=-1) > threshold).astype(np.uint8))


def _blend(cur, cached, m):
    out = m * cur + (1 - m) * cached

    def back(g, needs):
        gm = None
        if needs[2]:
            gm = (g * (cur - cached)).sum(axis=-1, keepdims=True)
        return (g * m if needs[0] else None,
                g * (1 - m) if needs[1] else None,
                gm)
    return out, back


def masked_blend(cur: Tensor, cached: Tensor, mask) -> Tensor:
    """``M * cur + (1 - M) * cached`` with M broadcast over channels.

    ``mask`` is a :class:`BlockMask` or a tensor of matching leading shape
    (it may carry gradients, e.g. from :func:`straight_through`).
    """
    if cur.shape != cached.shape:
        raise ValueError(f"blend of {cur.dims} and {cached.dims}")
    if isinstance(mask, BlockMask):
        mask = Tensor(mask.values.astype(cur.dtype))
    lead = cur.shape[:-1]
    if int(np.prod(mask.shape)) != int(np.prod(lead)):
        raise ValueError(f"mask {mask.dims} does not cover {list(lead)}")
    m = reshape(mask, lead + (1,))
    out = apply_op("masked_blend", _blend, [cur, cached, m])
    flops.record(elementwise=3 * cur.data.size)
    return out


def sparsity_loss(mask_features: list[Tensor]) -> Tensor:
    """Mean absolute masking feature over all blocks and pixels."""
    if not mask_features:
        raise ValueError("sparsity loss needs at least one mask")
    flat = [reshape(m, (m.data.size, 1)) for m in mask_features]
    return mean(abs_(concat_rows(flat)))


# --- per-block decision -------------------------------------------------------------

@dataclass
class MaskDecision:
    hard: BlockMask
    soft: Tensor | None = None  # Gumbel soft features (training)
    gate: Tensor | None = None  # straight-through hard values carrying gradients
    forced: bool = False


@dataclass
class MaskPolicy:
    """How blocks obtain their masks.

    ``mode`` is ``"unmasked"``, ``"masked"`` (learned predictor) or
    ``"handcrafted"``. ``override(t, m, n, H, W)`` may return a
    :class:`BlockMask` to force a specific mask where a cache exists.
    """

    mode: str = "unmasked"
    threshold: float = 0.2
    binarize_at: float = 0.5
    training: bool = False
    norm: str = "channel_layernorm"
    rng: np.random.Generator | None = None
    override: Callable | None = None
    record_soft: list = field(default_factory=list)

    MODES = ("unmasked", "masked", "handcrafted")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if self.training and self.mode == "masked" and self.rng is None:
            raise ValueError("training mode needs an rng for the Gumbel noise")

    @property
    def needs_difference(self) -> bool:
        return self.mode in ("masked", "handcrafted")

    def decide(self, norm_cur: Tensor | None, norm_prev: np.ndarray | None,
               predictor: MaskPredictorParams | None, where: tuple[int, int, int],
               shape: tuple[int, int]) -> MaskDecision:
        """Mask for a block whose previous-frame cache exists."""
        H, W = shape
        if self.override is not None:
            forced = self.override(*where, H, W)
            if forced is not None:
                return MaskDecision(forced)
        if self.mode == "unmasked":
            return MaskDecision(BlockMask.ones(H, W))
        delta = abs_(sub(norm_cur, Tensor(norm_prev)))
        if self.mode == "handcrafted":
            return MaskDecision(handcrafted_mask(delta, self.threshold))
        z = predictor_logits(delta, predictor)
        if not self.training:
            pi1 = sigmoid(z)
            return MaskDecision(binarize(pi1.data.reshape(H, W), self.binarize_at))
        n = H * W
        g1 = self.rng.gumbel(size=(n, 1))
        g2 = self.rng.gumbel(size=(n, 1))
        soft = gumbel_gate_logits(z, predictor.tau, g1, g2)
        gate = straight_through(soft, self.binarize_at)
        hard = BlockMask(gate.data.reshape(H, W).astype(np.uint8))
        return MaskDecision(hard, soft=soft, gate=gate)
