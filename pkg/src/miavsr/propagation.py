"""Recurrent feature refinement: cascaded IIABs, second-order propagation in
alternating temporal directions, and the alignment hook."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flops
from .attention import AttentionInputs, IiabParams, iiab_block
from .masking import NORMS, BlockMask, MaskDecision, MaskPolicy, MaskPredictorParams
from .tensor import Tensor, gather_rows, reshape, residual_add


@dataclass(frozen=True)
class ScheduleConfig:
    M: int = 2
    N: int = 4
    skip_interval: int = 2

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError("need at least one module and one block")
        if self.skip_interval < 1 or self.N % self.skip_interval:
            raise ValueError(f"N={self.N} not divisible by skip_interval={self.skip_interval}")

    def direction(self, m: int) -> str:
        """Module m (0-based) runs backward in time for the 1st, 3rd, ... module."""
        return "backward" if m % 2 == 0 else "forward"

    @staticmethod
    def shift(n: int, side: int) -> tuple[int, int]:
        s = side // 2 if n % 2 else 0
        return (s, s)


# --- alignment -------------------------------------------------------------------------

@dataclass(frozen=True)
class Translate:
    """Integer motion per frame; aligning from ``t0`` to ``t1`` rolls by (t1-t0)*(dy, dx)."""

    dy: int
    dx: int


def align(feature: Tensor, from_t: int, to_t: int, policy="identity") -> Tensor:
    """Warp a neighbour's features onto frame ``to_t``."""
    if policy == "identity":
        return feature
    if not isinstance(policy, Translate):
        raise ValueError(f"unknown alignment policy {policy!r}")
    H, W, C = feature.shape
    sy = (to_t - from_t) * policy.dy
    sx = (to_t - from_t) * policy.dx
    if sy % H == 0 and sx % W == 0:
        return feature
    ys = (np.arange(H) - sy) % H
    xs = (np.arange(W) - sx) % W
    idx = (ys[:, None] * W + xs[None, :]).ravel()
    return reshape(gather_rows(reshape(feature, (H * W, C)), idx, unique=True), (H, W, C))


# --- state -------------------------------------------------------------------------------

@dataclass
class ModuleState:
    """Everything one propagation module carries from frame to frame."""

    N: int
    past: list = field(default_factory=list)  # enhanced outputs, most recent first (<= 2)
    past_t: list = field(default_factory=list)
    caches: list = field(default_factory=list)
    norm_in: list = field(default_factory=list)  # normalised block inputs for the difference
    step: int = 0

    def __post_init__(self):
        self.caches = [None] * self.N
        self.norm_in = [None] * self.N

    @property
    def nbytes(self) -> int:
        total = sum(p.nbytes for p in self.past)
        total += sum(c.nbytes for c in self.caches if c is not None)
        total += sum(a.nbytes for a in self.norm_in if a is not None)
        return total


@dataclass
class PropagationState:
    modules: list

    @classmethod
    def fresh(cls, M: int, N: int) -> PropagationState:
        return cls([ModuleState(N) for _ in range(M)])

    @property
    def nbytes(self) -> int:
        return sum(m.nbytes for m in self.modules)


@dataclass
class MaskRecord:
    t: int
    module: int
    block: int
    step: int  # position of t in the module's traversal order (0-based)
    decision: MaskDecision

    @property
    def alpha(self) -> float:
        return self.decision.hard.alpha


class Propagator:
    """Runs the M propagation modules of N blocks over a sequence."""

    def __init__(self, blocks: list[list[IiabParams]], predictors: list[list[MaskPredictorParams]],
                 schedule: ScheduleConfig, side: int, policy: MaskPolicy | None = None,
                 align_policy="identity"):
        if len(blocks) != schedule.M or any(len(b) != schedule.N for b in blocks):
            raise ValueError("block parameters do not match the schedule")
        self.blocks = blocks
        self.predictors = predictors
        self.schedule = schedule
        self.side = side
        self.policy = policy or MaskPolicy()
        self.align_policy = align_policy
        self.records: list[MaskRecord] = []

    def _past(self, ms: ModuleState, i: int, t: int, like: Tensor) -> Tensor:
        if len(ms.past) <= i:
            return Tensor(np.zeros(like.shape, dtype=like.dtype))
        return align(Tensor(ms.past[i]), ms.past_t[i], t, self.align_policy)

    def fpm_forward(self, x_in: Tensor, state: PropagationState, m: int, t: int) -> Tensor:
        """Refine frame t's features through module m and advance its state."""
        ms = state.modules[m]
        if ms.past and ms.past[0].shape != x_in.shape:
            raise ValueError(f"state holds {ms.past[0].shape} features, got {x_in.dims}")
        H, W, _ = x_in.shape
        past1 = self._past(ms, 0, t, x_in)
        past2 = self._past(ms, 1, t, x_in)
        live = len(ms.past) == 2  # both neighbours exist, caches are meaningful
        policy = self.policy
        module = f"fpm{m}"
        x = group_in = x_in
        for n, p in enumerate(self.blocks[m]):
            with flops.scope(frame=t, module=module, block=n):
                norm_cur = None
                if policy.needs_difference:
                    with flops.scope(kind="mask_predictor"):
                        norm_cur = NORMS[policy.norm](x)
                has_prev = norm_cur is None or ms.norm_in[n] is not None
                if live and ms.caches[n] is not None and has_prev:
                    with flops.scope(kind="mask_predictor"):
                        decision = policy.decide(norm_cur, ms.norm_in[n], self.predictors[m][n],
                                                 (t, m, n), (H, W))
                else:
                    decision = MaskDecision(BlockMask.ones(H, W), forced=True)
                mask = decision.gate if decision.gate is not None else decision.hard
                x, ms.caches[n] = iiab_block(
                    AttentionInputs(x, past1, past2), p, mask, ms.caches[n],
                    side=self.side, shift=self.schedule.shift(n, self.side))
                if norm_cur is not None:
                    ms.norm_in[n] = norm_cur.data.copy()
                self.records.append(MaskRecord(t, m, n, ms.step, decision))
            if (n + 1) % self.schedule.skip_interval == 0:
                with flops.scope(frame=t, module=module, block=-1, kind="norm_misc"):
                    x = residual_add(x, group_in)
                group_in = x
        ms.past = [x.data.copy()] + ms.past[:1]
        ms.past_t = [t] + ms.past_t[:1]
        ms.step += 1
        return x

    def propagate_bidirectional(self, feats: list[Tensor]) -> list[Tensor]:
        """Run every module over the sequence, alternating temporal direction."""
        if not feats:
            raise ValueError("empty sequence")
        T = len(feats)
        state = PropagationState.fresh(self.schedule.M, self.schedule.N)
        self.state = state
        cur = list(feats)
        for m in range(self.schedule.M):
            order = range(T - 1, -1, -1) if self.schedule.direction(m) == "backward" else range(T)
            out = [None] * T
            for t in order:
                out[t] = self.fpm_forward(cur[t], state, m, t)
            cur = out
        return cur
