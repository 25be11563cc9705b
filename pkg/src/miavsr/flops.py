"""FLOP ledger and the analytic per-block cost model.

Two conventions live side by side:

* oracle: every multiply-accumulate is 2 FLOPs and elementwise work is
  counted too (``Count.flops``);
* per-block: the linear C^2 terms are reported in MAC units so they line up with
  ``(6 + 6a) HWC^2``, and the attention w^2-term is reported both as the
  printed formula and as the instrumented count.

Primitives in :mod:`miavsr.tensor` call :func:`record`; nothing is counted
unless a ledger is active (``with recording(ledger): ...``).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, NamedTuple

OP_KINDS = ("qkv", "attn_matmul", "proj", "ffn", "norm_misc", "conv", "mask_predictor")
LINEAR_KINDS = ("qkv", "proj", "ffn")


class LedgerKey(NamedTuple):
    frame: int
    module: str
    block: int
    kind: str


@dataclass
class Count:
    macs: int = 0
    elementwise: int = 0
    # LayerNorm / residual element passes in units of one value per channel
    passes: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.elementwise


class FlopLedger:
    """Hierarchical counter keyed by (frame, module, block, op kind).

    Accumulation is plain integer addition, so merging sub-ledgers in any
    order gives the same totals.
    """

    def __init__(self) -> None:
        self.counters: dict[LedgerKey, Count] = {}
        self._frame_totals: dict[int, int] = {}

    def add(self, key: LedgerKey, macs: int = 0, elementwise: int = 0,
            passes: int = 0) -> None:
        if macs < 0 or elementwise < 0 or passes < 0:
            raise ValueError("ledger counters never decrease")
        if key.kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {key.kind!r}")
        c = self.counters.get(key)
        if c is None:
            c = self.counters[key] = Count()
        c.macs += int(macs)
        c.elementwise += int(elementwise)
        c.passes += int(passes)
        self._frame_totals[key.frame] = (
            self._frame_totals.get(key.frame, 0) + 2 * int(macs) + int(elementwise))

    def merge(self, other: FlopLedger) -> FlopLedger:
        out = FlopLedger()
        for src in (self, other):
            for key, c in src.counters.items():
                out.add(key, c.macs, c.elementwise, c.passes)
        return out

    def __bool__(self) -> bool:
        return bool(self.counters)

    def frames(self) -> list[int]:
        return sorted(self._frame_totals)

    def frame_total(self, frame: int) -> int:
        return self._frame_totals.get(frame, 0)

    def total(self) -> int:
        return sum(self._frame_totals.values())

    def check_frame(self, frame: int) -> None:
        leaves = sum(c.flops for k, c in self.counters.items() if k.frame == frame)
        if leaves != self.frame_total(frame):
            raise AssertionError(
                f"frame {frame}: total {self.frame_total(frame)} != leaf sum {leaves}")

    def select(self, frame: int | None = None, module: str | None = None,
               block: int | None = None, kinds=None) -> Count:
        """Sum of counters matching every given field."""
        out = Count()
        for k, c in self.counters.items():
            if frame is not None and k.frame != frame:
                continue
            if module is not None and k.module != module:
                continue
            if block is not None and k.block != block:
                continue
            if kinds is not None and k.kind not in kinds:
                continue
            out.macs += c.macs
            out.elementwise += c.elementwise
            out.passes += c.passes
        return out

    def blocks(self) -> list[tuple[int, str, int]]:
        return sorted({(k.frame, k.module, k.block) for k in self.counters if k.block >= 0})


# --- active ledger / scope -------------------------------------------------

@dataclass
class _Scope:
    frame: int = -1
    module: str = ""
    block: int = -1
    kind: str = "norm_misc"


@dataclass
class _State:
    ledgers: list = field(default_factory=list)
    scopes: list = field(default_factory=lambda: [_Scope()])


_STATE = _State()


@contextlib.contextmanager
def recording(ledger: FlopLedger) -> Iterator[FlopLedger]:
    _STATE.ledgers.append(ledger)
    try:
        yield ledger
    finally:
        _STATE.ledgers.pop()


@contextlib.contextmanager
def scope(**fields) -> Iterator[None]:
    cur = _STATE.scopes[-1]
    new = _Scope(**{**cur.__dict__, **fields})
    if new.kind not in OP_KINDS:
        raise ValueError(f"unknown op kind {new.kind!r}")
    _STATE.scopes.append(new)
    try:
        yield
    finally:
        _STATE.scopes.pop()


def record(macs: int = 0, elementwise: int = 0, passes: int = 0) -> None:
    if not _STATE.ledgers:
        return
    s = _STATE.scopes[-1]
    _STATE.ledgers[-1].add(LedgerKey(s.frame, s.module, s.block, s.kind),
                           macs, elementwise, passes)


# --- analytic model ----------------------------------------------------------

def _check_alpha(alpha) -> None:
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def analytic_iiab_flops(H: int, W: int, C: int, w: int, alpha=1):
    """Per-block cost ``(6+6a)HWC^2 + (3a w^2 + 9w^2 + 4)HWC``.

    ``alpha=1`` collapses to the unmasked ``12HWC^2 + (12w^2 + 4)HWC``.
    Pass a ``Fraction`` for exact arithmetic.
    """
    _check_alpha(alpha)
    return (6 + 6 * alpha) * H * W * C * C + (3 * alpha * w * w + 9 * w * w + 4) * H * W * C


def analytic_linear_macs(H: int, W: int, C: int, alpha=1):
    _check_alpha(alpha)
    return (6 + 6 * alpha) * H * W * C * C


def analytic_attention_printed(H: int, W: int, C: int, w: int, alpha=1):
    """The w^2 term exactly as printed: ``(3a + 9) w^2 HWC``."""
    _check_alpha(alpha)
    return (3 * alpha + 9) * w * w * H * W * C


def iiab_attention_macs(H: int, W: int, C: int, w: int, alpha=1):
    """True multiply-accumulates of QK^T and AV with a*HW queries and 3w^2 keys."""
    _check_alpha(alpha)
    return 2 * alpha * H * W * 3 * w * w * C


@dataclass(frozen=True)
class MsabCost:
    linear_macs: int
    attn_matmul_macs: int

    @property
    def total_macs(self) -> int:
        return self.linear_macs + self.attn_matmul_macs


def msab_reference_flops(H: int, W: int, C: int, w: int) -> MsabCost:
    """Joint three-frame self-attention: 3w^2 queries against 3w^2 keys.

    All three frames' tokens are projected to Q, K, V, output-projected and
    pushed through the FFN (ratio 2), i.e. 3x the per-frame linear work.
    """
    tokens = 3 * H * W
    linear = tokens * C * C * (3 + 1 + 4)
    attn = 2 * tokens * 3 * w * w * C
    return MsabCost(linear, attn)


# --- instrumented vs analytic --------------------------------------------------

REPORT_HEADER = (
    "# linear = qkv+proj+ffn MACs, compared exactly with (6+6a)HWC^2\n"
    "# attn_printed = (3a+9)w^2HWC as printed; attn_true = 2*attn_matmul MACs = 12a w^2HWC\n"
    "# misc = LayerNorm/residual element passes (per element of C), printed as 4HWC\n"
    "# analytic = printed per-block formula; instrumented = linear + attn_true + misc"
)


@dataclass
class BlockReport:
    frame: int
    module: str
    block: int
    alpha: Fraction
    analytic_linear: int
    instrumented_linear: int
    analytic_attn_printed: Fraction
    instrumented_attn: int
    misc: int
    analytic: Fraction
    instrumented: int

    @property
    def linear_exact(self) -> bool:
        return self.analytic_linear == self.instrumented_linear

    @property
    def deviation(self) -> Fraction:
        return self.instrumented - self.analytic

    @property
    def relative_deviation(self) -> float:
        return float(self.deviation / self.analytic) if self.analytic else 0.0


def instrumented_vs_analytic(ledger: FlopLedger, H: int, W: int, C: int, w: int,
                             alphas: dict) -> list[BlockReport]:
    """Compare the ledger with the cost model block by block.

    ``alphas`` maps ``(frame, module, block)`` to the exact density used by
    that block (a ``Fraction``); blocks missing from it are skipped.
    """
    if not ledger:
        raise ValueError("empty ledger")
    rows = []
    for frame, module, block in ledger.blocks():
        if (frame, module, block) not in alphas:
            continue
        a = Fraction(alphas[frame, module, block])
        lin = ledger.select(frame, module, block, LINEAR_KINDS).macs
        attn = 2 * ledger.select(frame, module, block, ("attn_matmul",)).macs
        misc = ledger.select(frame, module, block, ("norm_misc",)).passes
        rows.append(BlockReport(
            frame=frame, module=module, block=block, alpha=a,
            analytic_linear=int(analytic_linear_macs(H, W, C, a)),
            instrumented_linear=lin,
            analytic_attn_printed=analytic_attention_printed(H, W, C, w, a),
            instrumented_attn=attn,
            misc=misc,
            analytic=analytic_iiab_flops(H, W, C, w, a),
            instrumented=lin + attn + misc,
        ))
    return rows


def report_csv(rows: list[BlockReport]) -> str:
    lines = [REPORT_HEADER,
             "frame,block,alpha,analytic,instrumented,deviation,relative_deviation,"
             "analytic_linear,instrumented_linear,analytic_attn_printed,instrumented_attn,misc"]
    for r in rows:
        lines.append(
            f"{r.frame},{r.module}.n{r.block},{float(r.alpha):.6f},{float(r.analytic):.1f},"
            f"{r.instrumented},{float(r.deviation):.1f},{r.relative_deviation:.6f},"
            f"{r.analytic_linear},{r.instrumented_linear},{float(r.analytic_attn_printed):.1f},"
            f"{r.instrumented_attn},{r.misc}")
    return "\n".join(lines) + "\n"
