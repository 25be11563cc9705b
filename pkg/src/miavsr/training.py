"""Desk-scale training loop for the combined objective."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import AdamState, Tape, adam_step
from .formats import encode_csv
from .model import ModelConfig, ModelParams, forward_sequence

CURVE_HEADER = ["step", "l_sr", "l_mask", "total", "mean_alpha"]


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (step, l_sr, l_mask, total, mean_alpha)

    @property
    def l_sr(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    @property
    def mean_alpha(self) -> np.ndarray:
        return np.array([r[4] for r in self.rows])

    def csv(self) -> bytes:
        return encode_csv(CURVE_HEADER, self.rows)


def train(cfg: ModelConfig, params: ModelParams, lr_frames, hr_frames, steps: int,
          learning_rate: float = 1e-3, mode: str = "masked", seed: int = 0,
          trainable: Callable[[str], bool] | None = None, state: AdamState | None = None,
          log: TrainLog | None = None) -> TrainLog:
    """Run ``steps`` Adam updates on one sequence, in place on ``params``.

    ``trainable`` filters parameters by name (default: all). In masked mode
    the Gumbel noise comes from a generator seeded with ``seed``, so runs
    are reproducible.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    rng = np.random.default_rng(seed)
    state = state or AdamState()
    log = log or TrainLog()
    named = params.named()
    active = {k: v for k, v in named.items() if trainable is None or trainable(k)}
    if not active:
        raise ValueError("no trainable parameters selected")
    start = len(log.rows)
    for i in range(steps):
        with Tape(active) as tape:
            res = forward_sequence(lr_frames, cfg, params, mode, targets=hr_frames,
                                   training=True, rng=rng)
        loss = res.loss
        grads = tape.backward(loss.total)
        log.rows.append((start + i, loss.l_sr.item(), loss.l_mask.item(), loss.total.item(),
                         loss.mean_alpha))
        adam_step(active, grads, lr=learning_rate, state=state)
    for t in active.values():
        t.requires_grad = False
    return log
